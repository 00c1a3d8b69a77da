//! Command-line surface of the `flowcryst` binary.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::basedist::{fit_length_prior, AtomCountTable};
use crate::engine::{generate_many, reconstruct_many, train, AnnealFlags, EpochLog, RunConfig};
use crate::error::{Error, Result};
use crate::flowmatch::Task;
use crate::io::{
    apply_seed_env, apply_setting, config_hash, load_compositions, load_dataset, load_generations, parse_config,
    parse_records, write_records, ArtifactHeader, CrystalRecord, PriorArtifact, SplitSpec,
};
use crate::metrics::{evaluate, MatchTolerances};
use crate::net::checkpoint::{self, CheckpointMeta};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Parser, Debug)]
#[command(name = "flowcryst", version, about = "Riemannian flow matching for crystals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the lattice-length prior and atom-count table of a dataset.
    FitBase {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train a vector-field model.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        prior: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training log CSV.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Predict structures for the compositions in a JSON-lines file.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prior: PathBuf,
        #[arg(long)]
        compositions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Samples per composition.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Generate crystals de novo.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prior: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Compare generated crystals with a reference corpus.
    Metrics {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// N-ary histogram CSV.
        #[arg(long)]
        histogram: Option<PathBuf>,
        /// Skip pairwise matching (de novo corpora).
        #[arg(long)]
        unpaired: bool,
        #[arg(long, default_value_t = 0.5)]
        stol: f64,
        #[arg(long, default_value_t = 10.0)]
        angle_tol: f64,
        #[arg(long, default_value_t = 0.3)]
        ltol: f64,
    },
    /// Run the invariant checks of every module.
    Selfcheck,
}

/// Settings shared by every run: a config file plus individual overrides.
#[derive(Args, Debug, Default)]
struct RunArgs {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` settings, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Integration steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Groups to anti-anneal: subset of `a,f,l`, or `none`.
    #[arg(long)]
    anneal: Option<String>,
    /// Anti-annealing slope.
    #[arg(long)]
    slope: Option<f64>,
}

impl RunArgs {
    fn resolve(&self, default_task: Task) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => parse_config(&std::fs::read_to_string(p)?)?,
            None => RunConfig::default_for(default_task),
        };
        if let Some(t) = &self.task {
            apply_setting(&mut cfg, "task", t)?;
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            apply_setting(&mut cfg, k, v)?;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.max_steps {
            cfg.max_steps = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = &self.anneal {
            cfg.anneal = AnnealFlags::parse(v)?;
        }
        if let Some(v) = self.slope {
            cfg.anneal_slope = v;
        }
        apply_seed_env(&mut cfg)?;
        Ok(cfg)
    }
}

fn split_spec(cfg: &RunConfig) -> SplitSpec {
    SplitSpec { seed: cfg.seed, ..SplitSpec::default() }
}

fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,loss_a,loss_f,loss_l,loss_sce,total,grad_norm\n");
    for e in log {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            e.epoch, e.loss.a, e.loss.f, e.loss.l, e.loss.sce, e.total, e.grad_norm
        )
        .unwrap();
    }
    s
}

fn fit_base(data: &Path, out: &Path, run: &RunArgs) -> Result<String> {
    let cfg = run.resolve(Task::Csp)?;
    let ds = load_dataset(data, &split_spec(&cfg))?;
    let lengths: Vec<[f64; 3]> = ds.train.iter().map(|c| c.lattice.lengths()).collect();
    let artifact = PriorArtifact {
        config_hash: config_hash(&cfg),
        seed: cfg.seed,
        length_prior: fit_length_prior(&lengths)?,
        atom_counts: ds.table.clone(),
    };
    artifact.save(out)?;
    Ok(format!(
        "fitted prior on {} training crystals ({} rejected, {} malformed lines)",
        ds.train.len(),
        ds.report.rejected.len(),
        ds.report.malformed.len()
    ))
}

fn train_cmd(data: &Path, prior: &Path, out: &Path, log: Option<&Path>, run: &RunArgs) -> Result<String> {
    let cfg = run.resolve(Task::Csp)?;
    let prior = PriorArtifact::load(prior)?;
    let ds = load_dataset(data, &split_spec(&cfg))?;
    let meta = CheckpointMeta { config_hash: config_hash(&cfg), seed: cfg.seed };
    let result = train(&cfg, &ds.train, &prior.length_prior, |e| {
        eprintln!("epoch {:>4}  loss {:.6}  grad {:.4}", e.epoch, e.total, e.grad_norm)
    });
    let output = match result {
        Ok(o) => o,
        Err(Error::Diverged { step, reason, last_good }) => {
            let mut p = out.as_os_str().to_owned();
            p.push(".last-good");
            checkpoint::save(Path::new(&p), &last_good, &meta)?;
            return Err(Error::Numeric(format!("training diverged at step {step}: {reason}")));
        }
        Err(e) => return Err(e),
    };
    checkpoint::save(out, &output.model, &meta)?;
    if let Some(p) = log {
        std::fs::write(p, log_csv(&output.log))?;
    }
    Ok(format!("trained {} steps on {} crystals", output.step_losses.len(), ds.train.len()))
}

/// Loads a checkpoint and resolves the run settings, defaulting the task to the model's.
fn load_model(path: &Path, run: &RunArgs) -> Result<(crate::net::Model, RunConfig)> {
    let (model, _) = checkpoint::load(path)?;
    let mut cfg = run.resolve(model.task())?;
    if model.task() != cfg.task {
        return Err(Error::Config(format!(
            "checkpoint is a {} model but the run is configured for {}",
            model.task(),
            cfg.task
        )));
    }
    cfg.net = model.config.clone();
    cfg.validate()?;
    Ok((model, cfg))
}

fn reconstruct_cmd(
    ckpt: &Path,
    prior: &Path,
    comps: &Path,
    out: &Path,
    repeats: usize,
    run: &RunArgs,
) -> Result<String> {
    let (model, cfg) = load_model(ckpt, run)?;
    let prior = PriorArtifact::load(prior)?;
    let comps = load_compositions(comps)?;
    let mut ids = Vec::new();
    let mut kinds = Vec::new();
    for (id, k) in &comps {
        for r in 0..repeats.max(1) {
            ids.push(if repeats > 1 { format!("{id}-{r}") } else { id.clone() });
            kinds.push(k.clone());
        }
    }
    let samples = reconstruct_many(&model, &kinds, &prior.length_prior, &cfg.integration(), cfg.seed);
    let records = ids
        .iter()
        .zip(samples)
        .map(|(id, s)| s.map(|s| CrystalRecord::from_sample(id.clone(), &s)))
        .collect::<Result<Vec<_>>>()?;
    let invalid = records.iter().filter(|r| r.valid == Some(false)).count();
    write_records(out, Some(&ArtifactHeader::for_config(&cfg)), &records)?;
    Ok(format!("wrote {} structures ({invalid} invalid)", records.len()))
}

fn sample_cmd(ckpt: &Path, prior: &Path, count: usize, out: &Path, run: &RunArgs) -> Result<String> {
    let (model, cfg) = load_model(ckpt, run)?;
    let prior = PriorArtifact::load(prior)?;
    let table: &AtomCountTable = &prior.atom_counts;
    let samples = generate_many(&model, count, table, &prior.length_prior, &cfg.integration(), cfg.seed);
    let records = samples
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.map(|s| CrystalRecord::from_sample(format!("gen-{i}"), &s)))
        .collect::<Result<Vec<_>>>()?;
    let invalid = records.iter().filter(|r| r.valid == Some(false)).count();
    write_records(out, Some(&ArtifactHeader::for_config(&cfg)), &records)?;
    Ok(format!("wrote {} crystals ({invalid} invalid)", records.len()))
}

#[allow(clippy::too_many_arguments)]
fn metrics_cmd(
    generated: &Path,
    reference: &Path,
    out: &Path,
    histogram: Option<&Path>,
    unpaired: bool,
    tol: MatchTolerances,
) -> Result<String> {
    let gen = load_generations(generated)?;
    let (records, _) = parse_records(&std::fs::read_to_string(reference)?)?;
    let refs = records.iter().map(|r| r.to_crystal()).collect::<Result<Vec<_>>>()?;
    let report = evaluate(&gen, &refs, &tol, !unpaired)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(out, json + "\n")?;
    if let Some(h) = histogram {
        std::fs::write(h, report.nary_csv())?;
    }
    Ok(match report.match_rate {
        Some(r) => format!("match rate {r:.4}, validity {:.4}", report.structural_validity_rate),
        None => format!("validity {:.4}", report.structural_validity_rate),
    })
}

fn selfcheck_cmd() -> (i32, String) {
    let mut s = String::new();
    let mut failed = 0;
    for (name, outcome) in crate::selfcheck::run_all() {
        match outcome {
            Ok(()) => writeln!(s, "PASS {name}").unwrap(),
            Err(e) => {
                failed += 1;
                writeln!(s, "FAIL {name}: {e}").unwrap();
            }
        }
    }
    if failed == 0 {
        (EXIT_OK, s)
    } else {
        writeln!(s, "{failed} properties failed").unwrap();
        (EXIT_VALIDATION, s)
    }
}

fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

/// Parses `args` (including the program name), runs the subcommand and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::FitBase { data, out, run } => fit_base(data, out, run),
        Command::Train { data, prior, out, log, run } => train_cmd(data, prior, out, log.as_deref(), run),
        Command::Reconstruct { checkpoint, prior, compositions, out, repeats, run } => {
            reconstruct_cmd(checkpoint, prior, compositions, out, *repeats, run)
        }
        Command::Sample { checkpoint, prior, count, out, run } => sample_cmd(checkpoint, prior, *count, out, run),
        Command::Metrics { generated, reference, out, histogram, unpaired, stol, angle_tol, ltol } => {
            MatchTolerances::new(*stol, *angle_tol, *ltol)
                .and_then(|tol| metrics_cmd(generated, reference, out, histogram.as_deref(), *unpaired, tol))
        }
        Command::Selfcheck => {
            let (code, text) = selfcheck_cmd();
            print!("{text}");
            return code;
        }
    };
    match result {
        Ok(msg) => {
            println!("{msg}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
