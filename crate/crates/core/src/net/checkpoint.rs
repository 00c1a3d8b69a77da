//! Versioned binary checkpoint.
//!
//! ```text
//! magic    b"FLOWCKPT"
//! version  u32 LE
//! hlen     u64 LE, then hlen bytes of JSON {config, layout, config_hash, seed}
//! zscore   30 × f64 LE (lattice mean/std, df mean/std, dl mean/std)
//! count    u64 LE, then count × f64 LE parameter values
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelParams, NetConfig, ParamLayout, ZScoreStats};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FLOWCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: NetConfig,
    layout: ParamLayout,
    config_hash: String,
    seed: u64,
}

fn zscore_values(z: &ZScoreStats) -> Vec<f64> {
    [&z.lattice_mean[..], &z.lattice_std, &z.df_mean, &z.df_std, &z.dl_mean, &z.dl_std].concat()
}

pub fn write_checkpoint<W: Write>(mut w: W, model: &Model, meta: &CheckpointMeta) -> Result<()> {
    let header = Header {
        config: model.config.clone(),
        layout: model.params.layout.clone(),
        config_hash: meta.config_hash.clone(),
        seed: meta.seed,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for v in zscore_values(&model.zscore) {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(model.params.values.len() as u64).to_le_bytes())?;
    for v in &model.params.values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Model, CheckpointMeta)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a flowcryst checkpoint".into()));
    }
    let mut vb = [0u8; 4];
    r.read_exact(&mut vb)?;
    let version = u32::from_le_bytes(vb);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let hlen = read_u64(&mut r)? as usize;
    if hlen > 1 << 24 {
        return Err(Error::Format("checkpoint header too large".into()));
    }
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf)?;
    let header: Header = serde_json::from_slice(&hbuf).map_err(|e| Error::Format(e.to_string()))?;
    let z = read_f64s(&mut r, 30)?;
    let zscore = ZScoreStats {
        lattice_mean: z[0..6].try_into().unwrap(),
        lattice_std: z[6..12].try_into().unwrap(),
        df_mean: z[12..15].try_into().unwrap(),
        df_std: z[15..18].try_into().unwrap(),
        dl_mean: z[18..24].try_into().unwrap(),
        dl_std: z[24..30].try_into().unwrap(),
    };
    let count = read_u64(&mut r)? as usize;
    if count != header.layout.total {
        return Err(Error::Format(format!(
            "checkpoint holds {count} parameters but its layout needs {}",
            header.layout.total
        )));
    }
    let values = read_f64s(&mut r, count)?;
    let model = Model::new(header.config, ModelParams { layout: header.layout, values }, zscore)?;
    Ok((model, CheckpointMeta { config_hash: header.config_hash, seed: header.seed }))
}

pub fn save(path: &Path, model: &Model, meta: &CheckpointMeta) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(std::io::BufWriter::new(f), model, meta)
}

pub fn load(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowmatch::Task;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = NetConfig { hidden_dim: 6, layers: 1, ..NetConfig::desk(Task::Dng) };
        let mut m = Model::init(cfg, &mut rng).unwrap();
        m.zscore.dl_std[2] = 0.123456789;
        m.params.values[3] = f64::MIN_POSITIVE;
        let meta = CheckpointMeta { config_hash: "abc".into(), seed: 77 };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m, &meta).unwrap();
        let (back, meta2) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(back.config, m.config);
        assert_eq!(back.zscore, m.zscore);
        let a: Vec<u64> = m.params.values.iter().map(|x| x.to_bits()).collect();
        let b: Vec<u64> = back.params.values.iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b);

        let mut again = Vec::new();
        write_checkpoint(&mut again, &back, &meta2).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        assert!(matches!(read_checkpoint(&b"NOTACKPTxxxx"[..]), Err(Error::Format(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = NetConfig { hidden_dim: 4, layers: 1, ..NetConfig::desk(Task::Csp) };
        let m = Model::init(cfg, &mut rng).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m, &CheckpointMeta { config_hash: String::new(), seed: 0 }).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint(buf.as_slice()).is_err());
    }
}
