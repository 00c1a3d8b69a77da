fn main() {
    std::process::exit(flowcryst::cli::run(std::env::args_os()));
}
