fn main() {
    std::process::exit(rec_mfg_cli::run(std::env::args_os()));
}
