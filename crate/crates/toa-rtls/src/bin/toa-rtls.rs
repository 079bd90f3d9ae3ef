fn main() {
    std::process::exit(toa_rtls::cli::run_cli(std::env::args_os()));
}
