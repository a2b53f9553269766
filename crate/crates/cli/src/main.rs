fn main() {
    std::process::exit(pirpsi_cli::cli::run(std::env::args_os()));
}
