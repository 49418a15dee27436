fn main() {
    std::process::exit(lgss_cli::cli::run(std::env::args_os()));
}
