fn main() {
    std::process::exit(trajkd_cli::run(std::env::args_os()));
}
