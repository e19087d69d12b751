fn main() {
    std::process::exit(digitvox_cli::run(std::env::args_os().collect()));
}
