fn main() {
    std::process::exit(hydroarm_cli::run(std::env::args_os()));
}
