fn main() {
    std::process::exit(renewal_cli::run(std::env::args_os()));
}
