fn main() {
    std::process::exit(qamo::cli::run(std::env::args_os()));
}
