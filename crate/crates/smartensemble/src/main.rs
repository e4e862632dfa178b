fn main() {
    std::process::exit(smartensemble::cli::run(std::env::args_os()));
}
