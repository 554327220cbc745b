fn main() {
    std::process::exit(densepath::cli::run(std::env::args_os()));
}
