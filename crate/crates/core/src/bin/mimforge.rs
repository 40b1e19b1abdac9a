fn main() {
    std::process::exit(mimforge::cli::run(std::env::args_os()));
}
