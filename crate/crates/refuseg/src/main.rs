fn main() {
    std::process::exit(refuseg::cli::run(std::env::args_os()));
}
