fn main() {
    std::process::exit(impactq::cli::run(std::env::args_os()));
}
