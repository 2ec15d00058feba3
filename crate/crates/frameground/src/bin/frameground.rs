fn main() {
    std::process::exit(frameground::cli::run(std::env::args()));
}
