fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(lol::cli::run_from(argv));
}
