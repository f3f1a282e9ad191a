fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(pmt::harness::cli::run(args));
}
