fn main() {
    std::process::exit(scenevae::harness::cli(std::env::args().skip(1).collect()));
}
