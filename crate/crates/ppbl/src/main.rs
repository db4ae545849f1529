fn main() {
    std::process::exit(ppbl::cli::run(std::env::args().collect()));
}
