fn main() {
    std::process::exit(cache_auction::cli::run(std::env::args_os()));
}
