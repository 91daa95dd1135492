fn main() {
    std::process::exit(uanet::cli::run(std::env::args_os()));
}
