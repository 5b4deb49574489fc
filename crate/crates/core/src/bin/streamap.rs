fn main() {
    std::process::exit(streamap::cli::run(std::env::args_os()));
}
