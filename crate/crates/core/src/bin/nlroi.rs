fn main() {
    std::process::exit(nlroi::cli::cli_main(std::env::args_os()));
}
