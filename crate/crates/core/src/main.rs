fn main() {
    std::process::exit(fpdtrack::cli::cli_main(std::env::args_os()));
}
