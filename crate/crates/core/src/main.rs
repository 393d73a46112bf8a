fn main() {
    std::process::exit(subnetens::cli::cli_main(std::env::args_os()));
}
