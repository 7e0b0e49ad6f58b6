fn main() {
    std::process::exit(blockie::cli::cli_main(std::env::args_os()));
}
