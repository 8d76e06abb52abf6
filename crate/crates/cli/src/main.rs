fn main() {
    std::process::exit(erw_cli::run(std::env::args_os()));
}
