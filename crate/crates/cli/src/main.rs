fn main() {
    std::process::exit(gda_cli::run(std::env::args_os()));
}
