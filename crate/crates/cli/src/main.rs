fn main() {
    std::process::exit(sonarmatch_cli::run_command(std::env::args_os()));
}
