fn main() {
    std::process::exit(gflow_cli::cli_run(std::env::args_os()));
}
