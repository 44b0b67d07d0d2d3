fn main() {
    std::process::exit(gravelast_cli::dispatch(std::env::args_os()));
}
