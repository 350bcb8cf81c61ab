fn main() {
    std::process::exit(drgrade_cli::dispatch(std::env::args_os()));
}
