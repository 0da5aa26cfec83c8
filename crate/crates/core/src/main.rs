fn main() {
    std::process::exit(mplt::cli::dispatch(std::env::args_os()));
}
