fn main() {
    std::process::exit(ovrec::cli::dispatch(std::env::args_os()));
}
