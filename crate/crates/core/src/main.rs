fn main() {
    std::process::exit(tpmm::cli::dispatch(std::env::args_os()));
}
