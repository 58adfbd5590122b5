fn main() {
    std::process::exit(dat_core::cli::dispatch(std::env::args_os()));
}
