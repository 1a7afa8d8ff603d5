fn main() {
    std::process::exit(rank1_lab::cli::run_from(std::env::args_os()));
}
