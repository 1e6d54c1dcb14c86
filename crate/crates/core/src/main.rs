fn main() {
    std::process::exit(lbcf::cli::run(std::env::args_os()));
}
