fn main() {
    std::process::exit(ppc::cli::run(std::env::args_os()));
}
