fn main() {
    std::process::exit(meshzs::cli::run(std::env::args_os()));
}
