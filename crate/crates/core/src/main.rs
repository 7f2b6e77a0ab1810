fn main() {
    std::process::exit(autodml_iv::cli::run(std::env::args_os()));
}
