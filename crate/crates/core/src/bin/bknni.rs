fn main() {
    std::process::exit(bknni::cli::run(std::env::args_os()));
}
