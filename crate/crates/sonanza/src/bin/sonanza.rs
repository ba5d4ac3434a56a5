fn main() {
    std::process::exit(sonanza::cli::run(std::env::args_os()));
}
