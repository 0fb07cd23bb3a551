fn main() {
    std::process::exit(cada_cli::run(std::env::args_os()));
}
