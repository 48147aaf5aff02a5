fn main() {
    std::process::exit(finenet_cli::run(std::env::args_os()));
}
