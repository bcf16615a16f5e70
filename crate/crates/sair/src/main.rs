fn main() {
    std::process::exit(sair::cli::run(std::env::args_os()));
}
