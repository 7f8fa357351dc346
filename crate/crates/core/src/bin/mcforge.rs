fn main() {
    std::process::exit(mcforge::cli::main_with(std::env::args_os()));
}
