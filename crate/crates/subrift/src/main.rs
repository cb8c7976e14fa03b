fn main() {
    std::process::exit(subrift::cli::main_from_env());
}
