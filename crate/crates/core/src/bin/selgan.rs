fn main() {
    std::process::exit(selection_gan::cli::main_from_env());
}
