fn main() {
    std::process::exit(grpo_lab::cli::main_with(std::env::args_os()));
}
