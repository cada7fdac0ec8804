fn main() {
    std::process::exit(peft_core::cli::run(std::env::args_os()));
}
