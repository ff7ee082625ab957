fn main() {
    std::process::exit(cot_progress::cli::main());
}
