fn main() {
    std::process::exit(sti_forecast::cli::main_with_args(std::env::args_os()));
}
