fn main() {
    std::process::exit(lqg_pbe::cli::main_with_args(std::env::args_os()));
}
