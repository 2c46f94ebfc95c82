fn main() {
    std::process::exit(orvec_sam::cli::main_with_args(std::env::args_os()));
}
