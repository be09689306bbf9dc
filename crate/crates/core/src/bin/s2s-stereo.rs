fn main() {
    std::process::exit(s2s_stereo::cli::main_with_args(std::env::args_os()));
}
