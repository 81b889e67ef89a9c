fn main() {
    std::process::exit(headsynth::cli::run(std::env::args_os()));
}
