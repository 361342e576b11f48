fn main() {
    std::process::exit(nucleosynth_cli::run(std::env::args_os()));
}
