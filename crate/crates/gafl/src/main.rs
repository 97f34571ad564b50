fn main() {
    std::process::exit(gafl::cli::run(std::env::args_os()));
}
