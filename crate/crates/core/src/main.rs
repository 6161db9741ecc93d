fn main() {
    std::process::exit(arc_core::cli::run(std::env::args_os()));
}
