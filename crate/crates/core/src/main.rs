fn main() {
    std::process::exit(glyphread::cli::run(std::env::args_os()));
}
