fn main() {
    std::process::exit(stnlab::cli::run(std::env::args_os()));
}
