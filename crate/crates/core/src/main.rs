fn main() {
    std::process::exit(adapdiscom::cli::run(std::env::args_os()));
}
