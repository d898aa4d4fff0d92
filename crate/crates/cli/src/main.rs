fn main() {
    std::process::exit(bsdp_cli::run(std::env::args_os()));
}
