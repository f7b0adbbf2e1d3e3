fn main() {
    std::process::exit(samba_cli::run(std::env::args_os()));
}
