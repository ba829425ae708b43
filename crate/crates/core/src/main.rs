fn main() {
    std::process::exit(amlpf::cli::run(std::env::args_os()));
}
