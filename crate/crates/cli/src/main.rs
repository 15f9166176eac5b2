fn main() {
    std::process::exit(hemoforge::run(std::env::args_os()));
}
