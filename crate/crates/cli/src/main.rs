fn main() {
    std::process::exit(cdlab::run(std::env::args_os()));
}
