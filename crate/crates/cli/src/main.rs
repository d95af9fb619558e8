fn main() {
    std::process::exit(ablb::run_command(std::env::args_os()));
}
