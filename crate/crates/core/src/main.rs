fn main() {
    std::process::exit(moe_dispatch::cli::run(std::env::args_os()));
}
