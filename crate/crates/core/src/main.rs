fn main() {
    pcexpert::tune_allocator();
    std::process::exit(pcexpert::cli::run(std::env::args_os()));
}
