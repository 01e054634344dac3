fn main() {
    std::process::exit(milvae::cli::run(std::env::args_os()));
}
