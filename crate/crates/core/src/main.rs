fn main() {
    std::process::exit(topic_dpr::cli::run(std::env::args_os()));
}
