fn main() {
    std::process::exit(tweetlm_cli::run(std::env::args_os()));
}
