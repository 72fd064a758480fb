fn main() {
    std::process::exit(flowsup::cli::run());
}
