fn main() {
    std::process::exit(emotext::run_cli());
}
