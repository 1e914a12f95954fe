fn main() {
    std::process::exit(jelly::run_cli());
}
