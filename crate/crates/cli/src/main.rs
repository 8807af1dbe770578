fn main() {
    std::process::exit(gsedit_cli::run());
}
