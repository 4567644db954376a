fn main() {
    std::process::exit(dynvol::cli::run());
}
