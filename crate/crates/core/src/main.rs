fn main() {
    std::process::exit(tessellate::cli::main());
}
