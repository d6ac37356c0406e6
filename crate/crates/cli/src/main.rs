fn main() {
    eprintln!("cli wiring lands after the core modules");
    std::process::exit(1);
}
