fn main() {
    // CLI wiring lands after the library modules.
    eprintln!("conceptlab: not yet wired");
    std::process::exit(2);
}
