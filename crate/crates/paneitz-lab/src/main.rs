fn main() {
    // CLI wiring lands with the cli module; placeholder keeps the bin target alive.
    eprintln!("paneitz-lab: command-line interface not built yet");
    std::process::exit(1);
}
