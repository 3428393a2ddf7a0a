fn main() {
    std::process::exit(seqmodes::cli::main_entry());
}
