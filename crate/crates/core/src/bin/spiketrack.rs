fn main() {
    std::process::exit(spiketrack::cli::main_with_args(std::env::args_os()));
}
