fn main() {
    std::process::exit(elf_cli::run_cli(std::env::args_os()));
}
