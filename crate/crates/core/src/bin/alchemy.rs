fn main() {
    let code = alchemy_core::cli::run(std::env::args_os(), &mut std::io::stdout().lock());
    std::process::exit(code);
}
