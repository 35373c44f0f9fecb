fn main() {
    let stdout = std::io::stdout();
    if let Err(e) = xformer::runtime::cli::run(std::env::args_os(), &mut stdout.lock()) {
        eprintln!("xformer: {e}");
        std::process::exit(match e {
            xformer::Error::Config(_) => 2,
            _ => 1,
        });
    }
}
