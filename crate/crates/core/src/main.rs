fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut stdout = std::io::stdout();
    if let Err(e) = nlcunet::cli::run(std::env::args_os(), &mut stdout) {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
