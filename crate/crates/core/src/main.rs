fn main() {
    let from_env = std::env::var_os("RUST_LOG").is_some();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("debug"))
        .format_timestamp_millis()
        .init();
    if !from_env {
        // raised by -v inside the CLI
        log::set_max_level(log::LevelFilter::Warn);
    }
    let mut stdout = std::io::stdout().lock();
    let mut stderr = std::io::stderr().lock();
    let code = epsim::cli::run(std::env::args_os(), &mut stdout, &mut stderr);
    drop(stdout);
    std::process::exit(code);
}
