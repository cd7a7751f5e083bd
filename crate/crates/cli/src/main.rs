use tracing_subscriber::filter::LevelFilter;

fn main() {
    let verbose = std::env::args().filter(|a| a == "-v" || a == "--verbose").count()
        + std::env::args().filter(|a| a == "-vv").count() * 2;
    let level = match verbose {
        0 => LevelFilter::WARN,
        1 => LevelFilter::INFO,
        _ => LevelFilter::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(level)
        .with_target(false)
        .init();
    std::process::exit(encsynth_cli::main_with_args(std::env::args_os()));
}
