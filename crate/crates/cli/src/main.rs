fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    qds_cli::init_threads();
    std::process::exit(qds_cli::run_from_args(std::env::args()));
}
