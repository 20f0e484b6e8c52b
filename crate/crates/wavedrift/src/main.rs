fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    if let Err(err) = wavedrift::cli::run() {
        let report = serde_json::json!({
            "error": err.kind(),
            "message": err.to_string(),
        });
        eprintln!("{report}");
        std::process::exit(err.exit_code());
    }
}
