use std::process::ExitCode;

fn main() -> ExitCode {
    if let Some(n) = std::env::var("UQLINK_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // Outputs do not depend on the thread count; this only bounds CPU use.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match uqlink_cli::run(std::env::args_os()) {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            if outcome.failed {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(err) => {
            if let Some(e) = err.downcast_ref::<clap::Error>() {
                if !e.use_stderr() {
                    let _ = e.print();
                    return ExitCode::SUCCESS;
                }
            }
            let body = serde_json::json!({
                "error": uqlink_cli::error_kind(&err),
                "message": format!("{err:#}"),
            });
            eprintln!("{body}");
            ExitCode::from(2)
        }
    }
}
