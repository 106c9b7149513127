use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match anomaly_vqa_cli::parse(std::env::args_os().collect()) {
        Ok(Ok(cli)) => cli,
        Ok(Err(e)) => e.exit(),
        Err(e) => {
            eprintln!("error[{}]: {e:#}", anomaly_vqa_cli::error_code(&e));
            return ExitCode::FAILURE;
        }
    };
    match anomaly_vqa_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // one line, whatever the error chain looks like
            let message = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{}]: {message}", anomaly_vqa_cli::error_code(&e));
            ExitCode::FAILURE
        }
    }
}
