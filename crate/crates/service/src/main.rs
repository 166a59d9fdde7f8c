use clap::Parser;
use intenttune_service::cli::{self, Cli, Command};
use intenttune_service::Workspace;

fn main() -> std::process::ExitCode {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    let cli = Cli::parse();
    let config = match cli::resolve_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return std::process::ExitCode::from(2);
        }
    };
    let ws = match Workspace::open(config.clone()) {
        Ok(ws) => ws,
        Err(e) => {
            eprintln!("error: {e}");
            return std::process::ExitCode::FAILURE;
        }
    };
    let result = if let Command::Serve { bind } = &cli.command {
        let bind = bind.clone().unwrap_or(config.bind.clone());
        let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
        rt.block_on(cli::serve(ws, &bind)).map_err(|e| intenttune_service::ServiceError::internal(e.to_string()))
    } else {
        cli::run(cli, ws)
    };
    match result {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::to_string_pretty(&e.body()).unwrap_or_else(|_| e.to_string()));
            std::process::ExitCode::FAILURE
        }
    }
}
