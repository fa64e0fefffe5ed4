use std::process::ExitCode;

fn main() -> ExitCode {
    if let Ok(n) = std::env::var("HARMONIA_THREADS") {
        std::env::set_var("RAYON_NUM_THREADS", n);
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match harmonia::cli::run(std::env::args_os(), &mut std::io::stdout()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code as u8)
        }
    }
}
