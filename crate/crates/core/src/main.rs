use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Ok(n) = std::env::var("TUBEPLAN_THREADS") {
        match n.parse::<usize>() {
            Ok(threads) if threads > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
                    eprintln!("warning: cannot size the thread pool: {e}");
                }
            }
            _ => eprintln!("warning: ignoring TUBEPLAN_THREADS={n}"),
        }
    }
    let code = tubeplan::harness::cli::cli_main(std::env::args_os());
    ExitCode::from(code as u8)
}
