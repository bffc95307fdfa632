use std::io::Write;
use std::process::ExitCode;

fn main() -> ExitCode {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match evcsi_cli::run(std::env::args().skip(1), &mut out, &mut std::io::stderr()) {
        Ok(()) => {
            let _ = out.flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            let _ = out.flush();
            if let Some(clap) = e.downcast_ref::<clap::Error>() {
                let _ = clap.print();
                return ExitCode::from(if clap.use_stderr() { 3 } else { 0 });
            }
            eprintln!("error: {e:#}");
            ExitCode::from(evcsi_cli::exit_code(&e))
        }
    }
}
