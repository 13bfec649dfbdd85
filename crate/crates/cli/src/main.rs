use std::process::ExitCode;

fn main() -> ExitCode {
    match qtraj_cli::run_from_args(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qtraj: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
