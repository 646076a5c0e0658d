use std::process::ExitCode;

fn main() -> ExitCode {
    let result = icl_scope::cli::init_threads().and_then(|()| icl_scope::cli::run_from(std::env::args_os()));
    match result {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
