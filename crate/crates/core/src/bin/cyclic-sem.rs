use std::process::ExitCode;

use cyclic_sem::cli::{run_command, Format};

fn main() -> ExitCode {
    let out = run_command(std::env::args_os());
    if let Some(help) = out.help {
        print!("{help}");
        return ExitCode::SUCCESS;
    }
    match out.format {
        Format::Json => println!("{}", out.report.to_json()),
        Format::Text if out.status == 0 => print!("{}", out.report),
        Format::Text => {
            if !out.report.results.is_empty() {
                print!("{}", out.report);
            }
        }
    }
    if let Some(err) = &out.report.error {
        eprintln!("error: {err}");
    }
    ExitCode::from(out.status as u8)
}
