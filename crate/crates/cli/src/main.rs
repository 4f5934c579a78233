use clap::error::ErrorKind;
use clap::Parser;
use diffprobe::cli::{run, Cli};
use diffprobe::error::{CliError, EXIT_USAGE};

fn main() {
    let code = match Cli::try_parse() {
        Ok(cli) => match run(cli) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("{}", e.to_line());
                e.exit_code()
            }
        },
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            0
        }
        Err(e) => {
            // clap's message is multi-line; keep its first line
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", CliError::usage(first).to_line());
            EXIT_USAGE
        }
    };
    std::process::exit(code);
}
