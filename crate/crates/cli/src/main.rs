use clap::Parser;

fn main() {
    let cli = match fdn_cli::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            std::process::exit(if e.use_stderr() {
                fdn_cli::EXIT_USAGE
            } else {
                fdn_cli::EXIT_OK
            });
        }
    };
    let code = fdn_cli::execute(cli, &mut std::io::stdout(), &mut std::io::stderr());
    std::process::exit(code);
}
