use clap::Parser;
use ssr_cli::{commands, Cli, Command};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Split(a) => commands::split(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer_cmd(a),
        Command::Fid(a) => commands::fid(a),
        Command::Mos(a) => commands::mos(a),
        Command::ExportStudy(a) => commands::export_study_cmd(a),
        Command::ServeStudy(a) => commands::serve_study(a),
    };
    match result {
        Ok(v) => println!("{v}"),
        Err(e) => {
            println!("{}", commands::error_record(&e));
            std::process::exit(1);
        }
    }
}
