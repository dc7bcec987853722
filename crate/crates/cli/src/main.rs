//! Entry point: parse, dispatch, map failures to exit codes. Exit 0 on
//! success, 1 on runtime failure, 2 on usage or config errors.

mod cli;
mod commands;
mod config;
mod manifest;

use clap::Parser;

use crate::commands::Failure;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let parsed = cli::Cli::parse();
    let result = match &parsed.command {
        cli::Command::BuildCorpus(args) => commands::build_corpus(args),
        cli::Command::MakeFixture(args) => commands::make_fixture(args),
        cli::Command::TrainVocab(args) => commands::train_vocab_cmd(args),
        cli::Command::TrainSft(args) => commands::train_sft_cmd(args),
        cli::Command::TrainRm(args) => commands::train_rm_cmd(args),
        cli::Command::TrainPpo(args) => commands::train_ppo_cmd(args),
        cli::Command::EvalGrantedRatio(args) => commands::eval_granted_ratio_cmd(args),
        cli::Command::Report(args) => commands::report_cmd(args),
    };
    match result {
        Ok(()) => {}
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            std::process::exit(2);
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}
