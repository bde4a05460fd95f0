mod args;
mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// Exit status for a failed run: 2 for bad parameters or configuration,
/// 3 for unreadable or inconsistent data, 4 for numeric failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<geocon::Error>() {
            return match e {
                geocon::Error::Param(_) | geocon::Error::Config(_) => 2,
                geocon::Error::Numeric(_) => 4,
                _ => 3,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    2
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::GraphDump(a) => commands::graph_dump(a),
        Command::ClusterDump(a) => commands::cluster_dump(a),
        Command::TrainEncoder(a) => commands::train_encoder(a),
        Command::Embed(a) => commands::embed(a),
        Command::Bags(a) => commands::bags(a),
        Command::TrainMil(a) => commands::train_mil_cmd(a),
        Command::Eval(a) => commands::eval(a),
        Command::Pipeline(a) => commands::pipeline(a),
        Command::AblatePrototypes(a) => commands::ablate_prototypes(a),
    }
}

fn main() -> ExitCode {
    let argv = match config::expand_args(std::env::args().collect()) {
        Ok(argv) => argv,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(argv);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        let param = anyhow::Error::new(geocon::Error::Param("x".into())).context("stage");
        assert_eq!(exit_code(&param), 2);
        let data = anyhow::Error::new(geocon::Error::Data("x".into())).context("stage");
        assert_eq!(exit_code(&data), 3);
        let numeric = anyhow::Error::new(geocon::Error::Numeric("nan".into()));
        assert_eq!(exit_code(&numeric), 4);
        let io = anyhow::Error::new(std::io::Error::other("disk")).context("writing");
        assert_eq!(exit_code(&io), 3);
    }

    fn parse(argv: &[&str]) -> Cli {
        let argv = config::expand_args(argv.iter().map(|s| s.to_string()).collect()).unwrap();
        Cli::try_parse_from(argv).unwrap()
    }

    fn desk_conf() -> String {
        format!("{}/../../configs/desk.conf", env!("CARGO_MANIFEST_DIR"))
    }

    #[test]
    fn desk_config_matches_library_presets() {
        let conf = desk_conf();
        let cli = parse(&["geocon", "pipeline", "--config", &conf, "--input", "x.csv", "--metrics", "m.csv"]);
        let Command::Pipeline(a) = cli.command else {
            panic!("expected pipeline");
        };
        assert_eq!(a.encoder.to_config(0), geocon::TrainConfig::desk());
        assert_eq!(a.mil.to_config(0), geocon::MilConfig::desk());
    }

    #[test]
    fn command_line_overrides_config_file() {
        let conf = desk_conf();
        let cli = parse(&[
            "geocon", "pipeline", "--input", "x.csv", "--metrics", "m.csv", "--hidden", "8,4", "--lr=0.5",
            "--config", &conf,
        ]);
        let Command::Pipeline(a) = cli.command else {
            panic!("expected pipeline");
        };
        let enc = a.encoder.to_config(0);
        assert_eq!(enc.hidden, vec![8, 4]);
        assert_eq!(enc.lr, 0.5);
        assert_eq!(enc.epochs, geocon::TrainConfig::desk().epochs);
    }

    #[test]
    fn defaults_match_library_defaults() {
        let cli = parse(&["geocon", "pipeline", "--input", "x.csv", "--metrics", "m.csv"]);
        let Command::Pipeline(a) = cli.command else {
            panic!("expected pipeline");
        };
        assert_eq!(a.encoder.to_config(0), geocon::TrainConfig::default());
        assert_eq!(a.mil.to_config(0), geocon::MilConfig::default());
        assert_eq!(a.repeats, 10);
    }

    #[test]
    fn widths_parse_and_reject_garbage() {
        assert_eq!("128, 64".parse::<args::Widths>().unwrap().0, vec![128, 64]);
        assert!("12,x".parse::<args::Widths>().is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
