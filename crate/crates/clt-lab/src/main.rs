use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};
use clt_lab::config::ExperimentConfig;
use clt_lab::report::write_outputs;
use clt_lab::{run, LabError, CATALOG};

fn run_args(cmd: Command) -> Command {
    cmd.arg(Arg::new("config").long("config").value_name("PATH").value_parser(value_parser!(PathBuf)))
        .arg(Arg::new("seed").long("seed").value_name("U64").value_parser(value_parser!(u64)))
        .arg(Arg::new("out").long("out").value_name("DIR").value_parser(value_parser!(PathBuf)))
        .arg(Arg::new("threads").long("threads").value_name("N").value_parser(value_parser!(usize)))
        .arg(Arg::new("quick").long("quick").action(ArgAction::SetTrue).help("reduced counts"))
}

fn cli() -> Command {
    let mut cmd = Command::new("clt-lab")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Quantitative CLT experiments on martingale embeddings")
        .subcommand_required(true)
        .subcommand(Command::new("list").about("List experiments and what they check"))
        .subcommand(run_args(Command::new("all").about("Run every experiment into <out>/<experiment>")));
    for e in &CATALOG {
        cmd = cmd.subcommand(run_args(Command::new(e.id).about(e.summary)));
    }
    cmd
}

fn resolve(id: &str, m: &ArgMatches) -> Result<ExperimentConfig, LabError> {
    let seed = m.get_one::<u64>("seed").copied();
    let mut cfg = match m.get_one::<PathBuf>("config") {
        Some(p) => {
            let c = ExperimentConfig::load(p)?;
            if c.experiment != id {
                return Err(LabError::Config(format!("config is for {:?}, not {id:?}", c.experiment)));
            }
            c
        }
        None => ExperimentConfig::new(id, seed.ok_or_else(|| LabError::Config("--seed or --config is required".into()))?),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if m.get_flag("quick") {
        cfg.quick = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(id: &str, m: &ArgMatches, out_root: Option<&PathBuf>) -> Result<bool, LabError> {
    let cfg = resolve(id, m)?;
    let dir = match out_root {
        Some(root) => root.join(id),
        None => m
            .get_one::<PathBuf>("out")
            .cloned()
            .or_else(|| cfg.out.clone())
            .unwrap_or_else(|| PathBuf::from("runs").join(id)),
    };
    let outcome = run(&cfg)?;
    write_outputs(&dir, &outcome.report, &outcome.tables)?;
    let mut out = std::io::stdout().lock();
    let _ = write!(out, "{}", outcome.report.summary());
    let _ = writeln!(out, "wrote {}", dir.display());
    Ok(outcome.report.passed)
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand required");
    if name == "list" {
        let mut out = std::io::stdout().lock();
        for e in &CATALOG {
            let _ = writeln!(out, "{:<22} {:<4} {}", e.id, e.criterion, e.binding);
        }
        return ExitCode::SUCCESS;
    }
    if let Some(&n) = sub.get_one::<usize>("threads") {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = if name == "all" {
        if sub.get_one::<PathBuf>("config").is_some() {
            eprintln!("error: `all` takes no --config");
            return ExitCode::from(2);
        }
        let root = sub.get_one::<PathBuf>("out").cloned().unwrap_or_else(|| PathBuf::from("runs"));
        CATALOG.iter().try_fold(true, |ok, e| execute(e.id, sub, Some(&root)).map(|p| ok && p))
    } else {
        execute(name, sub, None)
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
