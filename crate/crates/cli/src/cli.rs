//! Argument parsing and dispatch. Every config key is also a `--flag`.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::config::{RawConfig, RunConfig, KEYS};
use crate::error::CliError;
use crate::experiment;

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn with_keys(cmd: Command) -> Command {
    let mut cmd = cmd.args_override_self(true).arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("config file of `key = value` lines under [section] headers; flags override it"),
    );
    for k in KEYS {
        let help = if k.default.is_empty() {
            format!("[{}] {}", k.section, k.help)
        } else {
            format!("[{}] {} (default: {})", k.section, k.help, k.default)
        };
        cmd = cmd.arg(
            Arg::new(k.name)
                .long(flag_name(k.name))
                .value_name("VALUE")
                .help(help)
                .help_heading(k.section),
        );
    }
    cmd
}

fn require_threshold_flag() -> Arg {
    Arg::new("require-threshold")
        .long("require-threshold")
        .action(ArgAction::SetTrue)
        .help("exit with status 3 unless every run reaches the accuracy threshold")
}

pub fn command() -> Command {
    Command::new("slrprune")
        .about("Weight pruning with surrogate Lagrangian relaxation and an ADMM baseline")
        .after_help("Exit status: 0 ok, 1 configuration error, 2 divergence, 3 threshold not reached (--require-threshold).")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(with_keys(Command::new("train").about("pretrain a model and save pretrained.ckpt")))
        .subcommand(
            with_keys(Command::new("prune").about("run the configured method, hardprune, save <method>.jsonl and <method>-pruned.ckpt"))
                .arg(require_threshold_flag()),
        )
        .subcommand(with_keys(
            Command::new("retrain").about("masked retraining of a pruned checkpoint, saves retrained.ckpt"),
        ))
        .subcommand(with_keys(
            Command::new("evaluate").about("test accuracy and compression rate of a checkpoint"),
        ))
        .subcommand(
            with_keys(Command::new("compare").about("paired SLR and ADMM runs with a summary table"))
                .arg(require_threshold_flag()),
        )
        .subcommand(
            with_keys(Command::new("ablate").about("repeat `prune` over values of one key"))
                .arg(Arg::new("param").long("param").required(true).value_name("KEY").help("key to vary, e.g. s0"))
                .arg(
                    Arg::new("values")
                        .long("values")
                        .required(true)
                        .value_delimiter(',')
                        .value_name("V1,V2,..")
                        .help("comma-separated values"),
                )
                .arg(require_threshold_flag()),
        )
        .subcommand(
            with_keys(Command::new("report").about("summarize a metrics log and/or export weight heatmaps"))
                .arg(Arg::new("metrics").long("metrics").value_name("FILE").help("metrics log to summarize"))
                .arg(
                    Arg::new("heatmaps")
                        .long("heatmaps")
                        .value_name("DIR")
                        .help("write |w| grids of the checkpoint's prunable layers into DIR"),
                ),
        )
}

fn resolve(m: &ArgMatches) -> Result<RunConfig, CliError> {
    let mut raw = RawConfig::default();
    if let Some(path) = m.get_one::<String>("config") {
        raw.merge_file(&PathBuf::from(path))?;
    }
    for k in KEYS {
        if let Some(v) = m.get_one::<String>(k.name) {
            raw.set(k.name, v.as_str())?;
        }
    }
    RunConfig::from_raw(raw)
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return Ok(());
        }
        Err(e) if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            let _ = e.print();
            return Err(CliError::Config("no subcommand given".into()));
        }
        Err(e) => {
            let msg = e.to_string();
            let msg = msg.trim_start_matches("error: ").trim_end();
            return Err(CliError::Config(msg.to_string()));
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    if name == "report" {
        return report(sub);
    }
    let cfg = resolve(sub)?;
    let require = sub
        .try_get_one::<bool>("require-threshold")
        .ok()
        .flatten()
        .copied()
        .unwrap_or(false);
    match name {
        "train" => {
            let pre = experiment::train(&cfg)?;
            println!("model\tepochs\taccuracy");
            println!(
                "{}\t{}\t{:.4}",
                cfg.model, cfg.pretrain_epochs, pre.accuracy
            );
        }
        "prune" => {
            let run = experiment::prune(&cfg)?;
            print!(
                "{}",
                std::fs::read_to_string(cfg.out_dir.join(format!("{}-summary.tsv", cfg.method)))
                    .map_err(|e| CliError::io("reading summary", e))?
            );
            if require {
                experiment::require_threshold([&run])?;
            }
        }
        "retrain" => {
            let r = experiment::retrain(&cfg)?;
            println!("accuracy_before\taccuracy_after\tepochs");
            println!("{:.4}\t{:.4}\t{}", r.before, r.after, cfg.retrain_epochs);
        }
        "evaluate" => {
            let e = experiment::evaluate(&cfg)?;
            println!("accuracy\tcompression_rate\tnonzeros\tprunable");
            println!(
                "{:.4}\t{:.2}\t{}\t{}",
                e.accuracy, e.compression_rate, e.nonzeros, e.prunable
            );
        }
        "compare" => {
            let c = experiment::compare(&cfg)?;
            print!("{}", c.summary);
            if require {
                experiment::require_threshold([&c.slr, &c.admm])?;
            }
        }
        "ablate" => {
            let param = sub.get_one::<String>("param").expect("required");
            let values: Vec<String> = sub
                .get_many::<String>("values")
                .expect("required")
                .cloned()
                .collect();
            let runs = experiment::ablate(&cfg, param, &values)?;
            let key = crate::config::find_key(param).expect("validated by ablate");
            print!(
                "{}",
                std::fs::read_to_string(cfg.out_dir.join(format!("ablate-{}.tsv", key.name)))
                    .map_err(|e| CliError::io("reading ablation table", e))?
            );
            if require {
                experiment::require_threshold(runs.iter().map(|(_, r)| r))?;
            }
        }
        _ => unreachable!("unknown subcommand {name}"),
    }
    Ok(())
}

// The metrics digest needs no data or model, so the config is only resolved for heatmaps.
fn report(sub: &ArgMatches) -> Result<(), CliError> {
    let metrics = sub.get_one::<String>("metrics");
    let heatmaps = sub.get_one::<String>("heatmaps");
    if metrics.is_none() && heatmaps.is_none() {
        return Err(CliError::Config(
            "report needs --metrics and/or --heatmaps".into(),
        ));
    }
    if let Some(path) = metrics {
        print!("{}", experiment::report(&PathBuf::from(path))?);
    }
    if let Some(dir) = heatmaps {
        let cfg = resolve(sub)?;
        for p in experiment::export_heatmaps(&cfg, &PathBuf::from(dir))? {
            println!("heatmap\t{}", p.display());
        }
    }
    Ok(())
}
