//! The subcommands as library calls: each takes a validated [`RunConfig`],
//! writes its artifacts under `out_dir` and returns what it measured.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use slr_core::checkpoint;
use slr_core::data::{load_idx, make_synthetic_with, Dataset, Split};
use slr_core::diagnostics::{
    export_sparsity_heatmap, kappa, soc_recurrence_holds, Event, IterationRecord, Method, RunReport,
};
use slr_core::models::Architecture;
use slr_core::prune::{
    accuracy_at_budget, masked_retrain, prune_outcome, train_epochs, BudgetRun, PairedSetup,
};
use slr_core::sparsity::{compression_from_masks, mask_from, PruneMask, SparsityPlan};
use slr_core::LayerSet;

use crate::config::{DataSource, RawConfig, RunConfig, Sparsity};
use crate::error::CliError;

pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset), CliError> {
    let (train, test) = match &cfg.data {
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            train_subset,
        } => {
            let train = load_idx(train_images, train_labels, Split::Train)?;
            let train = if *train_subset == 0 || *train_subset >= train.len() {
                train
            } else {
                train.head(*train_subset)?
            };
            (train, load_idx(test_images, test_labels, Split::Test)?)
        }
        DataSource::Synthetic { train, test } => {
            (make_synthetic_with(train)?, make_synthetic_with(test)?)
        }
    };
    let width: usize = train.sample_dims().iter().product();
    if width != cfg.model.input_len() {
        return Err(CliError::Config(format!(
            "[model] model = `{}`: expects {} input features, data has {width}",
            cfg.model,
            cfg.model.input_len()
        )));
    }
    if train.num_classes().max(test.num_classes()) > cfg.model.num_classes() {
        return Err(CliError::Config(format!(
            "[model] model = `{}`: {} outputs, data has {} classes",
            cfg.model,
            cfg.model.num_classes(),
            train.num_classes().max(test.num_classes())
        )));
    }
    Ok((train, test))
}

pub fn build_plan(cfg: &RunConfig, params: &LayerSet) -> Result<SparsityPlan, CliError> {
    let prunable = cfg.model.prunable();
    let plan = match &cfg.sparsity {
        Sparsity::KeepFraction(keep) => {
            SparsityPlan::from_keep_fraction(params, prunable.iter().map(String::as_str), *keep)?
        }
        Sparsity::Budgets(budgets) => {
            let mut plan = SparsityPlan::new();
            for (name, l) in budgets {
                plan.set(name.clone(), *l);
            }
            plan
        }
    };
    plan.validate(params, &prunable)
        .map_err(|e| CliError::Config(format!("[sparsity] budgets: {e}")))?;
    Ok(plan)
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

fn save_checkpoint(path: &Path, params: &LayerSet) -> Result<(), CliError> {
    write(path, &checkpoint::encode(params))
}

fn save_config(cfg: &RunConfig) -> Result<(), CliError> {
    write(
        &cfg.out_dir.join("config.ini"),
        cfg.raw.to_text().as_bytes(),
    )
}

fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<LayerSet, CliError> {
    let params = checkpoint::load(path)?;
    for (name, dims) in cfg.model.shapes() {
        match params.get(&name) {
            Some(t) if t.dims() == dims.as_slice() => {}
            _ => {
                return Err(CliError::Config(format!(
                    "[model] checkpoint {}: layer `{name}` missing or not shaped {dims:?} for `{}`",
                    path.display(),
                    cfg.model
                )))
            }
        }
    }
    Ok(params)
}

fn required_checkpoint(cfg: &RunConfig, command: &str) -> Result<LayerSet, CliError> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Config(format!("[model] checkpoint: required by `{command}`")))?;
    load_checkpoint(cfg, path)
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.digits$}"))
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub params: LayerSet,
    pub accuracy: f64,
}

/// Weights from the configured checkpoint, or `pretrain_epochs` of plain
/// training from a seeded initialization (saved as `pretrained.ckpt`).
pub fn pretrained(
    cfg: &RunConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<Pretrained, CliError> {
    let params = match &cfg.checkpoint {
        Some(path) => load_checkpoint(cfg, path)?,
        None => {
            log::info!(
                "pretraining {} for {} epochs",
                cfg.model,
                cfg.pretrain_epochs
            );
            let init = cfg.model.init(cfg.seed);
            let params = train_epochs(
                &cfg.model,
                &init,
                train,
                cfg.pretrain_epochs,
                cfg.optimizer,
                cfg.seed,
                "pretrain",
                None,
            )?;
            save_checkpoint(&cfg.out_dir.join("pretrained.ckpt"), &params)?;
            params
        }
    };
    let accuracy = cfg.model.evaluate_accuracy(&params, test)?;
    Ok(Pretrained { params, accuracy })
}

/// `train`: pretrain only.
pub fn train(cfg: &RunConfig) -> Result<Pretrained, CliError> {
    let (train, test) = load_data(cfg)?;
    let cfg = RunConfig {
        checkpoint: None,
        ..cfg.clone()
    };
    save_config(&cfg)?;
    let pre = pretrained(&cfg, &train, &test)?;
    let table = format!(
        "model\tepochs\taccuracy\n{}\t{}\t{:.4}\n",
        cfg.model, cfg.pretrain_epochs, pre.accuracy
    );
    write(&cfg.out_dir.join("train.tsv"), table.as_bytes())?;
    Ok(pre)
}

fn threshold(cfg: &RunConfig, baseline: f64) -> f64 {
    cfg.threshold.unwrap_or(baseline - cfg.threshold_drop)
}

fn paired_setup(
    cfg: &RunConfig,
    pre: &Pretrained,
    train: Dataset,
    test: Dataset,
) -> Result<PairedSetup, CliError> {
    let plan = build_plan(cfg, &pre.params)?;
    Ok(PairedSetup {
        arch: cfg.model.clone(),
        pretrained: pre.params.clone(),
        train,
        test,
        plan,
        optimizer: cfg.optimizer,
        slr: cfg.slr.clone(),
        admm: cfg.admm.clone(),
        epochs: cfg.epochs,
        check_every: cfg.check_every,
        threshold: Some(threshold(cfg, pre.accuracy)),
        stop_at_threshold: cfg.stop_at_threshold,
        eval_size: cfg.eval_size,
        seed: cfg.seed,
    })
}

/// One pruning run; `Baseline` is one-shot magnitude pruning of the pretrained weights.
#[derive(Clone, Debug)]
pub struct PruneRun {
    pub method: Method,
    pub baseline_accuracy: f64,
    pub threshold: f64,
    pub report: RunReport,
    pub pruned: LayerSet,
    pub hardprune_accuracy: f64,
    pub compression_rate: f64,
    pub epochs_to_threshold: Option<f64>,
}

impl PruneRun {
    fn from_budget(run: BudgetRun, baseline_accuracy: f64, threshold: f64) -> Self {
        Self {
            method: run.method,
            baseline_accuracy,
            threshold,
            hardprune_accuracy: run.outcome.hardprune_accuracy,
            compression_rate: run.outcome.compression_rate,
            report: run.report,
            pruned: run.pruned,
            epochs_to_threshold: run.epochs_to_threshold,
        }
    }

    pub fn records(&self) -> Vec<IterationRecord> {
        self.report.records().cloned().collect()
    }
}

fn run_method(
    cfg: &RunConfig,
    setup: &PairedSetup,
    baseline: f64,
    method: Method,
) -> Result<PruneRun, CliError> {
    let threshold = setup.threshold.unwrap_or(f64::INFINITY);
    let run = match method {
        Method::Slr | Method::Admm => {
            log::info!("{method}: {} epochs, seed {}", setup.epochs, setup.seed);
            PruneRun::from_budget(accuracy_at_budget(setup, method)?, baseline, threshold)
        }
        Method::Baseline => {
            let (pruned, outcome) = prune_outcome(
                &setup.arch,
                &setup.pretrained,
                &setup.plan,
                &setup.test,
                0.0,
            )?;
            let mut report = RunReport::default();
            report.push_event(Event::RunStart {
                method,
                seed: setup.seed,
                first_batch_checksum: None,
            });
            report.push_event(outcome.event());
            PruneRun {
                method,
                baseline_accuracy: baseline,
                threshold,
                hardprune_accuracy: outcome.hardprune_accuracy,
                compression_rate: outcome.compression_rate,
                epochs_to_threshold: (outcome.hardprune_accuracy >= threshold).then_some(0.0),
                report,
                pruned,
            }
        }
    };
    write(
        &cfg.out_dir.join(format!("{method}.jsonl")),
        run.report.to_jsonl()?.as_bytes(),
    )?;
    save_checkpoint(
        &cfg.out_dir.join(format!("{method}-pruned.ckpt")),
        &run.pruned,
    )?;
    Ok(run)
}

/// `prune`: one method from the pretrained weights, then hardprune.
pub fn prune(cfg: &RunConfig) -> Result<PruneRun, CliError> {
    let (train, test) = load_data(cfg)?;
    save_config(cfg)?;
    let pre = pretrained(cfg, &train, &test)?;
    let setup = paired_setup(cfg, &pre, train, test)?;
    let run = run_method(cfg, &setup, pre.accuracy, cfg.method)?;
    let table = summary_header() + &summary_row(cfg, &run);
    write(
        &cfg.out_dir.join(format!("{}-summary.tsv", cfg.method)),
        table.as_bytes(),
    )?;
    Ok(run)
}

fn summary_header() -> String {
    "model\tmethod\tbaseline_acc\tepochs\thardprune_acc\tcompression_rate\tepochs_to_threshold\n"
        .into()
}

fn summary_row(cfg: &RunConfig, run: &PruneRun) -> String {
    format!(
        "{}\t{}\t{:.4}\t{}\t{:.4}\t{:.2}\t{}\n",
        cfg.model,
        run.method,
        run.baseline_accuracy,
        cfg.epochs,
        run.hardprune_accuracy,
        run.compression_rate,
        fmt_opt(run.epochs_to_threshold, 2)
    )
}

#[derive(Clone, Debug)]
pub struct Comparison {
    pub baseline_accuracy: f64,
    pub threshold: f64,
    pub slr: PruneRun,
    pub admm: PruneRun,
    pub summary: String,
}

/// `compare`: SLR and ADMM from the same weights, plan, seed and batches.
pub fn compare(cfg: &RunConfig) -> Result<Comparison, CliError> {
    let (train, test) = load_data(cfg)?;
    save_config(cfg)?;
    let pre = pretrained(cfg, &train, &test)?;
    let setup = paired_setup(cfg, &pre, train, test)?;
    let slr = run_method(cfg, &setup, pre.accuracy, Method::Slr)?;
    let admm = run_method(cfg, &setup, pre.accuracy, Method::Admm)?;
    let threshold = threshold(cfg, pre.accuracy);
    let summary = format!(
        "model\tbaseline_acc\tepochs\tadmm_acc\tslr_acc\tcompression_rate\tthreshold\tadmm_epochs_to_threshold\tslr_epochs_to_threshold\n\
         {}\t{:.4}\t{}\t{:.4}\t{:.4}\t{:.2}\t{:.4}\t{}\t{}\n",
        cfg.model,
        pre.accuracy,
        cfg.epochs,
        admm.hardprune_accuracy,
        slr.hardprune_accuracy,
        slr.compression_rate,
        threshold,
        fmt_opt(admm.epochs_to_threshold, 2),
        fmt_opt(slr.epochs_to_threshold, 2),
    );
    write(&cfg.out_dir.join("summary.tsv"), summary.as_bytes())?;
    Ok(Comparison {
        baseline_accuracy: pre.accuracy,
        threshold,
        slr,
        admm,
        summary,
    })
}

/// `ablate`: the configured method once per value of one key.
pub fn ablate(
    cfg: &RunConfig,
    param: &str,
    values: &[String],
) -> Result<Vec<(String, PruneRun)>, CliError> {
    let key = crate::config::find_key(param)
        .ok_or_else(|| CliError::Config(format!("--param: unknown key `{param}`")))?;
    let shared_pretraining = matches!(key.section, "penalty" | "slr" | "sparsity")
        || (key.section == "budget" && key.name != "pretrain_epochs")
        || key.name == "method";
    if !shared_pretraining {
        return Err(CliError::Config(format!(
            "--param {param}: ablation varies [penalty], [slr], [sparsity], [budget] keys or method"
        )));
    }
    if values.is_empty() {
        return Err(CliError::Config(
            "--values: at least one value is required".into(),
        ));
    }
    let (train, test) = load_data(cfg)?;
    save_config(cfg)?;
    let pre = pretrained(cfg, &train, &test)?;
    let mut table = format!(
        "{}\tmethod\thardprune_acc\tepochs_to_threshold\tfinal_violation\tsoc_failures\n",
        key.name
    );
    let mut runs = Vec::with_capacity(values.len());
    for value in values {
        let mut raw: RawConfig = cfg.raw.clone();
        raw.set(key.name, value.as_str())?;
        let mut sub = RunConfig::from_raw(raw)?;
        sub.out_dir = cfg.out_dir.join(format!("{}-{value}", key.name));
        let setup = paired_setup(&sub, &pre, train.clone(), test.clone())?;
        let run = run_method(&sub, &setup, pre.accuracy, sub.method)?;
        let records = run.records();
        let failures =
            records.iter().filter(|r| !r.soc1).count() + records.iter().filter(|r| !r.soc2).count();
        let _ = writeln!(
            table,
            "{value}\t{}\t{:.4}\t{}\t{}\t{failures}",
            run.method,
            run.hardprune_accuracy,
            fmt_opt(run.epochs_to_threshold, 2),
            fmt_opt(records.last().map(|r| r.violation), 6),
        );
        runs.push((value.clone(), run));
    }
    write(
        &cfg.out_dir.join(format!("ablate-{}.tsv", key.name)),
        table.as_bytes(),
    )?;
    Ok(runs)
}

#[derive(Clone, Debug)]
pub struct Retrained {
    pub before: f64,
    pub after: f64,
    pub params: LayerSet,
}

/// `retrain`: masked retraining of a pruned checkpoint; the mask is its
/// nonzero support on the prunable layers.
pub fn retrain(cfg: &RunConfig) -> Result<Retrained, CliError> {
    let params = required_checkpoint(cfg, "retrain")?;
    let (train, test) = load_data(cfg)?;
    save_config(cfg)?;
    let mask = support_mask(&cfg.model, &params)?;
    let before = cfg.model.evaluate_accuracy(&params, &test)?;
    let out = masked_retrain(
        &cfg.model,
        &params,
        &mask,
        &train,
        cfg.retrain_epochs,
        cfg.optimizer,
        cfg.seed,
    )?;
    let after = cfg.model.evaluate_accuracy(&out, &test)?;
    save_checkpoint(&cfg.out_dir.join("retrained.ckpt"), &out)?;
    let mut report = RunReport::default();
    report.push_event(Event::PruneOutcome {
        hardprune_accuracy: after,
        compression_rate: compression_from_masks(&mask)?.overall,
        epochs_used: cfg.retrain_epochs as f64,
        popcount: mask.popcount(),
    });
    write(
        &cfg.out_dir.join("retrain.jsonl"),
        report.to_jsonl()?.as_bytes(),
    )?;
    Ok(Retrained {
        before,
        after,
        params: out,
    })
}

fn support_mask(arch: &Architecture, params: &LayerSet) -> Result<PruneMask, CliError> {
    let mut mask = PruneMask::default();
    for name in arch.prunable() {
        mask.layers
            .insert(name.clone(), mask_from(params.require(&name)?));
    }
    Ok(mask)
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub accuracy: f64,
    pub compression_rate: f64,
    pub nonzeros: usize,
    pub prunable: usize,
}

/// `evaluate`: test accuracy and the compression of the checkpoint's support.
pub fn evaluate(cfg: &RunConfig) -> Result<Evaluation, CliError> {
    let params = required_checkpoint(cfg, "evaluate")?;
    let (_, test) = load_data(cfg)?;
    let mask = support_mask(&cfg.model, &params)?;
    let compression_rate = if mask.popcount() == 0 {
        f64::INFINITY
    } else {
        compression_from_masks(&mask)?.overall
    };
    Ok(Evaluation {
        accuracy: cfg.model.evaluate_accuracy(&params, &test)?,
        compression_rate,
        nonzeros: mask.popcount(),
        prunable: mask.total(),
    })
}

/// `report`: a text digest of a metrics log.
pub fn report(metrics: &Path) -> Result<String, CliError> {
    let report = RunReport::read(metrics)?;
    let records: Vec<IterationRecord> = report.records().cloned().collect();
    let mut out = String::new();
    let _ = writeln!(out, "metrics\t{}", metrics.display());
    for e in report.events() {
        match e {
            Event::RunStart {
                method,
                seed,
                first_batch_checksum,
            } => {
                let _ = writeln!(out, "method\t{method}");
                let _ = writeln!(out, "seed\t{seed}");
                let _ = writeln!(
                    out,
                    "first_batch\t{}",
                    first_batch_checksum.as_deref().unwrap_or("-")
                );
            }
            Event::ThresholdReached { k, epoch, accuracy } => {
                let _ = writeln!(
                    out,
                    "threshold_reached\tk={k}\tepoch={epoch:.2}\taccuracy={accuracy:.4}"
                );
            }
            Event::PruneOutcome {
                hardprune_accuracy,
                compression_rate,
                epochs_used,
                popcount,
            } => {
                let _ = writeln!(out, "hardprune_acc\t{hardprune_accuracy:.4}");
                let _ = writeln!(out, "compression_rate\t{compression_rate:.2}");
                let _ = writeln!(out, "epochs_used\t{epochs_used:.2}");
                let _ = writeln!(out, "nonzeros\t{popcount}");
            }
            Event::SocOverride { .. } => {}
        }
    }
    let overrides = report
        .events()
        .filter(|e| matches!(e, Event::SocOverride { .. }))
        .count();
    let _ = writeln!(out, "iterations\t{}", records.len());
    if let Some(last) = records.last() {
        let _ = writeln!(out, "final_train_loss\t{:.6}", last.train_loss);
        let _ = writeln!(out, "final_l_rho\t{:.6}", last.l_rho);
        let _ = writeln!(out, "final_violation\t{:.6e}", last.violation);
        let _ = writeln!(out, "final_stepsize\t{:.6e}", last.s);
    }
    let _ = writeln!(
        out,
        "soc1_failures\t{}",
        records.iter().filter(|r| !r.soc1).count()
    );
    let _ = writeln!(
        out,
        "soc2_failures\t{}",
        records.iter().filter(|r| !r.soc2).count()
    );
    let _ = writeln!(out, "soc_overrides\t{overrides}");
    let _ = writeln!(out, "kappa\t{}", kappa(&records));
    let _ = writeln!(out, "soc_recurrence\t{}", soc_recurrence_holds(&records));
    Ok(out)
}

/// Heatmaps of every rank >= 2 prunable layer of the configured checkpoint.
pub fn export_heatmaps(cfg: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let params = required_checkpoint(cfg, "report --heatmaps")?;
    let mut paths = Vec::new();
    for name in cfg.model.prunable() {
        let path = dir.join(format!("{name}.txt"));
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)
                .map_err(|e| CliError::io(format!("creating {}", parent.display()), e))?;
        }
        export_sparsity_heatmap(params.require(&name)?, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// `--require-threshold`: every run must have reached the threshold.
pub fn require_threshold<'a>(runs: impl IntoIterator<Item = &'a PruneRun>) -> Result<(), CliError> {
    let mut missed = Vec::new();
    let mut threshold = f64::NAN;
    for run in runs {
        threshold = run.threshold;
        if run.epochs_to_threshold.is_none() {
            missed.push(run.method.to_string());
        }
    }
    if missed.is_empty() {
        Ok(())
    } else {
        Err(CliError::ThresholdNotReached {
            threshold,
            methods: missed.join(", "),
        })
    }
}
