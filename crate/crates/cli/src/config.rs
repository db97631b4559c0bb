//! Run configuration: a flat `key = value` file with `[section]` headers,
//! overridable key by key from the command line.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;

use slr_core::admm::AdmmConfig;
use slr_core::data::SyntheticSpec;
use slr_core::diagnostics::{DualBoundConfig, Method};
use slr_core::models::Architecture;
use slr_core::optim::{OptimizerConfig, OptimizerKind};
use slr_core::slr::SlrConfig;

use crate::error::CliError;

pub struct Key {
    pub section: &'static str,
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(
    section: &'static str,
    name: &'static str,
    default: &'static str,
    help: &'static str,
) -> Key {
    Key {
        section,
        name,
        default,
        help,
    }
}

/// Every configurable key, in file order.
pub const KEYS: &[Key] = &[
    key(
        "run",
        "seed",
        "0",
        "master seed; all randomness derives from named streams of it",
    ),
    key(
        "run",
        "method",
        "slr",
        "slr, admm or baseline (one-shot magnitude pruning)",
    ),
    key(
        "run",
        "out_dir",
        "runs",
        "directory for checkpoints, metrics logs and summaries",
    ),
    key(
        "run",
        "record_wall_time",
        "false",
        "store wall-clock seconds in metrics (breaks byte-identical logs)",
    ),
    key(
        "data",
        "dataset",
        "mnist",
        "mnist (IDX files) or synthetic (Gaussian blobs)",
    ),
    key(
        "data",
        "data_dir",
        "data/mnist",
        "directory holding the four standard MNIST IDX files",
    ),
    key(
        "data",
        "train_images",
        "",
        "override path of the training images IDX file",
    ),
    key(
        "data",
        "train_labels",
        "",
        "override path of the training labels IDX file",
    ),
    key(
        "data",
        "test_images",
        "",
        "override path of the test images IDX file",
    ),
    key(
        "data",
        "test_labels",
        "",
        "override path of the test labels IDX file",
    ),
    key(
        "data",
        "train_subset",
        "10000",
        "use the first N training samples (0 = all)",
    ),
    key(
        "data",
        "synthetic_points",
        "2000",
        "synthetic training points",
    ),
    key(
        "data",
        "synthetic_test_points",
        "1000",
        "synthetic test points",
    ),
    key("data", "synthetic_classes", "10", "synthetic classes"),
    key(
        "data",
        "synthetic_dim",
        "784",
        "synthetic feature dimension",
    ),
    key(
        "data",
        "synthetic_separation",
        "6",
        "distance between synthetic class centers, in standard deviations",
    ),
    key(
        "model",
        "model",
        "mlp-784-300-100-10",
        "mlp-<in>-...-<out> or lenet5-like",
    ),
    key(
        "model",
        "checkpoint",
        "",
        "input checkpoint; prune and compare pretrain from scratch when empty",
    ),
    key(
        "sparsity",
        "keep_fraction",
        "0.1",
        "fraction of each prunable layer kept, budget = ceil(keep * size)",
    ),
    key(
        "sparsity",
        "budgets",
        "",
        "per-layer budgets overriding keep_fraction, e.g. fc1.weight:1000,fc2.weight:500",
    ),
    key("optim", "optimizer", "adam", "sgd, momentum or adam"),
    key("optim", "lr", "0.001", "learning rate"),
    key(
        "optim",
        "beta1",
        "0.9",
        "momentum / Adam first-moment decay",
    ),
    key("optim", "beta2", "0.999", "Adam second-moment decay"),
    key("optim", "eps", "1e-8", "Adam epsilon"),
    key("optim", "batch_size", "128", "minibatch size"),
    key(
        "penalty",
        "rho",
        "0.1",
        "penalty coefficient shared by SLR and ADMM",
    ),
    key(
        "penalty",
        "inner_steps",
        "epoch",
        "optimizer steps per loss subproblem (a number or `epoch`)",
    ),
    key(
        "penalty",
        "eval_size",
        "512",
        "size of the fixed batch used for the surrogate conditions",
    ),
    key(
        "penalty",
        "gamma",
        "1",
        "weight of the violation term in the dual overestimates, in [0, 1]",
    ),
    key("slr", "m", "300", "stepsize schedule parameter M (> 1)"),
    key(
        "slr",
        "r",
        "0.1",
        "stepsize schedule parameter r, in (0, 1)",
    ),
    key("slr", "s0", "0.01", "initial multiplier stepsize"),
    key(
        "slr",
        "soc_override_after",
        "3",
        "force the update after this many consecutive failures (`none` disables)",
    ),
    key("budget", "epochs", "20", "training epochs for SLR / ADMM"),
    key(
        "budget",
        "pretrain_epochs",
        "5",
        "epochs of plain training before pruning",
    ),
    key(
        "budget",
        "retrain_epochs",
        "3",
        "epochs of masked retraining",
    ),
    key(
        "budget",
        "check_every",
        "1",
        "iterations between hardprune accuracy checks",
    ),
    key(
        "budget",
        "threshold",
        "",
        "absolute hardprune accuracy threshold; empty = baseline - threshold_drop",
    ),
    key(
        "budget",
        "threshold_drop",
        "0.02",
        "threshold below the pretrained accuracy",
    ),
    key(
        "budget",
        "stop_at_threshold",
        "false",
        "stop training once the threshold is reached",
    ),
];

pub fn find_key(name: &str) -> Option<&'static Key> {
    let name = name.replace('-', "_");
    KEYS.iter().find(|k| k.name == name)
}

/// Raw `key -> value` pairs, defaults first, then file, then flags.
#[derive(Clone, Debug, PartialEq)]
pub struct RawConfig {
    values: IndexMap<&'static str, String>,
}

impl Default for RawConfig {
    fn default() -> Self {
        Self {
            values: KEYS
                .iter()
                .map(|k| (k.name, k.default.to_string()))
                .collect(),
        }
    }
}

impl RawConfig {
    pub fn set(&mut self, name: &str, value: impl Into<String>) -> Result<(), CliError> {
        let key =
            find_key(name).ok_or_else(|| CliError::Config(format!("unknown key `{name}`")))?;
        self.values.insert(key.name, value.into());
        Ok(())
    }

    pub fn get(&self, name: &str) -> &str {
        self.values.get(name).map(String::as_str).unwrap_or("")
    }

    /// Parses `key = value` lines; `#` starts a comment, `[section]` headers must
    /// match the key's section.
    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        let mut section: Option<String> = None;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = || format!("{origin}:{}", no + 1);
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !KEYS.iter().any(|k| k.section == name) {
                    return Err(CliError::Config(format!(
                        "{}: unknown section [{name}]",
                        at()
                    )));
                }
                section = Some(name.to_string());
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::Config(format!(
                    "{}: expected `key = value`, got `{line}`",
                    at()
                )));
            };
            let k = k.trim();
            let key = find_key(k)
                .ok_or_else(|| CliError::Config(format!("{}: unknown key `{k}`", at())))?;
            if let Some(s) = &section {
                if s != key.section {
                    return Err(CliError::Config(format!(
                        "{}: key `{}` belongs in [{}], found in [{s}]",
                        at(),
                        key.name,
                        key.section
                    )));
                }
            }
            self.values.insert(key.name, v.trim().to_string());
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.merge_text(&text, &path.display().to_string())
    }

    /// Full config in file syntax; loads back to an equal `RawConfig`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for k in KEYS {
            if k.section != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = k.section;
                let _ = writeln!(out, "[{section}]");
            }
            let _ = writeln!(out, "{} = {}", k.name, self.get(k.name));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        train_subset: usize,
    },
    Synthetic {
        train: SyntheticSpec,
        test: SyntheticSpec,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Sparsity {
    KeepFraction(f64),
    Budgets(IndexMap<String, usize>),
}

/// Validated configuration.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub method: Method,
    pub out_dir: PathBuf,
    pub record_wall_time: bool,
    pub data: DataSource,
    pub model: Architecture,
    pub checkpoint: Option<PathBuf>,
    pub sparsity: Sparsity,
    pub optimizer: OptimizerConfig,
    pub slr: SlrConfig,
    pub admm: AdmmConfig,
    pub eval_size: usize,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub retrain_epochs: usize,
    pub check_every: usize,
    pub threshold: Option<f64>,
    pub threshold_drop: f64,
    pub stop_at_threshold: bool,
    pub raw: RawConfig,
}

fn parse<T: FromStr>(raw: &RawConfig, name: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    let key = find_key(name).expect("known key");
    raw.get(name).parse().map_err(|e| {
        CliError::Config(format!(
            "[{}] {name} = `{}`: {e}",
            key.section,
            raw.get(name)
        ))
    })
}

fn check(cond: bool, name: &str, raw: &RawConfig, what: &str) -> Result<(), CliError> {
    if cond {
        Ok(())
    } else {
        let key = find_key(name).expect("known key");
        Err(CliError::Config(format!(
            "[{}] {name} = `{}`: {what}",
            key.section,
            raw.get(name)
        )))
    }
}

fn optional_path(raw: &RawConfig, name: &str) -> Option<PathBuf> {
    let v = raw.get(name);
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn parse_budgets(raw: &RawConfig) -> Result<IndexMap<String, usize>, CliError> {
    let mut out = IndexMap::new();
    for item in raw
        .get("budgets")
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
    {
        let parsed = item
            .rsplit_once(':')
            .and_then(|(n, l)| Some((n.trim().to_string(), l.trim().parse::<usize>().ok()?)));
        let Some((name, l)) = parsed else {
            return Err(CliError::Config(format!(
                "[sparsity] budgets: expected `layer:count`, got `{item}`"
            )));
        };
        out.insert(name, l);
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_raw(raw: RawConfig) -> Result<Self, CliError> {
        let seed: u64 = parse(&raw, "seed")?;
        let method: Method = parse(&raw, "method")?;
        let model: Architecture = parse(&raw, "model")?;

        let data = match raw.get("dataset") {
            "mnist" | "idx" => {
                let dir = PathBuf::from(raw.get("data_dir"));
                let pick = |name: &str, file: &str| {
                    optional_path(&raw, name).unwrap_or_else(|| dir.join(file))
                };
                DataSource::Idx {
                    train_images: pick("train_images", "train-images-idx3-ubyte"),
                    train_labels: pick("train_labels", "train-labels-idx1-ubyte"),
                    test_images: pick("test_images", "t10k-images-idx3-ubyte"),
                    test_labels: pick("test_labels", "t10k-labels-idx1-ubyte"),
                    train_subset: parse(&raw, "train_subset")?,
                }
            }
            "synthetic" => {
                let classes: usize = parse(&raw, "synthetic_classes")?;
                let dim: usize = parse(&raw, "synthetic_dim")?;
                let separation: f32 = parse(&raw, "synthetic_separation")?;
                let points: usize = parse(&raw, "synthetic_points")?;
                let test_points: usize = parse(&raw, "synthetic_test_points")?;
                check(points > 0, "synthetic_points", &raw, "must be >= 1")?;
                check(
                    test_points > 0,
                    "synthetic_test_points",
                    &raw,
                    "must be >= 1",
                )?;
                check(classes > 0, "synthetic_classes", &raw, "must be >= 1")?;
                check(dim > 0, "synthetic_dim", &raw, "must be >= 1")?;
                check(
                    separation.is_finite() && separation >= 0.0,
                    "synthetic_separation",
                    &raw,
                    "must be >= 0",
                )?;
                check(
                    dim == model.input_len(),
                    "synthetic_dim",
                    &raw,
                    "must equal the model input width",
                )?;
                check(
                    classes == model.num_classes(),
                    "synthetic_classes",
                    &raw,
                    "must equal the model output width",
                )?;
                let spec = |points, seed| SyntheticSpec {
                    points,
                    classes,
                    dim,
                    separation,
                    seed,
                };
                // Test blobs share the centers; only the sample draw differs.
                DataSource::Synthetic {
                    train: spec(points, seed),
                    test: spec(test_points, seed ^ 0x7465_7374),
                }
            }
            other => {
                return Err(CliError::Config(format!(
                    "[data] dataset = `{other}`: expected mnist or synthetic"
                )))
            }
        };

        let budgets = parse_budgets(&raw)?;
        let sparsity = if budgets.is_empty() {
            let keep: f64 = parse(&raw, "keep_fraction")?;
            check(
                (0.0..=1.0).contains(&keep),
                "keep_fraction",
                &raw,
                "must lie in [0, 1]",
            )?;
            Sparsity::KeepFraction(keep)
        } else {
            Sparsity::Budgets(budgets)
        };

        let kind: OptimizerKind = parse(&raw, "optimizer")?;
        let optimizer = OptimizerConfig {
            kind,
            lr: parse(&raw, "lr")?,
            beta1: parse(&raw, "beta1")?,
            beta2: parse(&raw, "beta2")?,
            eps: parse(&raw, "eps")?,
            batch_size: parse(&raw, "batch_size")?,
        };
        check(
            optimizer.lr.is_finite() && optimizer.lr >= 0.0,
            "lr",
            &raw,
            "must be a finite number >= 0",
        )?;
        check(
            (0.0..1.0).contains(&optimizer.beta1),
            "beta1",
            &raw,
            "must lie in [0, 1)",
        )?;
        check(
            (0.0..1.0).contains(&optimizer.beta2),
            "beta2",
            &raw,
            "must lie in [0, 1)",
        )?;
        check(optimizer.eps > 0.0, "eps", &raw, "must be > 0")?;
        check(optimizer.batch_size > 0, "batch_size", &raw, "must be >= 1")?;

        let rho: f64 = parse(&raw, "rho")?;
        check(rho.is_finite() && rho > 0.0, "rho", &raw, "must be > 0")?;
        let inner_steps = match raw.get("inner_steps") {
            "epoch" => None,
            _ => {
                let n: usize = parse(&raw, "inner_steps")?;
                check(n > 0, "inner_steps", &raw, "must be >= 1 or `epoch`")?;
                Some(n)
            }
        };
        let gamma: f64 = parse(&raw, "gamma")?;
        check(
            (0.0..=1.0).contains(&gamma),
            "gamma",
            &raw,
            "must lie in [0, 1]",
        )?;
        let dual = DualBoundConfig { gamma };
        let eval_size: usize = parse(&raw, "eval_size")?;
        check(eval_size > 0, "eval_size", &raw, "must be >= 1")?;

        let m: f64 = parse(&raw, "m")?;
        check(m.is_finite() && m > 1.0, "m", &raw, "must be > 1")?;
        let r: f64 = parse(&raw, "r")?;
        check(r > 0.0 && r < 1.0, "r", &raw, "must lie in (0, 1)")?;
        let s0: f64 = parse(&raw, "s0")?;
        check(s0.is_finite() && s0 > 0.0, "s0", &raw, "must be > 0")?;
        let soc_override_after = match raw.get("soc_override_after") {
            "none" => None,
            _ => {
                let n: usize = parse(&raw, "soc_override_after")?;
                check(n > 0, "soc_override_after", &raw, "must be >= 1 or `none`")?;
                Some(n)
            }
        };
        let record_wall_time: bool = parse(&raw, "record_wall_time")?;

        let slr = SlrConfig {
            rho,
            m,
            r,
            s0,
            inner_steps,
            soc_override_after,
            dual,
            optimizer,
            record_wall_time,
            ..SlrConfig::default()
        };
        let admm = AdmmConfig {
            rho,
            inner_steps,
            dual,
            optimizer,
            record_wall_time,
        };

        let check_every: usize = parse(&raw, "check_every")?;
        check(check_every > 0, "check_every", &raw, "must be >= 1")?;
        let threshold = match raw.get("threshold") {
            "" => None,
            _ => Some(parse::<f64>(&raw, "threshold")?),
        };
        let threshold_drop: f64 = parse(&raw, "threshold_drop")?;
        check(
            threshold_drop.is_finite(),
            "threshold_drop",
            &raw,
            "must be finite",
        )?;

        let cfg = Self {
            seed,
            method,
            out_dir: PathBuf::from(raw.get("out_dir")),
            record_wall_time,
            data,
            model,
            checkpoint: optional_path(&raw, "checkpoint"),
            sparsity,
            optimizer,
            slr,
            admm,
            eval_size,
            epochs: parse(&raw, "epochs")?,
            pretrain_epochs: parse(&raw, "pretrain_epochs")?,
            retrain_epochs: parse(&raw, "retrain_epochs")?,
            check_every,
            threshold,
            threshold_drop,
            stop_at_threshold: parse(&raw, "stop_at_threshold")?,
            raw,
        };
        cfg.check_files()?;
        Ok(cfg)
    }

    fn check_files(&self) -> Result<(), CliError> {
        let mut files: Vec<(&str, &Path)> = Vec::new();
        if let DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            ..
        } = &self.data
        {
            files.extend([
                ("train_images", train_images.as_path()),
                ("train_labels", train_labels.as_path()),
                ("test_images", test_images.as_path()),
                ("test_labels", test_labels.as_path()),
            ]);
        }
        if let Some(c) = &self.checkpoint {
            files.push(("checkpoint", c.as_path()));
        }
        for (name, path) in files {
            if !path.is_file() {
                let section = find_key(name).expect("known key").section;
                return Err(CliError::Config(format!(
                    "[{section}] {name}: file {} does not exist",
                    path.display()
                )));
            }
        }
        Ok(())
    }
}
