//! Acceptance criteria 1-10, one PASS/FAIL line each.
//!
//! `cargo test --test acceptance` runs all of them; trailing numbers
//! (`cargo test --test acceptance -- 3 6`) select a subset. The process exits
//! non-zero when any selected criterion fails.

use std::collections::BTreeMap;
use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slr_cli::experiment::{compare, prune, retrain};
use slr_cli::{RawConfig, RunConfig};
use slr_core::admm::{AdmmConfig, AdmmEngine};
use slr_core::autodiff::{Tape, Var};
use slr_core::data::make_synthetic;
use slr_core::diagnostics::{
    dual_ordering_kappa, soc_recurrence_holds, IterationRecord, RunReport,
};
use slr_core::engine::{NoProbe, StopCriteria};
use slr_core::models::Architecture;
use slr_core::objective::{NetworkObjective, Objective, QuadraticObjective};
use slr_core::optim::OptimizerConfig;
use slr_core::slr::{alpha_schedule, SlrConfig, SlrEngine};
use slr_core::sparsity::{project_cardinality, SparsityPlan};
use slr_core::{LayerSet, Tensor};

type Outcome = Result<Verdict, Box<dyn Error>>;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Outcome {
    Ok(Verdict {
        pass,
        detail: detail.into(),
    })
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR"))
        .join("acceptance")
        .join(name);
    let _ = fs::remove_dir_all(&dir);
    dir
}

const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// The MNIST directory, fetched with `scripts/fetch-mnist.sh` when absent.
fn mnist_dir() -> Result<PathBuf, Box<dyn Error>> {
    let dir = workspace().join("data/mnist");
    let present = |d: &Path| MNIST_FILES.iter().all(|f| d.join(f).is_file());
    if !present(&dir) {
        let status = Command::new("bash")
            .arg(workspace().join("scripts/fetch-mnist.sh"))
            .arg(&dir)
            .status()?;
        if !status.success() || !present(&dir) {
            return Err(
                format!("MNIST not available in {} and fetch failed", dir.display()).into(),
            );
        }
    }
    Ok(dir)
}

fn mnist_config(pairs: &[(&str, String)]) -> Result<RunConfig, Box<dyn Error>> {
    let mut raw = RawConfig::default();
    raw.set("dataset", "mnist")?;
    raw.set("data_dir", mnist_dir()?.to_string_lossy().into_owned())?;
    raw.set("model", "mlp-784-300-100-10")?;
    raw.set("train_subset", "10000")?;
    for (k, v) in pairs {
        raw.set(k, v.as_str())?;
    }
    Ok(RunConfig::from_raw(raw)?)
}

fn single(values: &[f32]) -> LayerSet {
    let mut s = LayerSet::new();
    s.insert("w", Tensor::vector(values));
    s
}

fn budget_plan(l: usize) -> SparsityPlan {
    let mut p = SparsityPlan::new();
    p.set("w", l);
    p
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

// 1. Projection vs exhaustive search over supports.

fn criterion_1(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut comparisons = 0usize;
    for case in 0..1000 {
        let n = rng.gen_range(1..=12usize);
        // every fourth tensor draws from a few integers so ties and zeros occur
        let x: Vec<f32> = if case % 4 == 0 {
            (0..n).map(|_| rng.gen_range(-3i32..=3) as f32).collect()
        } else {
            (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
        };
        let dims = if n % 2 == 0 && case % 3 == 0 {
            vec![2, n / 2]
        } else {
            vec![n]
        };
        let t = Tensor::new(dims.clone(), x.clone())?;

        let subsets = 1usize << n;
        let dropped = |s: usize| -> f64 {
            (0..n)
                .filter(|i| s >> i & 1 == 0)
                .map(|i| f64::from(x[i]) * f64::from(x[i]))
                .sum()
        };
        let values: Vec<f64> = (0..subsets).map(dropped).collect();
        // larger key = lexicographically smaller ascending index list
        let key = |s: usize| -> usize {
            (0..n)
                .filter(|i| s >> i & 1 == 1)
                .map(|i| 1 << (n - 1 - i))
                .sum()
        };
        for l in 0..=n {
            let best = (0..subsets)
                .filter(|&s| s.count_ones() as usize <= l)
                .map(|s| values[s])
                .fold(f64::INFINITY, f64::min);
            let pick = (0..subsets)
                .filter(|&s| s.count_ones() as usize == l && values[s] == best)
                .max_by_key(|&s| key(s))
                .ok_or("no minimizer of full size")?;
            let z = project_cardinality(&t, l);
            if z.dims() != dims.as_slice() {
                return verdict(false, format!("case {case}: dims {:?}", z.dims()));
            }
            for i in 0..n {
                let want = if pick >> i & 1 == 1 { x[i] } else { 0.0 };
                if z.data()[i] != want {
                    return verdict(
                        false,
                        format!("case {case} l={l}: x={x:?} got {:?}", z.data()),
                    );
                }
            }
            let got: f64 = (0..n)
                .filter(|&i| z.data()[i] == 0.0)
                .map(|i| f64::from(x[i]) * f64::from(x[i]))
                .sum();
            if got != best {
                return verdict(
                    false,
                    format!("case {case} l={l}: objective {got} vs {best}"),
                );
            }
            comparisons += 1;
        }
    }
    verdict(
        true,
        format!("1000 tensors, {comparisons} budgets, exact match"),
    )
}

// 2. Autodiff primitives vs central differences of an f64 forward.

#[derive(Clone)]
struct T64 {
    dims: Vec<usize>,
    data: Vec<f64>,
}

struct GradCase {
    inputs: Vec<Tensor>,
    targets: Vec<usize>,
}

type Apply = dyn Fn(&mut Tape, &[Var], &[usize]) -> slr_core::Result<Var>;
type Oracle = dyn Fn(&[T64], &[usize]) -> Vec<f64>;

const FD_STEP: f64 = 1e-3;
const GRAD_TOL: f64 = 1e-4;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1e-6)
}

/// Worst norm-wise relative gradient error over the cases.
fn grad_check(cases: Vec<GradCase>, apply: &Apply, oracle: &Oracle) -> Result<f64, Box<dyn Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for case in cases {
        let mut tape = Tape::new();
        let vars: Vec<Var> = case.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = apply(&mut tape, &vars, &case.targets)?;
        let out_value = tape.value(out).clone();
        let seed: Vec<f32> = (0..out_value.len())
            .map(|_| rng.gen_range(-1.0f32..1.0))
            .collect();
        let grads =
            tape.backward_with(out, &Tensor::new(out_value.dims().to_vec(), seed.clone())?)?;

        let base: Vec<T64> = case
            .inputs
            .iter()
            .map(|t| T64 {
                dims: t.dims().to_vec(),
                data: t.data().iter().map(|&v| f64::from(v)).collect(),
            })
            .collect();
        let forward = oracle(&base, &case.targets);
        let got: Vec<f64> = out_value.data().iter().map(|&v| f64::from(v)).collect();
        let fwd = rel_err(&got, &forward);
        if fwd > 1e-5 {
            return Err(format!("forward mismatch {fwd:.2e}").into());
        }
        let phi = |inputs: &[T64]| -> f64 {
            oracle(inputs, &case.targets)
                .iter()
                .zip(&seed)
                .map(|(o, &c)| o * f64::from(c))
                .sum()
        };
        for (i, var) in vars.iter().enumerate() {
            let n = base[i].data.len();
            let analytic: Vec<f64> = match grads.get(*var) {
                Some(g) => g.iter().map(|&v| f64::from(v)).collect(),
                None => vec![0.0; n],
            };
            let mut numeric = vec![0.0; n];
            let mut probe = base.clone();
            for (j, slot) in numeric.iter_mut().enumerate() {
                let x = base[i].data[j];
                probe[i].data[j] = x + FD_STEP;
                let up = phi(&probe);
                probe[i].data[j] = x - FD_STEP;
                let down = phi(&probe);
                probe[i].data[j] = x;
                *slot = (up - down) / (2.0 * FD_STEP);
            }
            worst = worst.max(rel_err(&analytic, &numeric));
        }
    }
    Ok(worst)
}

fn uniform(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(
        dims.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
    )
    .unwrap()
}

fn cases(count: usize, seed: u64, mut f: impl FnMut(&mut ChaCha8Rng) -> GradCase) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| f(&mut rng)).collect()
}

fn plain(inputs: Vec<Tensor>) -> GradCase {
    GradCase {
        inputs,
        targets: Vec::new(),
    }
}

fn oracle_matmul(x: &[T64], _: &[usize]) -> Vec<f64> {
    let (m, k, n) = (x[0].dims[0], x[0].dims[1], x[1].dims[1]);
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for c in 0..n {
            out[r * n + c] = (0..k)
                .map(|p| x[0].data[r * k + p] * x[1].data[p * n + c])
                .sum();
        }
    }
    out
}

fn oracle_add_bias(x: &[T64], _: &[usize]) -> Vec<f64> {
    let channels = x[0].dims[1];
    let inner: usize = x[0].dims[2..].iter().product();
    x[0].data
        .iter()
        .enumerate()
        .map(|(i, v)| v + x[1].data[(i / inner) % channels])
        .collect()
}

fn oracle_conv(x: &[T64], pad: usize) -> Vec<f64> {
    let (n, c, h, w) = (x[0].dims[0], x[0].dims[1], x[0].dims[2], x[0].dims[3]);
    let (o, kh, kw) = (x[1].dims[0], x[1].dims[2], x[1].dims[3]);
    let (oh, ow) = (h + 2 * pad + 1 - kh, w + 2 * pad + 1 - kw);
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let (sy, sx) = (
                                    (y + i) as isize - pad as isize,
                                    (xx + j) as isize - pad as isize,
                                );
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let iv =
                                    x[0].data[((b * c + ic) * h + sy as usize) * w + sx as usize];
                                let wv = x[1].data[((oc * c + ic) * kh + i) * kw + j];
                                acc += iv * wv;
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

fn oracle_maxpool(x: &[T64], _: &[usize]) -> Vec<f64> {
    let (n, c, h, w) = (x[0].dims[0], x[0].dims[1], x[0].dims[2], x[0].dims[3]);
    let mut out = Vec::new();
    for plane in 0..n * c {
        for y in 0..h / 2 {
            for xx in 0..w / 2 {
                let at = |dy: usize, dx: usize| {
                    x[0].data[plane * h * w + (2 * y + dy) * w + 2 * xx + dx]
                };
                out.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
            }
        }
    }
    out
}

fn oracle_cross_entropy(x: &[T64], targets: &[usize]) -> Vec<f64> {
    let k = x[0].dims[1];
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(r, &t)| {
            let row = &x[0].data[r * k..(r + 1) * k];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[t]
        })
        .sum();
    vec![total / targets.len() as f64]
}

fn criterion_2(_: &mut Shared) -> Outcome {
    const N: usize = 100;
    let mut report = Vec::new();
    let mut pass = true;
    let mut record = |name: &str, worst: f64| {
        pass &= worst <= GRAD_TOL;
        report.push(format!("{name} {worst:.1e}"));
    };

    let c = cases(N, 20, |r| {
        let (m, k, n) = (r.gen_range(1..=5), r.gen_range(1..=5), r.gen_range(1..=5));
        plain(vec![uniform(r, &[m, k]), uniform(r, &[k, n])])
    });
    record(
        "matmul",
        grad_check(c, &|t, v, _| t.matmul(v[0], v[1]), &oracle_matmul)?,
    );

    let c = cases(N, 21, |r| {
        let dims: Vec<usize> = (0..r.gen_range(1..=3))
            .map(|_| r.gen_range(1..=4))
            .collect();
        plain(vec![uniform(r, &dims), uniform(r, &dims)])
    });
    record(
        "add",
        grad_check(c, &|t, v, _| t.add(v[0], v[1]), &|x, _| {
            x[0].data
                .iter()
                .zip(&x[1].data)
                .map(|(a, b)| a + b)
                .collect()
        })?,
    );

    let c = cases(N, 22, |r| {
        let dims: Vec<usize> = (0..r.gen_range(1..=3))
            .map(|_| r.gen_range(1..=4))
            .collect();
        plain(vec![uniform(r, &dims), uniform(r, &dims)])
    });
    record(
        "mul",
        grad_check(c, &|t, v, _| t.mul(v[0], v[1]), &|x, _| {
            x[0].data
                .iter()
                .zip(&x[1].data)
                .map(|(a, b)| a * b)
                .collect()
        })?,
    );

    let c = cases(N, 23, |r| {
        let (b, n) = (r.gen_range(1..=5), r.gen_range(1..=6));
        plain(vec![uniform(r, &[b, n]), uniform(r, &[n])])
    });
    record(
        "add_bias[2d]",
        grad_check(c, &|t, v, _| t.add_bias(v[0], v[1]), &oracle_add_bias)?,
    );

    let c = cases(N, 24, |r| {
        let dims = [
            r.gen_range(1..=2),
            r.gen_range(1..=3),
            r.gen_range(1..=4),
            r.gen_range(1..=4),
        ];
        plain(vec![uniform(r, &dims), uniform(r, &[dims[1]])])
    });
    record(
        "add_bias[4d]",
        grad_check(c, &|t, v, _| t.add_bias(v[0], v[1]), &oracle_add_bias)?,
    );

    // keep inputs away from the kink by more than the difference step
    let c = cases(N, 25, |r| {
        let dims: Vec<usize> = (0..r.gen_range(1..=3))
            .map(|_| r.gen_range(1..=5))
            .collect();
        let n: usize = dims.iter().product();
        let data = (0..n)
            .map(|_| {
                let m = r.gen_range(0.01f32..1.0);
                if r.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        plain(vec![Tensor::new(dims, data).unwrap()])
    });
    record(
        "relu",
        grad_check(c, &|t, v, _| t.relu(v[0]), &|x, _| {
            x[0].data.iter().map(|v| v.max(0.0)).collect()
        })?,
    );

    let c = cases(N, 26, |r| {
        let dims = [r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=4)];
        plain(vec![uniform(r, &dims)])
    });
    record(
        "reshape",
        grad_check(
            c,
            &|t, v, _| {
                let d = t.value(v[0]).dims().to_vec();
                t.reshape(v[0], &[d[0] * d[1], d[2]])
            },
            &|x, _| x[0].data.clone(),
        )?,
    );

    for pad in [0usize, 1] {
        let c = cases(N, 27 + pad as u64, |r| {
            let (kh, kw) = (r.gen_range(1..=3), r.gen_range(1..=3));
            let dims = [
                r.gen_range(1..=2),
                r.gen_range(1..=3),
                r.gen_range(kh.max(2)..=6),
                r.gen_range(kw.max(2)..=6),
            ];
            let weight = [r.gen_range(1..=3), dims[1], kh, kw];
            plain(vec![uniform(r, &dims), uniform(r, &weight)])
        });
        record(
            &format!("conv2d[pad={pad}]"),
            grad_check(
                c,
                &move |t, v, _| t.conv2d(v[0], v[1], pad),
                &move |x, _| oracle_conv(x, pad),
            )?,
        );
    }

    // distinct values spaced wider than twice the difference step
    let c = cases(N, 29, |r| {
        let dims = [
            r.gen_range(1..=2),
            r.gen_range(1..=3),
            r.gen_range(2..=7),
            r.gen_range(2..=7),
        ];
        let n: usize = dims.iter().product();
        let mut rank: Vec<usize> = (0..n).collect();
        rank.shuffle(r);
        let data = rank
            .iter()
            .map(|&k| -1.0 + 2.0 * (k as f32 + 0.5) / n as f32)
            .collect();
        plain(vec![Tensor::new(dims.to_vec(), data).unwrap()])
    });
    record(
        "maxpool2d",
        grad_check(c, &|t, v, _| t.maxpool2d(v[0]), &oracle_maxpool)?,
    );

    let c = cases(N, 30, |r| {
        let (b, k) = (r.gen_range(1..=4), r.gen_range(2..=6));
        GradCase {
            inputs: vec![uniform(r, &[b, k])],
            targets: (0..b).map(|_| r.gen_range(0..k)).collect(),
        }
    });
    record(
        "softmax_cross_entropy",
        grad_check(
            c,
            &|t, v, y| t.softmax_cross_entropy(v[0], y),
            &oracle_cross_entropy,
        )?,
    );

    verdict(
        pass,
        format!(
            "worst rel. error (tol {GRAD_TOL:.0e}): {}",
            report.join(", ")
        ),
    )
}

// 3. Convex toys.

fn toy_config(rho: f64) -> SlrConfig {
    SlrConfig {
        rho,
        inner_steps: Some(50),
        optimizer: OptimizerConfig::sgd(0.1),
        ..SlrConfig::default()
    }
}

struct Toy {
    name: &'static str,
    target: &'static [f32],
    w0: &'static [f32],
    budget: usize,
    rho: f64,
    optimum: &'static [f32],
}

const TOYS: [Toy; 2] = [
    Toy {
        name: "1-D",
        target: &[3.0],
        w0: &[0.0],
        budget: 1,
        rho: 0.1,
        optimum: &[3.0],
    },
    Toy {
        name: "2-D",
        target: &[3.0, 1.0],
        w0: &[3.0, 1.0],
        budget: 1,
        rho: 1.0,
        optimum: &[3.0, 0.0],
    },
];

fn criterion_3(_: &mut Shared) -> Outcome {
    let mut pass = true;
    let mut notes = Vec::new();
    for toy in &TOYS {
        let mut obj = QuadraticObjective::vector(toy.target);
        let mut engine = SlrEngine::new(
            toy_config(toy.rho),
            budget_plan(toy.budget),
            single(toy.w0),
            &obj,
        )?;
        let report = engine.run(&mut obj, &StopCriteria::iterations(5000), &mut NoProbe, 0)?;
        let first = report.records().find(|r| r.violation < 1e-4).map(|r| r.k);
        let err = |set: &LayerSet| -> f64 {
            set.require("w")
                .unwrap()
                .data()
                .iter()
                .zip(toy.optimum)
                .map(|(a, b)| f64::from(a - b).abs())
                .fold(0.0, f64::max)
        };
        let (ew, ez) = (err(engine.w()), err(engine.z()));
        let ok = first.is_some() && ew < 1e-3 && ez < 1e-3;
        pass &= ok;
        notes.push(format!(
            "{}: violation<1e-4 at k={} |W-W*|={ew:.1e} |Z-Z*|={ez:.1e}",
            toy.name,
            first.map_or("never".into(), |k| k.to_string())
        ));
    }
    verdict(pass, notes.join("; "))
}

// 4. Alpha schedule.

fn criterion_4(_: &mut Shared) -> Outcome {
    let (m, r) = (300.0, 0.1);
    let first = alpha_schedule(1, m, r)?;
    if first != 1.0 - 1.0 / m {
        return verdict(false, format!("alpha(1) = {first}"));
    }
    let mut prev = alpha_schedule(2, m, r)?;
    if !(prev > 0.0 && prev < 1.0) {
        return verdict(false, format!("alpha(2) = {prev}"));
    }
    for k in 3..=1_000_000usize {
        let a = alpha_schedule(k, m, r)?;
        if !(a > 0.0 && a < 1.0 && a > prev) {
            return verdict(
                false,
                format!("alpha({k}) = {a}, alpha({}) = {prev}", k - 1),
            );
        }
        prev = a;
    }
    verdict(true, format!("alpha(1) = 1-1/300, alpha(1e6) = {prev:.12}"))
}

// 5. SOC gating.

fn bits(s: &LayerSet) -> Vec<u32> {
    s.iter()
        .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
        .collect()
}

#[derive(Default)]
struct GateCount {
    failures: usize,
    overrides: usize,
}

/// Walks SLR stage by stage. A failed condition must leave the multipliers
/// bit-identical unless the stage reports a forced update from the failure cap.
fn gated_trace(
    engine: &mut SlrEngine,
    obj: &mut dyn Objective,
    iterations: usize,
    count: &mut GateCount,
) -> Result<(), String> {
    for k in 1..=iterations {
        let before = bits(engine.lambda());
        let Ok(first) = engine.stage1(obj) else { break };
        let mid = bits(engine.lambda());
        let Ok(second) = engine.stage2() else { break };
        let after = bits(engine.lambda());
        for (stage, outcome, a, b) in [(1, first, &before, &mid), (2, second, &mid, &after)] {
            if outcome.soc {
                continue;
            }
            count.failures += 1;
            if outcome.overridden {
                count.overrides += 1;
            } else if a != b {
                return Err(format!("stage {stage} at k={k}"));
            }
        }
    }
    Ok(())
}

fn criterion_5(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut count = GateCount::default();
    let traces = 300;
    for t in 0..traces {
        let n = rng.gen_range(2..=6);
        let target: Vec<f32> = (0..n).map(|_| rng.gen_range(-3.0f32..3.0)).collect();
        let mut obj = QuadraticObjective::vector(&target);
        let config = SlrConfig {
            rho: rng.gen_range(0.05..2.0),
            s0: rng.gen_range(1e-3..1.0),
            inner_steps: Some(rng.gen_range(1..=3)),
            soc_override_after: if t % 2 == 0 { None } else { Some(3) },
            optimizer: OptimizerConfig::sgd(rng.gen_range(0.05f32..1.2)),
            ..SlrConfig::default()
        };
        let mut engine = SlrEngine::new(
            config,
            budget_plan(rng.gen_range(0..n)),
            single(&vec![0.0; n]),
            &obj,
        )?;
        if let Err(at) = gated_trace(&mut engine, &mut obj, 40, &mut count) {
            return verdict(
                false,
                format!("quadratic trace {t}: multipliers changed on failed {at}"),
            );
        }
    }

    let arch = Architecture::Mlp(vec![6, 8, 3]);
    let train = make_synthetic(120, 3, 6, 2)?;
    let mut obj = NetworkObjective::new(arch.clone(), train, 8, 16, 1)?;
    let w0 = arch.init(1);
    let plan =
        SparsityPlan::from_keep_fraction(&w0, arch.prunable().iter().map(String::as_str), 0.3)?;
    let config = SlrConfig {
        inner_steps: Some(2),
        soc_override_after: None,
        optimizer: OptimizerConfig::sgd(0.5),
        ..SlrConfig::default()
    };
    let mut engine = SlrEngine::new(config, plan, w0, &obj)?;
    if let Err(at) = gated_trace(&mut engine, &mut obj, 60, &mut count) {
        return verdict(
            false,
            format!("network trace: multipliers changed on failed {at}"),
        );
    }
    verdict(
        count.failures > count.overrides,
        format!(
            "{} traces, {} failed conditions, multipliers bit-unchanged on all but the {} logged cap overrides",
            traces + 1,
            count.failures,
            count.overrides
        ),
    )
}

// 6. Dual bound ordering.

fn criterion_6(_: &mut Shared) -> Outcome {
    let (rho, iterations) = (0.1, 5000);
    let target = [3.0f32, 1.0];
    let w0 = single(&[3.0, 1.0]);
    let optimizer = OptimizerConfig::sgd(0.1);

    let mut obj = QuadraticObjective::vector(&target);
    let slr_config = SlrConfig {
        rho,
        m: 10.0,
        inner_steps: Some(50),
        optimizer,
        ..SlrConfig::default()
    };
    let gamma = slr_config.dual.gamma;
    let mut slr = SlrEngine::new(slr_config, budget_plan(1), w0.clone(), &obj)?;
    let slr_records: Vec<IterationRecord> = slr
        .run(
            &mut obj,
            &StopCriteria::iterations(iterations),
            &mut NoProbe,
            0,
        )?
        .records()
        .cloned()
        .collect();

    let mut obj = QuadraticObjective::vector(&target);
    let admm_config = AdmmConfig {
        rho,
        inner_steps: Some(50),
        optimizer,
        ..AdmmConfig::default()
    };
    let mut admm = AdmmEngine::new(admm_config, budget_plan(1), w0, &obj)?;
    let admm_records: Vec<IterationRecord> = admm
        .run(
            &mut obj,
            &StopCriteria::iterations(iterations),
            &mut NoProbe,
            0,
        )?
        .records()
        .cloned()
        .collect();

    match dual_ordering_kappa(&slr_records, &admm_records) {
        Some(kappa) => verdict(
            gamma == 1.0,
            format!("gamma={gamma}, qbar_slr < qbar_admm for all k > {kappa} up to k={iterations}"),
        ),
        None => verdict(
            false,
            format!("ordering fails at the last recorded k={iterations}"),
        ),
    }
}

// 7. Paired MNIST comparison at a matched epoch budget.

#[derive(Default)]
struct Shared {
    c7_logs: Vec<PathBuf>,
}

fn epochs_key(e: Option<f64>) -> f64 {
    e.unwrap_or(f64::INFINITY)
}

fn criterion_7(shared: &mut Shared) -> Outcome {
    let root = scratch("c7");
    let mut wins = 0;
    let (mut slr_epochs, mut admm_epochs) = (Vec::new(), Vec::new());
    let mut rows = Vec::new();
    for seed in 0..5u64 {
        let cfg = mnist_config(&[
            ("seed", seed.to_string()),
            ("keep_fraction", "0.1".into()),
            ("epochs", "20".into()),
            ("threshold_drop", "0.02".into()),
            (
                "out_dir",
                root.join(format!("seed-{seed}"))
                    .to_string_lossy()
                    .into_owned(),
            ),
        ])?;
        let c = compare(&cfg)?;
        shared.c7_logs.push(cfg.out_dir.join("slr.jsonl"));
        if c.slr.hardprune_accuracy >= c.admm.hardprune_accuracy {
            wins += 1;
        }
        slr_epochs.push(epochs_key(c.slr.epochs_to_threshold));
        admm_epochs.push(epochs_key(c.admm.epochs_to_threshold));
        rows.push(format!(
            "s{seed} base {:.4} slr {:.4} admm {:.4}",
            c.baseline_accuracy, c.slr.hardprune_accuracy, c.admm.hardprune_accuracy
        ));
    }
    let (ms, ma) = (median(slr_epochs), median(admm_epochs));
    verdict(
        wins >= 4 && ms <= ma,
        format!(
            "SLR acc >= ADMM in {wins}/5 seeds (need 4); median epochs-to-threshold SLR {ms} vs ADMM {ma}; {}",
            rows.join(", ")
        ),
    )
}

// 8. Hardprune accuracy vs masked retraining at keep 0.5.

fn criterion_8(_: &mut Shared) -> Outcome {
    let root = scratch("c8");
    let mut gaps = Vec::new();
    let mut rows = Vec::new();
    for seed in 0..3u64 {
        let out = root.join(format!("seed-{seed}"));
        let base = [
            ("seed", seed.to_string()),
            ("method", "slr".to_string()),
            ("keep_fraction", "0.5".into()),
            ("epochs", "20".into()),
            ("retrain_epochs", "3".into()),
            ("out_dir", out.to_string_lossy().into_owned()),
        ];
        let run = prune(&mnist_config(&base)?)?;
        let mut with_ckpt = base.to_vec();
        with_ckpt.push((
            "checkpoint",
            out.join("slr-pruned.ckpt").to_string_lossy().into_owned(),
        ));
        let re = retrain(&mnist_config(&with_ckpt)?)?;
        gaps.push((re.after - run.hardprune_accuracy).abs());
        rows.push(format!(
            "s{seed} hardprune {:.4} retrained {:.4}",
            run.hardprune_accuracy, re.after
        ));
    }
    let m = median(gaps);
    verdict(
        m <= 0.02,
        format!(
            "median |gap| {:.2} points (max 2); {}",
            100.0 * m,
            rows.join(", ")
        ),
    )
}

// 9. SOC recurrence on the criterion-7 logs.

fn criterion_9(shared: &mut Shared) -> Outcome {
    let logs = if shared.c7_logs.is_empty() {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance/c7");
        (0..5)
            .map(|s| root.join(format!("seed-{s}/slr.jsonl")))
            .collect()
    } else {
        shared.c7_logs.clone()
    };
    let mut failed = 0;
    for path in &logs {
        let records: Vec<IterationRecord> = RunReport::read(path)
            .map_err(|e| format!("criterion-7 log {}: {e}", path.display()))?
            .records()
            .cloned()
            .collect();
        if records.is_empty() {
            return verdict(false, format!("{} has no iterations", path.display()));
        }
        failed +=
            records.iter().filter(|r| !r.soc1).count() + records.iter().filter(|r| !r.soc2).count();
        if !soc_recurrence_holds(&records) {
            return verdict(
                false,
                format!("{}: a failed condition never recurs", path.display()),
            );
        }
    }
    verdict(
        true,
        format!(
            "{} logs, {failed} failed conditions, each followed by a satisfied one",
            logs.len()
        ),
    )
}

// 10. Byte-identical artifacts from repeated binary runs.

fn snapshot(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, Box<dyn Error>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.strip_prefix(dir)?.to_path_buf(), fs::read(&path)?);
            }
        }
    }
    Ok(files)
}

fn criterion_10(_: &mut Shared) -> Outcome {
    let out = scratch("c10");
    let data = mnist_dir()?;
    let bin = env!("CARGO_BIN_EXE_slrprune");
    let common = |sub: &str| -> Command {
        let mut cmd = Command::new(bin);
        cmd.arg(sub)
            .args(["--dataset", "mnist", "--data-dir"])
            .arg(&data)
            .args([
                "--train-subset",
                "1000",
                "--pretrain-epochs",
                "1",
                "--epochs",
                "3",
                "--seed",
                "11",
            ])
            .arg("--out-dir")
            .arg(&out);
        cmd
    };
    let mut runs = Vec::new();
    for _ in 0..2 {
        let _ = fs::remove_dir_all(&out);
        let status = common("compare").output()?.status;
        if !status.success() {
            return verdict(false, format!("compare exited with {status}"));
        }
        let status = common("retrain")
            .arg("--checkpoint")
            .arg(out.join("slr-pruned.ckpt"))
            .output()?
            .status;
        if !status.success() {
            return verdict(false, format!("retrain exited with {status}"));
        }
        runs.push(snapshot(&out)?);
    }
    let names: Vec<String> = runs[0].keys().map(|p| p.display().to_string()).collect();
    if runs[0].keys().ne(runs[1].keys()) {
        return verdict(false, "the two runs wrote different file sets");
    }
    let differing: Vec<String> = runs[0]
        .iter()
        .filter(|(p, bytes)| runs[1][*p] != **bytes)
        .map(|(p, _)| p.display().to_string())
        .collect();
    verdict(
        differing.is_empty()
            && names.iter().any(|n| n.ends_with(".jsonl"))
            && names.iter().any(|n| n.ends_with(".ckpt")),
        if differing.is_empty() {
            format!("{} files identical: {}", names.len(), names.join(" "))
        } else {
            format!("differing: {}", differing.join(" "))
        },
    )
}

type Criterion = fn(&mut Shared) -> Outcome;

fn main() -> ExitCode {
    let criteria: [(usize, &str, Option<u64>, Criterion); 10] = [
        (
            1,
            "projection matches exhaustive search",
            Some(10),
            criterion_1,
        ),
        (
            2,
            "autodiff matches finite differences",
            Some(30),
            criterion_2,
        ),
        (3, "convex toys converge", Some(5), criterion_3),
        (4, "alpha schedule", Some(5), criterion_4),
        (5, "SOC gating", Some(5), criterion_5),
        (6, "dual bound ordering", Some(10), criterion_6),
        (
            7,
            "MNIST SLR vs ADMM at matched epochs",
            Some(30 * 60),
            criterion_7,
        ),
        (
            8,
            "hardprune within 2 points of retrained",
            Some(20 * 60),
            criterion_8,
        ),
        (9, "SOC recurrence in criterion-7 logs", None, criterion_9),
        (10, "determinism", None, criterion_10),
    ];
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut shared = Shared::default();
    let mut failed = Vec::new();
    for (id, name, limit, run) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = run(&mut shared);
        let elapsed = start.elapsed();
        let (mut pass, mut detail) = match outcome {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if let Some(secs) = limit {
            if elapsed > Duration::from_secs(secs) {
                pass = false;
                detail = format!("over the {secs} s limit; {detail}");
            }
        }
        println!(
            "criterion {id:>2}: {} {name} [{:.1} s] {detail}",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
        if !pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
