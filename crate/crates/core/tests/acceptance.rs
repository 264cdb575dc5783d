//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero when any criterion fails.
//!
//! `cargo test -p kuronet-core --test acceptance [-- <name-filter>]`

mod common;

use std::f64::consts::LN_2;
use std::time::Instant;

use kuronet::augmentation::{mixup, sample_lambda, MixupConfig};
use kuronet::corpus::synth::{generate_synthetic_corpus, SynthSpec};
use kuronet::corpus::{LabelMaps, PageSample};
use kuronet::evaluation::{evaluate, f1_score};
use kuronet::model::{memory_estimate_dense, Gradients, PositionList};
use kuronet::postprocess::{dbscan, write_predictions, InferenceConfig, Prediction, Recognizer};
use kuronet::tensor::{
    add, conv2d, conv2d_grad, group_norm, group_norm_grad, maxpool2, maxpool2_grad, relu, relu_grad, sigmoid,
    softmax_rows, upsample2_grad, upsample2_nearest, GROUP_NORM_EPS,
};
use kuronet::training::{compute_loss, loss_and_gradients, train, EpochLog, Preset, TrainConfig};
use kuronet::{KuroNet64, ModelConfig, Tensor64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{clamped_beta_mean, dbscan_oracle, dot, max_fd_error, partial, rel_error, same_partition};

const F1_TOLERANCE: f64 = 1e-4;
const PER_OP_TOLERANCE: f64 = 1e-4;
const END_TO_END_TOLERANCE: f64 = 1e-3;
const END_TO_END_PARAMETERS: usize = 50;
const DBSCAN_CASES: usize = 100;
const DBSCAN_MAX_POINTS: usize = 60;
const UNIFORM_LOSS_TOLERANCE: f64 = 1e-6;
const LAMBDA_SAMPLES: usize = 1_000_000;
const LAMBDA_MEAN_TOLERANCE: f64 = 0.003;

const DESK_RESOLUTION: usize = 128;
const DESK_BASE_CHANNELS: usize = 16;
const DESK_GROUPS: usize = 4;
const DESK_EPOCHS: usize = 60;
const DESK_LR: f64 = 1e-3;
const DESK_SEED: u64 = 7;
const DESK_TRAIN_BOOKS: usize = 3;
const DESK_CORPUS_SEED: u64 = 1;
const DESK_HELDOUT_SEED: u64 = 2;
const DESK_TIME_LIMIT_SECS: f64 = 15.0 * 60.0;
const DESK_TRAIN_F1: f64 = 0.95;
const DESK_HELDOUT_F1: f64 = 0.80;
const ABLATION_MARGIN: f64 = 0.02;

type Outcome = Result<String, String>;
type Criterion = fn() -> Outcome;
type DeskCriterion = fn(&Desk) -> Outcome;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor64 {
    Tensor64::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn metric_anchor() -> Outcome {
    let rows = [(0.8683, 0.8417, 0.8548), (0.8155, 0.7743, 0.7944)];
    let got: Vec<f64> = rows.iter().map(|&(p, r, _)| f1_score(p, r)).collect();
    let ok = rows
        .iter()
        .zip(&got)
        .all(|(&(_, _, want), &f)| (f - want).abs() <= F1_TOLERANCE);
    check(
        ok,
        format!(
            "F1 {:.6} (want 0.8548), {:.6} (want 0.7944), tolerance {F1_TOLERANCE}",
            got[0], got[1]
        ),
    )
}

fn memory_rationale() -> Outcome {
    let cfg = ModelConfig::default();
    let bytes = memory_estimate_dense(&cfg);
    check(
        bytes == 6_553_600_000,
        format!(
            "R={} K={} -> {bytes} bytes (want 6553600000)",
            cfg.input_resolution, cfg.num_classes
        ),
    )
}

/// Largest per-op relative error; each entry is `(op, error)`.
fn per_op_errors() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut out = Vec::new();

    for (stride, name) in [(1, "conv2d"), (2, "conv2d stride 2")] {
        let x = random(&[1, 2, 5, 5], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let y = conv2d(&x, &w, &b, 1, stride).unwrap();
        let probe = random(y.shape(), &mut rng);
        let g = conv2d_grad(&x, &w, &probe, 1, stride).unwrap();
        let ex = max_fd_error(&x, &g.input, &|t| dot(&conv2d(t, &w, &b, 1, stride).unwrap(), &probe));
        let ew = max_fd_error(&w, g.param("weight").unwrap(), &|t| {
            dot(&conv2d(&x, t, &b, 1, stride).unwrap(), &probe)
        });
        let eb = max_fd_error(&b, g.param("bias").unwrap(), &|t| {
            dot(&conv2d(&x, &w, t, 1, stride).unwrap(), &probe)
        });
        out.push((name, ex.max(ew).max(eb)));
    }

    {
        let x = random(&[2, 4, 3, 3], &mut rng);
        let gamma = random(&[4], &mut rng);
        let beta = random(&[4], &mut rng);
        let y = group_norm(&x, 2, &gamma, &beta, GROUP_NORM_EPS).unwrap();
        let probe = random(y.shape(), &mut rng);
        let g = group_norm_grad(&x, 2, &gamma, GROUP_NORM_EPS, &probe).unwrap();
        let f = |x: &Tensor64, gm: &Tensor64, bt: &Tensor64| {
            dot(&group_norm(x, 2, gm, bt, GROUP_NORM_EPS).unwrap(), &probe)
        };
        let ex = max_fd_error(&x, &g.input, &|t| f(t, &gamma, &beta));
        let eg = max_fd_error(&gamma, g.param("gamma").unwrap(), &|t| f(&x, t, &beta));
        let eb = max_fd_error(&beta, g.param("beta").unwrap(), &|t| f(&x, &gamma, t));
        out.push(("group_norm", ex.max(eg).max(eb)));
    }

    {
        // keep inputs away from the kink at 0
        let x = random(&[1, 2, 4, 4], &mut rng).map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
        let probe = random(x.shape(), &mut rng);
        let g = relu_grad(&x, &probe).unwrap();
        out.push(("relu", max_fd_error(&x, &g, &|t| dot(&relu(t), &probe))));
    }

    {
        let x = random(&[1, 2, 4, 4], &mut rng);
        let (y, argmax) = maxpool2(&x).unwrap();
        let probe = random(y.shape(), &mut rng);
        let g = maxpool2_grad(x.shape(), &argmax, &probe).unwrap();
        out.push((
            "maxpool2",
            max_fd_error(&x, &g, &|t| dot(&maxpool2(t).unwrap().0, &probe)),
        ));
    }

    {
        let x = random(&[1, 2, 3, 3], &mut rng);
        let probe = random(&[1, 2, 6, 6], &mut rng);
        let g = upsample2_grad(&probe).unwrap();
        out.push((
            "upsample2_nearest",
            max_fd_error(&x, &g, &|t| dot(&upsample2_nearest(t).unwrap(), &probe)),
        ));
    }

    {
        let a = random(&[1, 2, 3, 3], &mut rng);
        let b = random(&[1, 2, 3, 3], &mut rng);
        let probe = random(a.shape(), &mut rng);
        let ea = max_fd_error(&a, &probe, &|t| dot(&add(t, &b).unwrap(), &probe));
        let eb = max_fd_error(&b, &probe, &|t| dot(&add(&a, t).unwrap(), &probe));
        out.push(("add", ea.max(eb)));
    }

    {
        let z = random(&[1, 1, 3, 3], &mut rng).map(|v| 4.0 * v);
        let probe = random(z.shape(), &mut rng);
        let s = sigmoid(&z);
        let analytic = Tensor64::from_fn(z.shape(), |i| {
            let p = s.data()[i];
            probe.data()[i] * p * (1.0 - p)
        });
        out.push(("sigmoid", max_fd_error(&z, &analytic, &|t| dot(&sigmoid(t), &probe))));
    }

    {
        let (m, k) = (3, 5);
        let z = random(&[m, k], &mut rng).map(|v| 3.0 * v);
        let probe = random(z.shape(), &mut rng);
        let s = softmax_rows(&z).unwrap();
        // Jacobian-vector product s ⊙ (w − ⟨s, w⟩) per row
        let analytic = Tensor64::from_fn(z.shape(), |i| {
            let row = i / k;
            let inner: f64 = (0..k).map(|j| s.data()[row * k + j] * probe.data()[row * k + j]).sum();
            s.data()[i] * (probe.data()[i] - inner)
        });
        out.push((
            "softmax_rows",
            max_fd_error(&z, &analytic, &|t| dot(&softmax_rows(t).unwrap(), &probe)),
        ));
    }

    {
        let model = KuroNet64::new(tiny_config(), 3).unwrap();
        let features = random(&[1, 8, 16, 16], &mut rng);
        let probe = random(&[1, 1, 16, 16], &mut rng);
        let mut grads = Gradients::zeros_like(model.params());
        let df = model.presence_backward(&features, &probe, &mut grads).unwrap();
        out.push((
            "presence head",
            max_fd_error(&features, &df, &|t| dot(&model.presence_logits(t).unwrap(), &probe)),
        ));

        let positions = PositionList::new(vec![(0, 0), (7, 3), (15, 15)], 16).unwrap();
        let probe = random(&[3, model.num_classes()], &mut rng);
        let mut df = Tensor64::zeros(features.shape());
        model
            .character_backward(&features, &positions, &probe, &mut grads, &mut df)
            .unwrap();
        let f = |t: &Tensor64| dot(&model.character_logits_at(t, &positions).unwrap(), &probe);
        out.push(("character head", max_fd_error(&features, &df, &f)));
    }
    out
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        input_resolution: 16,
        base_channels: 8,
        num_classes: 3,
        groups: 2,
        ..ModelConfig::default()
    }
}

fn tiny_labels() -> LabelMaps {
    let r = 16;
    let mut labels = LabelMaps {
        resolution: r,
        presence: vec![0; r * r],
        classes: vec![0; r * r],
    };
    for (row, col, class) in [(2, 3, 0), (2, 4, 0), (9, 9, 2), (10, 9, 2), (13, 1, 1)] {
        labels.presence[row * r + col] = 1;
        labels.classes[row * r + col] = class;
    }
    labels
}

/// Relative errors of `END_TO_END_PARAMETERS` loss partials spread across
/// every parameter tensor.
fn end_to_end_error() -> f64 {
    let model = KuroNet64::new(tiny_config(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let image = Tensor64::from_fn(&[1, 1, 16, 16], |_| rng.random_range(0.0..1.0));
    let labels = tiny_labels();
    let mut grads = Gradients::zeros_like(model.params());
    loss_and_gradients(&model, &image, &labels, 1.0, &mut grads).unwrap();
    let tensors = model.params().values().len();
    let mut worst: f64 = 0.0;
    for i in 0..END_TO_END_PARAMETERS {
        let t = i * tensors / END_TO_END_PARAMETERS;
        let at = rng.random_range(0..model.params().values()[t].len());
        let numeric = partial(&model.params().values()[t], at, &|v| {
            let mut m = model.clone();
            m.params_mut().values_mut()[t] = v.clone();
            compute_loss(&m, &image, &labels, 1.0).unwrap().total
        });
        worst = worst.max(rel_error(grads.tensors[t].data()[at], numeric));
    }
    worst
}

fn gradient_suite() -> Outcome {
    let ops = per_op_errors();
    let worst_op = ops.iter().map(|&(_, e)| e).fold(0.0, f64::max);
    let failing: Vec<&str> = ops
        .iter()
        .filter(|&&(_, e)| e.is_nan() || e >= PER_OP_TOLERANCE)
        .map(|&(n, _)| n)
        .collect();
    let e2e = end_to_end_error();
    check(
        failing.is_empty() && e2e < END_TO_END_TOLERANCE,
        format!(
            "{} ops, worst per-op rel err {worst_op:.2e} (< {PER_OP_TOLERANCE:e}){}; end-to-end over {END_TO_END_PARAMETERS} parameters {e2e:.2e} (< {END_TO_END_TOLERANCE:e})",
            ops.len(),
            if failing.is_empty() { String::new() } else { format!(", failing {failing:?}") },
        ),
    )
}

fn dbscan_oracle_agreement() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut mismatches = Vec::new();
    for case in 0..DBSCAN_CASES {
        let n = rng.random_range(1..=DBSCAN_MAX_POINTS);
        let lattice = case % 2 == 0;
        let points: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                if lattice {
                    (rng.random_range(0..12) as f64, rng.random_range(0..12) as f64)
                } else {
                    (rng.random_range(0.0..15.0), rng.random_range(0.0..15.0))
                }
            })
            .collect();
        let eps = if lattice {
            [1.0, 1.5, 2.0, 3.0][case / 2 % 4]
        } else {
            rng.random_range(0.5..3.0)
        };
        let min_pts = rng.random_range(1..=6);
        if !same_partition(&dbscan(&points, eps, min_pts), &dbscan_oracle(&points, eps, min_pts)) {
            mismatches.push(case);
        }
    }
    check(
        mismatches.is_empty(),
        format!("{} of {DBSCAN_CASES} point sets (n <= {DBSCAN_MAX_POINTS}) match the oracle; mismatching cases {mismatches:?}", DBSCAN_CASES - mismatches.len()),
    )
}

fn teacher_forcing() -> Outcome {
    let cfg = tiny_config();
    let model = KuroNet64::new(cfg.clone(), 9).unwrap();
    let image = Tensor64::from_fn(&[1, 1, 16, 16], |i| ((i * 37) % 11) as f64 / 11.0);
    let char_ids: Vec<usize> = ["head.character.weight", "head.character.bias"]
        .iter()
        .map(|n| model.params().names().iter().position(|m| m == n).unwrap())
        .collect();

    let empty = LabelMaps {
        resolution: 16,
        presence: vec![0; 256],
        classes: vec![0; 256],
    };
    let mut grads = Gradients::zeros_like(model.params());
    let loss = loss_and_gradients(&model, &image, &empty, 1.0, &mut grads).unwrap();
    let masked = char_ids
        .iter()
        .all(|&i| grads.tensors[i].data().iter().all(|&v| v == 0.0))
        && loss.character == 0.0;

    let mut grads = Gradients::zeros_like(model.params());
    loss_and_gradients(&model, &image, &tiny_labels(), 1.0, &mut grads).unwrap();
    let live = char_ids
        .iter()
        .any(|&i| grads.tensors[i].data().iter().any(|&v| v != 0.0));

    let k = 5;
    let mut uniform = KuroNet64::new(ModelConfig { num_classes: k, ..cfg }, 9).unwrap();
    for name in [
        "head.presence.weight",
        "head.presence.bias",
        "head.character.weight",
        "head.character.bias",
    ] {
        uniform.params_mut().by_name_mut(name).unwrap().data_mut().fill(0.0);
    }
    let total = compute_loss(&uniform, &image, &tiny_labels(), 1.0).unwrap().total;
    let want = LN_2 + (k as f64).ln();
    check(
        masked && live && (total - want).abs() < UNIFORM_LOSS_TOLERANCE,
        format!(
            "empty page: character-head gradients all zero = {masked} (nonzero with positives = {live}); uniform loss {total:.9} vs ln2+ln{k} = {want:.9}"
        ),
    )
}

fn mixup_contract() -> Outcome {
    let cfg = MixupConfig::default();
    let (a, b) = (cfg.alpha, cfg.alpha + 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut sum = 0.0;
    let mut in_range = true;
    for _ in 0..LAMBDA_SAMPLES {
        let l = sample_lambda(&cfg, &mut rng);
        in_range &= (0.0..=0.3).contains(&l);
        sum += l;
    }
    let mean = sum / LAMBDA_SAMPLES as f64;
    let (expected, mass_below) = clamped_beta_mean(a, b, 0.3, statrs::function::beta::ln_beta(a, b));
    let cdf = statrs::function::beta::beta_reg(a, b, 0.3);

    let x = Tensor64::from_fn(&[1, 1, 8, 8], |i| (i as f64 * 0.37).sin());
    let identity = [0.0, 0.05, 0.17, 0.3].iter().all(|&l| mixup(&x, &x, l).unwrap() == x);
    check(
        in_range && (mean - expected).abs() <= LAMBDA_MEAN_TOLERANCE && (mass_below - cdf).abs() < 1e-6 && identity,
        format!(
            "{LAMBDA_SAMPLES} draws in [0, 0.3] = {in_range}; mean {mean:.5} vs E[min(Beta({a}, {b}), 0.3)] = {expected:.5} (tolerance {LAMBDA_MEAN_TOLERANCE}); P(X<=0.3) quadrature {mass_below:.7} vs regularized beta {cdf:.7}; mixup(x, x, l) = x: {identity}"
        ),
    )
}

struct DeskRun {
    logs: Vec<EpochLog>,
    seconds: f64,
    train_f1: f64,
    heldout_f1: f64,
    predictions: Vec<u8>,
}

fn desk_corpus() -> (Vec<PageSample>, Vec<PageSample>) {
    let spec = SynthSpec::default();
    let pages = |books: usize, seed: u64, prefix: &str| -> Vec<PageSample> {
        generate_synthetic_corpus(&spec, books, seed, prefix)
            .unwrap()
            .into_iter()
            .flat_map(|b| b.pages)
            .collect()
    };
    (
        pages(DESK_TRAIN_BOOKS, DESK_CORPUS_SEED, "synth"),
        pages(1, DESK_HELDOUT_SEED, "heldout"),
    )
}

fn desk_run(preset: Preset, train_pages: &[PageSample], heldout: &[PageSample]) -> DeskRun {
    let model = ModelConfig {
        input_resolution: DESK_RESOLUTION,
        base_channels: DESK_BASE_CHANNELS,
        groups: DESK_GROUPS,
        num_classes: SynthSpec::default().num_classes + 1,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        epochs: DESK_EPOCHS,
        lr: DESK_LR,
        seed: DESK_SEED,
        preset,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let outcome = train(&model, cfg, train_pages).unwrap();
    let seconds = start.elapsed().as_secs_f64();
    let rec = Recognizer::from_checkpoint(outcome.checkpoint, InferenceConfig::default()).unwrap();
    let predict = |pages: &[PageSample]| -> Vec<Prediction> {
        pages
            .iter()
            .flat_map(|p| rec.predict_page(&p.page_id, &p.image).unwrap())
            .collect()
    };
    let (train_preds, held_preds) = (predict(train_pages), predict(heldout));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("predictions.jsonl");
    write_predictions(&path, &[train_preds.clone(), held_preds.clone()].concat()).unwrap();
    DeskRun {
        logs: outcome.logs,
        seconds,
        train_f1: evaluate(train_pages, &train_preds).unwrap().overall.f1,
        heldout_f1: evaluate(heldout, &held_preds).unwrap().overall.f1,
        predictions: std::fs::read(&path).unwrap(),
    }
}

struct Desk {
    train_pages: Vec<PageSample>,
    heldout: Vec<PageSample>,
    mixup: DeskRun,
}

fn end_to_end(desk: &Desk) -> Outcome {
    let nomix = desk_run(Preset::ResunetNomixup, &desk.train_pages, &desk.heldout);
    let m = &desk.mixup;
    check(
        m.seconds <= DESK_TIME_LIMIT_SECS
            && m.train_f1 >= DESK_TRAIN_F1
            && m.heldout_f1 >= DESK_HELDOUT_F1
            && nomix.heldout_f1 <= m.heldout_f1 + ABLATION_MARGIN,
        format!(
            "{} training / {} held-out pages; kuronet trained in {:.0}s (<= {DESK_TIME_LIMIT_SECS:.0}s), train F1 {:.4} (>= {DESK_TRAIN_F1}), held-out F1 {:.4} (>= {DESK_HELDOUT_F1}); resunet_nomixup held-out F1 {:.4} (<= {:.4})",
            desk.train_pages.len(),
            desk.heldout.len(),
            m.seconds,
            m.train_f1,
            m.heldout_f1,
            nomix.heldout_f1,
            m.heldout_f1 + ABLATION_MARGIN,
        ),
    )
}

fn determinism(desk: &Desk) -> Outcome {
    let again = desk_run(Preset::Kuronet, &desk.train_pages, &desk.heldout);
    let logs = |l: &[EpochLog]| serde_json::to_string(l).unwrap();
    let same_logs = logs(&desk.mixup.logs) == logs(&again.logs);
    let same_preds = desk.mixup.predictions == again.predictions;
    check(
        same_logs && same_preds,
        format!(
            "{} epoch logs identical = {same_logs}; prediction JSON ({} bytes) identical = {same_preds}",
            again.logs.len(),
            again.predictions.len()
        ),
    )
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filter.is_empty() || filter.iter().any(|f| name.contains(f.as_str()));

    let quick: [(&str, Criterion); 6] = [
        ("metric_anchor", metric_anchor),
        ("memory_rationale", memory_rationale),
        ("gradient_suite", gradient_suite),
        ("dbscan_oracle", dbscan_oracle_agreement),
        ("teacher_forcing_masking", teacher_forcing),
        ("mixup_contract", mixup_contract),
    ];
    let desk_checks: [(&str, DeskCriterion); 2] = [("end_to_end_desk_run", end_to_end), ("determinism", determinism)];

    let mut failed = 0;
    let mut report = |name: &str, outcome: Outcome| match outcome {
        Ok(d) => println!("PASS {name}: {d}"),
        Err(d) => {
            failed += 1;
            println!("FAIL {name}: {d}");
        }
    };
    for (name, f) in quick {
        if wanted(name) {
            report(name, f());
        }
    }
    if desk_checks.iter().any(|(n, _)| wanted(n)) {
        let (train_pages, heldout) = desk_corpus();
        let mixup = desk_run(Preset::Kuronet, &train_pages, &heldout);
        let desk = Desk {
            train_pages,
            heldout,
            mixup,
        };
        for (name, f) in desk_checks {
            if wanted(name) {
                report(name, f(&desk));
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
