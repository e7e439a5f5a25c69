//! Acceptance criteria. Each test prints one `[PASS]`/`[FAIL]` line with the
//! measured values before asserting; run with `--nocapture` to see them.

use std::sync::OnceLock;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use deepctr::data::split;
use deepctr::eval::{auc, ScoredSet};
use deepctr::model_file::{train_model, ModelFile, ModelKind, TrainedModel};
use deepctr::snn::{dae_pretrain_bottom, rbm_pretrain_bottom, BottomInit, PretrainConfig, PretrainMethod};
use deepctr::synth::{generate, SynthConfig};
use deepctr::train::{grid_search, EarlyStopping, GridSpec, TrainConfig, TrainReport};
use deepctr::verify::{equivalence_checks, gradient_checks, EQUIVALENCE_TOLERANCE, GRADIENT_TOLERANCE};
use deepctr::Dataset;

fn report(id: u32, name: &str, passed: bool, detail: &str) {
    let tag = if passed { "PASS" } else { "FAIL" };
    println!("[{tag}] {id}. {name}: {detail}");
}

struct Benchmark {
    train: Dataset,
    valid: Dataset,
    test: Dataset,
}

/// 5 fields x 10 values from a planted FM teacher, split 20k / 2k / 2k.
fn benchmark() -> &'static Benchmark {
    static DATA: OnceLock<Benchmark> = OnceLock::new();
    DATA.get_or_init(|| {
        let cfg = SynthConfig {
            fields: 5,
            cardinality: 10,
            instances: 24_000,
            seed: 2024,
            ..SynthConfig::default()
        };
        let data = generate(&cfg).unwrap().dataset;
        let (train, valid, test) = split(&data, [20.0 / 24.0, 2.0 / 24.0, 2.0 / 24.0], 2024).unwrap();
        assert_eq!((train.len(), valid.len(), test.len()), (20_000, 2_000, 2_000));
        Benchmark { train, valid, test }
    })
}

fn bench_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.02,
        patience: 2,
        hidden: vec![50, 50, 50],
        seed: 7,
        ..TrainConfig::default()
    }
}

fn test_auc(model: &TrainedModel, data: &Dataset) -> f64 {
    auc(&ScoredSet::new(model.predict_all(data).unwrap(), data.labels()).unwrap()).unwrap()
}

#[test]
fn c1_gradient_suite() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let trials = 25;
    let results = [
        ("lr", gradient_checks::lr(&mut rng, trials).unwrap()),
        ("fm", gradient_checks::fm(&mut rng, trials).unwrap()),
        ("fnn", gradient_checks::fnn(&mut rng, trials).unwrap()),
        ("snn", gradient_checks::snn(&mut rng, trials).unwrap()),
        ("dae", gradient_checks::dae(&mut rng, trials).unwrap()),
    ];
    let passed = results.iter().all(|(_, e)| *e < GRADIENT_TOLERANCE);
    let detail = results
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    report(
        1,
        "gradient suite",
        passed,
        &format!("worst relative error over {trials} configs each: {detail} (< 1e-4), {:.1?}", start.elapsed()),
    );
    assert!(passed);
}

#[test]
fn c2_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let trials = 1000;
    let results = [
        ("fm", equivalence_checks::fm(&mut rng, trials).unwrap()),
        ("fnn", equivalence_checks::fnn_forward(&mut rng, trials).unwrap()),
        ("snn", equivalence_checks::snn_forward(&mut rng, trials).unwrap()),
        ("auc", equivalence_checks::auc(&mut rng, trials).unwrap()),
    ];
    let passed = results.iter().all(|(_, e)| *e <= EQUIVALENCE_TOLERANCE);
    let detail = results
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    report(
        2,
        "oracle equivalence",
        passed,
        &format!("max |fast - oracle| over {trials} trials: {detail} (<= 1e-12), {:.1?}", start.elapsed()),
    );
    assert!(passed);
}

#[test]
fn c3_sparse_update_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (fnn_err, fnn_moved) = equivalence_checks::fnn_update(&mut rng, 1000).unwrap();
    let (snn_err, snn_moved) = equivalence_checks::snn_update(&mut rng, 1000).unwrap();
    let passed = fnn_err <= EQUIVALENCE_TOLERANCE
        && snn_err <= EQUIVALENCE_TOLERANCE
        && fnn_moved == 0
        && snn_moved == 0;
    report(
        3,
        "sparse update correctness",
        passed,
        &format!(
            "fnn max diff {fnn_err:.1e}, snn max diff {snn_err:.1e}; inactive columns changed at l2=0: fnn {fnn_moved}, snn {snn_moved}"
        ),
    );
    assert!(passed);
}

#[test]
fn c4_synthetic_benchmark() {
    let start = Instant::now();
    let b = benchmark();
    let cfg = bench_config();
    let mut aucs = Vec::new();
    for kind in [ModelKind::Lr, ModelKind::Fm, ModelKind::Fnn] {
        let (model, _, _) = train_model(kind, &b.train, &b.valid, &cfg).unwrap();
        aucs.push(test_auc(&model, &b.test));
    }
    let (lr, fm, fnn) = (aucs[0], aucs[1], aucs[2]);
    let passed = fm >= 0.75 && fnn >= 0.75 && fnn >= lr + 0.02;
    report(
        4,
        "synthetic interaction benchmark",
        passed,
        &format!(
            "test AUC LR {lr:.4}, FM {fm:.4}, FNN {fnn:.4} (FM, FNN >= 0.75; FNN >= LR + 0.02), {:.1?}",
            start.elapsed()
        ),
    );
    assert!(passed);
}

#[test]
fn c5_snn_consistency() {
    let start = Instant::now();
    let b = benchmark();
    let cfg = TrainConfig {
        learning_rate: 0.05,
        ..bench_config()
    };
    let (rbm, _, _) = train_model(ModelKind::SnnRbm, &b.train, &b.valid, &cfg).unwrap();
    let (dae, _, _) = train_model(ModelKind::SnnDae, &b.train, &b.valid, &cfg).unwrap();
    let (a_rbm, a_dae) = (test_auc(&rbm, &b.test), test_auc(&dae, &b.test));
    let passed = (a_rbm - a_dae).abs() <= 0.03;
    report(
        5,
        "SNN consistency",
        passed,
        &format!(
            "test AUC SNN-RBM {a_rbm:.4}, SNN-DAE {a_dae:.4}, gap {:.4} (<= 0.03), {:.1?}",
            (a_rbm - a_dae).abs(),
            start.elapsed()
        ),
    );
    assert!(passed);
}

/// Pre-trains while checking after every step that columns outside the
/// sampled view are bit-identical to the shadow copy taken before it.
fn shadowed_pretrain(data: &Dataset, cfg: &PretrainConfig, width: usize) -> (BottomInit, usize, usize) {
    let init_cfg = PretrainConfig { epochs: 0, ..cfg.clone() };
    let run = |c: &PretrainConfig, obs: Option<&mut dyn FnMut(&[(usize, f64)], &[Vec<f64>])>| match c.method {
        PretrainMethod::Rbm => rbm_pretrain_bottom(data, width, c, obs).unwrap(),
        PretrainMethod::Dae => dae_pretrain_bottom(data, width, c, obs).unwrap(),
    };
    let mut shadow = run(&init_cfg, None).weights;
    let mut steps = 0;
    let mut violations = 0;
    let mut observer = |units: &[(usize, f64)], weights: &[Vec<f64>]| {
        let mut sampled = vec![false; weights.len()];
        for &(g, _) in units {
            sampled[g] = true;
        }
        for (g, column) in weights.iter().enumerate() {
            if !sampled[g] && column != &shadow[g] {
                violations += 1;
            }
        }
        for &(g, _) in units {
            shadow[g].clone_from(&weights[g]);
        }
        steps += 1;
    };
    let trained = run(cfg, Some(&mut observer));
    (trained, steps, violations)
}

#[test]
fn c6_pretraining_sanity() {
    let data = generate(&SynthConfig {
        instances: 3000,
        seed: 66,
        ..SynthConfig::default()
    })
    .unwrap()
    .dataset;
    let (train, heldout, _) = split(&data, [0.8, 0.2, 0.0], 66).unwrap();
    let mut passed = true;
    let mut details = Vec::new();
    for method in [PretrainMethod::Rbm, PretrainMethod::Dae] {
        let cfg = PretrainConfig {
            method,
            negatives: 2,
            epochs: 5,
            learning_rate: 0.05,
            corruption: 0.3,
            seed: 6,
        };
        let init = match method {
            PretrainMethod::Rbm => rbm_pretrain_bottom(&train, 16, &PretrainConfig { epochs: 0, ..cfg.clone() }, None),
            PretrainMethod::Dae => dae_pretrain_bottom(&train, 16, &PretrainConfig { epochs: 0, ..cfg.clone() }, None),
        }
        .unwrap();
        let (trained, steps, violations) = shadowed_pretrain(&train, &cfg, 16);
        let before = init.heldout_error(&heldout, 2, 99);
        let after = trained.heldout_error(&heldout, 2, 99);
        let ok = after < before && violations == 0 && steps == 5 * train.len();
        passed &= ok;
        details.push(format!(
            "{method:?} held-out error {before:.4} -> {after:.4}, {violations} unsampled-column changes in {steps} steps"
        ));
    }
    report(6, "pre-training sanity", passed, &details.join("; "));
    assert!(passed);
}

#[test]
fn c7_dropout_sweep() {
    let start = Instant::now();
    let b = benchmark();
    let sweep = [0.1, 0.3, 0.5, 0.7, 0.9, 1.0];
    let spec = GridSpec {
        base: bench_config(),
        keep_prob: sweep.to_vec(),
        ..GridSpec::default()
    };
    let rows = grid_search(&ModelKind::Fnn, &b.train, &b.valid, &spec.expand()).unwrap();
    let mut by_p: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| {
            let auc = r.outcome.as_ref().and_then(|o| o.valid_auc).unwrap_or(f64::NEG_INFINITY);
            (r.config.keep_prob.unwrap(), auc)
        })
        .collect();
    by_p.sort_by(|a, b| a.0.total_cmp(&b.0));
    let best = by_p.iter().copied().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    let passed = best.0 != sweep[0];
    let curve = by_p
        .iter()
        .map(|(p, a)| format!("p={p}: {a:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    report(
        7,
        "dropout sweep",
        passed,
        &format!("FNN valid AUC {curve}; best at p={} (not the smallest p), {:.1?}", best.0, start.elapsed()),
    );
    assert!(passed);
}

fn run_bytes(kind: ModelKind, train: &Dataset, valid: &Dataset, cfg: &TrainConfig) -> (String, Vec<u8>, TrainReport) {
    let (model, report, cfg) = train_model(kind, train, valid, cfg).unwrap();
    let mut csv = Vec::new();
    report
        .write_csv(&mut csv, &deepctr::cli::report_columns(kind, &cfg))
        .unwrap();
    let file = ModelFile::new(model, train.schema().clone(), cfg);
    (file.to_json().unwrap(), csv, report)
}

#[test]
fn c8_determinism() {
    let data = generate(&SynthConfig {
        instances: 2000,
        seed: 88,
        ..SynthConfig::default()
    })
    .unwrap()
    .dataset;
    let (train, valid, _) = split(&data, [0.8, 0.2, 0.0], 88).unwrap();
    let cfg = TrainConfig {
        hidden: vec![12, 8, 6],
        max_epochs: 4,
        learning_rate: 0.05,
        seed: 8,
        ..TrainConfig::default()
    };
    let mut passed = true;
    let mut checked = Vec::new();
    for kind in ModelKind::ALL {
        let (a_model, a_csv, a_report) = run_bytes(kind, &train, &valid, &cfg);
        let (b_model, b_csv, b_report) = run_bytes(kind, &train, &valid, &cfg);
        let same = a_model == b_model && a_csv == b_csv && a_report == b_report;
        passed &= same;
        checked.push(format!("{kind} {}", if same { "identical" } else { "DIFFERENT" }));
    }
    report(8, "determinism", passed, &format!("model files and reports: {}", checked.join(", ")));
    assert!(passed);
}

fn trace_min_ok(losses: &[f64], patience: usize, expected_stop: usize, expected_best: usize) -> bool {
    let mut es = EarlyStopping::new(patience);
    let mut stopped = None;
    for (i, &l) in losses.iter().enumerate() {
        es.observe(l);
        if es.should_stop() {
            stopped = Some(i + 1);
            break;
        }
    }
    stopped == Some(expected_stop) && es.best_epoch() == Some(expected_best)
}

#[test]
fn c9_early_stopping_contract() {
    let traces_ok = trace_min_ok(&[0.6, 0.5, 0.55], 1, 3, 2)
        && trace_min_ok(&[0.5, 0.52, 0.51, 0.53, 0.54], 2, 5, 1)
        && trace_min_ok(&[0.9, 0.8, 0.7, 0.71, 0.6, 0.65, 0.66], 2, 7, 5);

    let data = generate(&SynthConfig {
        instances: 3000,
        seed: 99,
        ..SynthConfig::default()
    })
    .unwrap()
    .dataset;
    let (train, valid, _) = split(&data, [0.7, 0.3, 0.0], 99).unwrap();
    let mut live_ok = true;
    let mut details = Vec::new();
    for (kind, lr) in [(ModelKind::Lr, 0.05), (ModelKind::Fm, 0.05), (ModelKind::Fnn, 0.05), (ModelKind::SnnRbm, 0.05)] {
        let cfg = TrainConfig {
            learning_rate: lr,
            hidden: vec![16, 8],
            max_epochs: 15,
            patience: 2,
            seed: 9,
            ..TrainConfig::default()
        };
        let (model, report, _) = train_model(kind, &train, &valid, &cfg).unwrap();
        let min = report.epochs.iter().map(|e| e.valid_loss).fold(f64::INFINITY, f64::min);
        let scored = ScoredSet::new(model.predict_all(&valid).unwrap(), valid.labels()).unwrap();
        let recomputed = deepctr::eval::logloss(&scored).unwrap();
        let ok = report.best().valid_loss == min && (recomputed - min).abs() < 1e-12;
        live_ok &= ok;
        details.push(format!(
            "{kind}: {} epochs, best {} (loss {min:.5}, snapshot re-scored {recomputed:.5})",
            report.epochs.len(),
            report.best_epoch
        ));
    }
    let passed = traces_ok && live_ok;
    report(
        9,
        "early stopping contract",
        passed,
        &format!("constructed traces {}; live: {}", if traces_ok { "ok" } else { "WRONG" }, details.join("; ")),
    );
    assert!(passed);
}
