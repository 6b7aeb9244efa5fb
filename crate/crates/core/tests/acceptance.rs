//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use droughtcast_core::autodiff::{grad_check, Graph};
use droughtcast_core::data::{
    build_samples, read_statics, read_timeseries, Sample, SampleOptions, TargetStart,
};
use droughtcast_core::eval::{FoldResults, Improvement};
use droughtcast_core::experiment::{self, RunConfig};
use droughtcast_core::layers::{AttentionHead, ParamStore};
use droughtcast_core::metrics::{self, macro_f1, roc_auc_weighted, triangular_scores};
use droughtcast_core::model::{loss, AblationConfig, Batch, HybridModel, LossKind, ModelConfig};
use droughtcast_core::stats::{paired_t_test, Better};
use droughtcast_core::synthetic::{self, SyntheticSpec, SYNTHETIC_CATEGORICAL};
use droughtcast_core::train::{
    fit, load_checkpoint, AdamWConfig, LrSchedule, OptimizerState, Selection, TrainRunConfig,
};
use droughtcast_core::tsne::{tsne, TsneConfig};
use droughtcast_core::{RngState, Tensor, HORIZON};
use statrs::distribution::{ContinuousCDF, StudentsT};

type Check = std::result::Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Check);

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn ok<T, E: std::fmt::Display>(r: std::result::Result<T, E>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn random_sample(
    rng: &mut RngState,
    window: usize,
    channels: usize,
    numeric: usize,
    vocab: &[usize],
) -> Sample {
    Sample {
        fips: "19001".into(),
        anchor: NaiveDate::from_ymd_opt(2010, 6, 1).unwrap(),
        window,
        channels,
        x: (0..window * channels).map(|_| rng.normal()).collect(),
        numeric: (0..numeric).map(|_| rng.normal()).collect(),
        categorical: vocab
            .iter()
            .map(|&v| (rng.uniform() * v as f64) as usize % v)
            .collect(),
        target: std::array::from_fn(|_| rng.uniform_in(0.0, 5.0)),
    }
}

// 1 ─────────────────────────────────────────────────────────────────────────

const MODEL_SEED: u64 = 12;

fn gradient_correctness() -> Check {
    let config = ModelConfig {
        lstm_layers: 2,
        hidden_size: 8,
        embed_dim: 3,
        reduced_dim: 2,
        ffnn_layers: 1,
        ffnn_hidden: 4,
        mlp_layers: 2,
        mlp_hidden: 6,
        dropout: 0.1,
        embed_dropout: 0.4,
        input_channels: 4,
        numeric_static_count: 3,
        categorical_vocab_sizes: vec![4, 3],
    };
    let model = ok(HybridModel::build(config, AblationConfig::FULL, MODEL_SEED))?;
    let mut rng = RngState::new(5);
    let samples: Vec<Sample> = (0..2)
        .map(|_| random_sample(&mut rng, 5, 4, 3, &[4, 3]))
        .collect();
    let batch = ok(Batch::from_samples(&samples))?;
    let targets = ok(Batch::targets(&samples))?;
    let report = ok(grad_check(
        |g: &mut Graph, p| {
            // identical masks on every evaluation
            let mut dropout_rng = RngState::stream(99, 2);
            let (pred, _, _) = model.forward_on(g, p, &batch, true, &mut dropout_rng)?;
            let t = g.constant(targets.clone());
            loss(g, pred, t, LossKind::Mse)
        },
        model.params().tensors(),
        1e-5,
        1e-4,
    ))?;
    let mut pass = ok(model.forward_graph(&batch, true, &mut RngState::stream(99, 2)))?;
    let t = pass.graph.constant(targets.clone());
    let root = ok(loss(&mut pass.graph, pass.predictions, t, LossKind::Mse))?;
    ok(pass.graph.backward(root))?;
    let dead: Vec<&str> = pass
        .param_grads()
        .iter()
        .enumerate()
        .map(|(i, g)| (model.params().name(i), g))
        // a score offset cancels in the softmax
        .filter(|(name, g)| *name != "attention.score.bias" && g.data().iter().all(|&v| v == 0.0))
        .map(|(name, _)| name)
        .collect();
    ensure(
        dead.is_empty(),
        format!("parameters without gradient signal: {dead:?}"),
    )?;
    let worst = report.max_rel_error();
    ensure(
        report.passed(),
        format!(
            "max relative error {worst:.3e} over {} tensors",
            report.inputs.len()
        ),
    )?;
    Ok(format!(
        "{} parameter tensors ({} scalars), max relative error {worst:.2e}",
        report.inputs.len(),
        model.params().scalar_count()
    ))
}

// 2 ─────────────────────────────────────────────────────────────────────────

fn attention_invariants() -> Check {
    let mut rng = RngState::new(21);
    let mut worst_sum = 0.0f64;
    let mut worst_shift = 0.0f64;
    for trial in 0..1000 {
        let h = 1 + trial % 8;
        let steps = 1 + (trial * 7) % 15;
        let batch = 1 + trial % 3;
        let mut store = ParamStore::new();
        let head = AttentionHead::new(&mut store, "att", h, &mut rng);
        let scale = 10f64.powf(rng.uniform_in(-1.0, 1.5));
        let states: Vec<f64> = (0..batch * steps * h)
            .map(|_| scale * rng.normal())
            .collect();
        let states = ok(Tensor::new(vec![batch, steps, h], states))?;
        let run = |store: &ParamStore| -> std::result::Result<(Tensor, Tensor), String> {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let s = g.constant(states.clone());
            let (ctx, alpha) = ok(head.attend(&mut g, &p, s))?;
            Ok((g.value(ctx).clone(), g.value(alpha).clone()))
        };
        let (ctx, alpha) = run(&store)?;
        for b in 0..batch {
            let row = &alpha.data()[b * steps..(b + 1) * steps];
            let total: f64 = row.iter().sum();
            worst_sum = worst_sum.max((total - 1.0).abs());
            ensure(
                row.iter().all(|&a| a >= 0.0),
                format!("trial {trial}: negative weight"),
            )?;
            for k in 0..h {
                let column = (0..steps).map(|t| states.at(&[b, t, k]));
                let lo = column.clone().fold(f64::INFINITY, f64::min);
                let hi = column.fold(f64::NEG_INFINITY, f64::max);
                let v = ctx.at(&[b, k]);
                let slack = 1e-12 * hi.abs().max(lo.abs()).max(1.0);
                ensure(
                    v >= lo - slack && v <= hi + slack,
                    format!("trial {trial}: context {v} outside [{lo}, {hi}]"),
                )?;
            }
        }
        let offset = rng.uniform_in(-50.0, 50.0);
        store.get_mut(head.score.bias).data_mut()[0] += offset;
        let (_, shifted) = run(&store)?;
        for (a, b) in alpha.data().iter().zip(shifted.data()) {
            worst_shift = worst_shift.max((a - b).abs());
        }
    }
    ensure(
        worst_sum <= 1e-12,
        format!("|sum(alpha) - 1| reached {worst_sum:.2e}"),
    )?;
    ensure(
        worst_shift <= 1e-12,
        format!("score offset moved alpha by {worst_shift:.2e}"),
    )?;
    Ok(format!(
        "1000 inputs: max |sum-1| {worst_sum:.1e}, max shift change {worst_shift:.1e}, contexts within range"
    ))
}

// 3 ─────────────────────────────────────────────────────────────────────────

const LSTM_FOLDS: ([f64; 5], [f64; 5], [f64; 5]) = (
    [0.347, 0.365, 0.272, 0.332, 0.310],
    [0.553, 0.570, 0.444, 0.548, 0.504],
    [58.34, 42.79, 66.22, 44.82, 63.88],
);
const HM_FOLDS: ([f64; 5], [f64; 5], [f64; 5]) = (
    [0.244, 0.302, 0.254, 0.266, 0.299],
    [0.433, 0.519, 0.404, 0.433, 0.502],
    [60.22, 59.67, 75.22, 59.84, 71.06],
);

fn oracle_p(a: &[f64], b: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let m = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let t = m / (sd / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).unwrap();
    (t, 2.0 * (1.0 - dist.cdf(t.abs())))
}

fn statistics_reproduction() -> Check {
    let folds = |f: ([f64; 5], [f64; 5], [f64; 5])| FoldResults {
        mae: f.0.to_vec(),
        rmse: f.1.to_vec(),
        f1: f.2.to_vec(),
    };
    let (lstm, hm) = (folds(LSTM_FOLDS), folds(HM_FOLDS));
    let (sl, sh) = (ok(lstm.summary())?, ok(hm.summary())?);
    let close = |v: f64, want: f64, tol: f64| (v - want).abs() <= tol;
    ensure(
        close(sl.mae.mean, 0.325, 1e-3) && close(sl.mae.std, 0.036, 1e-3),
        format!("LSTM MAE {:.4} ± {:.4}", sl.mae.mean, sl.mae.std),
    )?;
    ensure(
        close(sh.mae.mean, 0.273, 1e-3) && close(sh.mae.std, 0.026, 1e-3),
        format!("HM MAE {:.4} ± {:.4}", sh.mae.mean, sh.mae.std),
    )?;
    ensure(
        close(sl.f1.mean, 55.2, 0.05) && close(sh.f1.mean, 65.2, 0.05),
        format!("F1 means {:.3} / {:.3}", sl.f1.mean, sh.f1.mean),
    )?;
    let reported = [0.03, 0.04, 0.02];
    let pairs = [
        (&lstm.mae, &hm.mae),
        (&lstm.rmse, &hm.rmse),
        (&lstm.f1, &hm.f1),
    ];
    let mut ps = Vec::new();
    for ((a, b), want) in pairs.iter().zip(reported) {
        let r = ok(paired_t_test(a, b))?;
        let (t_oracle, p_oracle) = oracle_p(a, b);
        ensure(
            (r.t - t_oracle).abs() < 1e-10 && (r.p_value - p_oracle).abs() < 1e-10,
            format!("t/p {}/{} vs oracle {t_oracle}/{p_oracle}", r.t, r.p_value),
        )?;
        let truncated = (r.p_value * 100.0).floor() / 100.0;
        ensure(
            (truncated - want).abs() < 1e-12,
            format!(
                "p {:.4} truncates to {truncated}, reported {want}",
                r.p_value
            ),
        )?;
        ps.push(r.p_value);
    }
    Ok(format!(
        "MAE {:.3}±{:.3} / {:.3}±{:.3}, F1 means {:.1} / {:.1}, p = {:.3}, {:.3}, {:.3}",
        sl.mae.mean,
        sl.mae.std,
        sh.mae.mean,
        sh.mae.std,
        sl.f1.mean,
        sh.f1.mean,
        ps[0],
        ps[1],
        ps[2]
    ))
}

// 4 ─────────────────────────────────────────────────────────────────────────

fn improvement_reproduction() -> Check {
    let f1 = ok(Improvement::new(
        "F1",
        61.9,
        67.3,
        Better::Higher,
        Some(9.0),
    ))?;
    let roc = ok(Improvement::new(
        "ROC-AUC",
        80.6,
        85.9,
        Better::Higher,
        Some(7.0),
    ))?;
    let mae = ok(Improvement::new(
        "MAE",
        0.306,
        0.218,
        Better::Lower,
        Some(30.0),
    ))?;
    let oracle = |b: f64, c: f64| (c - b) / b * 100.0;
    ensure(
        (f1.percent - oracle(61.9, 67.3)).abs() < 1e-12,
        "F1 arithmetic",
    )?;
    ensure(
        (roc.percent - oracle(80.6, 85.9)).abs() < 1e-12,
        "ROC arithmetic",
    )?;
    ensure(
        (mae.percent - (0.306 - 0.218) / 0.306 * 100.0).abs() < 1e-12,
        "MAE arithmetic",
    )?;
    ensure(
        (f1.percent - 9.0).abs() <= 0.5 && f1.discrepancy().is_none(),
        format!("F1 {:.2}%", f1.percent),
    )?;
    ensure(
        (roc.percent - 7.0).abs() <= 0.5 && roc.discrepancy().is_none(),
        format!("ROC {:.2}%", roc.percent),
    )?;
    ensure(
        (mae.percent - 28.76).abs() < 0.01,
        format!("MAE {:.3}%", mae.percent),
    )?;
    ensure(
        mae.discrepancy().is_some() && mae.describe().contains("DISCREPANCY"),
        "MAE discrepancy not flagged",
    )?;
    Ok(format!(
        "F1 {:+.2}%, ROC-AUC {:+.2}%, MAE {:+.2}% flagged against reported 30%",
        f1.percent, roc.percent, mae.percent
    ))
}

// 5 ─────────────────────────────────────────────────────────────────────────

fn overfit_sanity() -> Check {
    let (window, channels, vocab) = (10, 4, [3usize, 3]);
    let mut rng = RngState::new(8);
    let mut samples: Vec<Sample> = (0..32)
        .map(|_| random_sample(&mut rng, window, channels, 3, &vocab))
        .collect();
    for s in &mut samples {
        let recent: f64 =
            s.x[(window - 3) * channels..].iter().sum::<f64>() / (3 * channels) as f64;
        for w in 0..HORIZON {
            let v = 2.5 + 0.8 * recent + 0.3 * s.numeric[w % 3] + 0.2 * s.categorical[0] as f64;
            s.target[w] = v.clamp(0.0, 5.0);
        }
    }
    let config = ModelConfig {
        lstm_layers: 2,
        hidden_size: 16,
        embed_dim: 4,
        reduced_dim: 2,
        ffnn_layers: 1,
        ffnn_hidden: 8,
        mlp_layers: 2,
        mlp_hidden: 32,
        dropout: 0.0,
        embed_dropout: 0.0,
        input_channels: channels,
        numeric_static_count: 3,
        categorical_vocab_sizes: vocab.to_vec(),
    };
    let mut model = ok(HybridModel::build(config, AblationConfig::FULL, 3))?;
    let cfg = TrainRunConfig {
        batch_size: 32,
        epochs: 500,
        selection: Selection::LastEpoch,
        ..TrainRunConfig::default()
    };
    let outcome = ok(fit(
        &mut model,
        &samples,
        &[],
        &cfg,
        Some(ok(LrSchedule::constant(1e-2))?),
        4,
    ))?;
    let steps = outcome.step_losses.len();
    let pred = ok(model.predict(&samples, 32))?;
    let mse = pred
        .iter()
        .zip(&samples)
        .flat_map(|(p, s)| p.iter().zip(&s.target).map(|(a, b)| (a - b).powi(2)))
        .sum::<f64>()
        / (32 * HORIZON) as f64;
    ensure(steps <= 500, format!("{steps} optimizer steps"))?;
    ensure(mse < 1e-2, format!("MSE {mse:.3e} after {steps} steps"))?;
    Ok(format!("MSE {mse:.2e} after {steps} optimizer steps"))
}

// 6 ─────────────────────────────────────────────────────────────────────────

fn tiny_run_config(root: &Path, seed: u64) -> RunConfig {
    let spec = SyntheticSpec::default();
    let paths = synthetic::write_dataset(root.join("data"), &spec, seed).expect("fixture");
    let mut cfg = RunConfig {
        seed: Some(seed),
        out_dir: root.join("out"),
        ..RunConfig::default()
    };
    cfg.data.train = Some(paths.train);
    cfg.data.validation = Some(paths.validation);
    cfg.data.test = Some(paths.test);
    cfg.data.statics = Some(paths.statics);
    cfg.data.categorical_columns = SYNTHETIC_CATEGORICAL
        .iter()
        .map(|s| s.to_string())
        .collect();
    cfg.data.window = spec.window;
    cfg.model.hidden_size = 8;
    cfg.model.embed_dim = 4;
    cfg.model.reduced_dim = 2;
    cfg.model.ffnn_hidden = 8;
    cfg.model.mlp_hidden = 16;
    cfg.train.epochs = 3;
    cfg.train.batch_size = 16;
    cfg.train.max_lr = 1e-2;
    cfg.introspect.tsne.perplexity = 2.0;
    cfg.introspect.tsne.iterations = 300;
    cfg
}

fn with_run(cfg: &RunConfig, name: &str) -> RunConfig {
    RunConfig {
        run_name: Some(name.into()),
        ..cfg.clone()
    }
}

fn ablation_harness() -> Check {
    let tmp = ok(tempfile::tempdir())?;
    let cfg = tiny_run_config(tmp.path(), 17);
    ok(experiment::cmd_ingest(&with_run(&cfg, "ingest")))?;
    let out = ok(experiment::cmd_ablate(&with_run(&cfg, "ablate")))?;
    let table = ok(fs::read_to_string(out.dir.join("ablation.csv")))?;
    let names: Vec<&str> = table
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').next())
        .collect();
    ensure(
        names == ["HM", "TS+Att", "TS", "SF+TS", "SF"],
        format!("ablation rows {names:?}"),
    )?;

    let ds = ok(experiment::Dataset::load(cfg.cache_dir()))?;
    let samples = ds.test.clone();
    let mut rng = RngState::new(77);
    let perturbed_x: Vec<Sample> = samples
        .iter()
        .map(|s| Sample {
            x: s.x.iter().map(|_| 10.0 * rng.normal()).collect(),
            ..s.clone()
        })
        .collect();
    let perturbed_statics: Vec<Sample> = samples
        .iter()
        .map(|s| Sample {
            numeric: s.numeric.iter().map(|_| 10.0 * rng.normal()).collect(),
            categorical: s.categorical.iter().map(|c| (c + 1) % 3).collect(),
            ..s.clone()
        })
        .collect();
    let load = |name: &str| ok(load_checkpoint(out.dir.join(name).join("final.ckpt")));
    let sf = load("SF")?;
    ensure(
        ok(sf.predict(&samples, 64))? == ok(sf.predict(&perturbed_x, 64))?,
        "SF predictions depend on the time series",
    )?;
    ensure(
        ok(sf.predict(&samples, 64))? != ok(sf.predict(&perturbed_statics, 64))?,
        "SF predictions ignore statics",
    )?;
    for name in ["TS", "TS_Att"] {
        let ts = load(name)?;
        ensure(
            ok(ts.predict(&samples, 64))? == ok(ts.predict(&perturbed_statics, 64))?,
            format!("{name} predictions depend on statics"),
        )?;
    }
    Ok(format!(
        "five settings trained and evaluated on {} test samples; SF ignores x, TS and TS+Att ignore statics",
        samples.len()
    ))
}

// 7 ─────────────────────────────────────────────────────────────────────────

fn pairwise_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !positive[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if positive[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn weighted_auc_oracle(scores: &[[f64; 6]], target: &[usize]) -> f64 {
    let mut total = 0.0;
    for k in 0..6 {
        let support = target.iter().filter(|&&t| t == k).count();
        if support == 0 {
            continue;
        }
        let col: Vec<f64> = scores.iter().map(|s| s[k]).collect();
        let pos: Vec<bool> = target.iter().map(|&t| t == k).collect();
        total += support as f64 * pairwise_auc(&col, &pos);
    }
    100.0 * total / target.len() as f64
}

fn metric_oracles() -> Check {
    let target = [[0.0; 6]];
    let pred = [[1.0, 0.0, 1.0, 2.0, 3.0, 4.0]];
    ensure(
        ok(metrics::mae(&pred, &target, None))? == 11.0 / 6.0,
        "MAE != 11/6",
    )?;
    ensure(
        ok(metrics::rmse(&pred, &target, None))? == (31.0f64 / 6.0).sqrt(),
        "RMSE != sqrt(31/6)",
    )?;
    ensure(
        ok(metrics::mae(&target, &target, None))? == 0.0,
        "MAE of identical inputs",
    )?;

    let f1 = ok(macro_f1(&[0, 1, 1, 1], &[0, 0, 1, 1]))?;
    ensure(
        f1 == (2.0 / 3.0 + 4.0 / 5.0) / 2.0 * 100.0,
        format!("binary macro F1 {f1}"),
    )?;
    let one_class = ok(macro_f1(&[0; 6], &[0, 1, 2, 3, 4, 5]))?;
    ensure(
        one_class == 2.0 / 7.0 / 6.0 * 100.0,
        format!("one-class macro F1 {one_class}"),
    )?;
    ensure(
        ok(macro_f1(&[0, 1, 2, 3, 4, 5], &[0, 1, 2, 3, 4, 5]))? == 100.0,
        "perfect macro F1",
    )?;

    let inversion = ok(metrics::auc_binary(
        &[0.1, 0.4, 0.35, 0.8],
        &[false, false, true, true],
    ))?;
    ensure(
        (inversion * 100.0 - 75.0).abs() < 1e-9,
        format!("inversion AUC {inversion}"),
    )?;
    let separated = ok(metrics::auc_binary(
        &[0.1, 0.2, 0.7, 0.9],
        &[false, false, true, true],
    ))?;
    ensure((separated - 1.0).abs() < 1e-9, "separated AUC")?;
    let flat = ok(roc_auc_weighted(&[[0.5; 6]; 4], &[0, 1, 0, 1]))?;
    ensure(
        (flat - 50.0).abs() < 1e-9,
        format!("uninformative AUC {flat}"),
    )?;

    let mut rng = RngState::new(31);
    let mut worst_auc = 0.0f64;
    for _ in 0..200 {
        let n = 2 + (rng.uniform() * 40.0) as usize;
        let target: Vec<usize> = (0..n)
            .map(|i| {
                if i < 2 {
                    i
                } else {
                    (rng.uniform() * 6.0) as usize
                }
            })
            .collect();
        let scores: Vec<[f64; 6]> = (0..n)
            .map(|_| {
                // rounding produces ties
                let yhat = (rng.uniform_in(-0.5, 5.5) * 4.0).round() / 4.0;
                triangular_scores(yhat)
            })
            .collect();
        let got = ok(roc_auc_weighted(&scores, &target))?;
        worst_auc = worst_auc.max((got - weighted_auc_oracle(&scores, &target)).abs());
    }
    ensure(
        worst_auc < 1e-9,
        format!("weighted AUC differs from pairwise oracle by {worst_auc:.2e}"),
    )?;

    for trial in 0..1000 {
        let n = 1 + (rng.uniform() * 20.0) as usize;
        let scale = 10f64.powf(rng.uniform_in(-3.0, 2.0));
        let p: Vec<[f64; 6]> = (0..n)
            .map(|_| std::array::from_fn(|_| scale * rng.normal()))
            .collect();
        let t: Vec<[f64; 6]> = (0..n)
            .map(|_| std::array::from_fn(|_| scale * rng.normal()))
            .collect();
        let week = (trial % 7 != 0).then_some(1 + trial % 6);
        let (a, r) = (
            ok(metrics::mae(&p, &t, week))?,
            ok(metrics::rmse(&p, &t, week))?,
        );
        ensure(
            a <= r * (1.0 + 1e-12),
            format!("trial {trial}: MAE {a} > RMSE {r}"),
        )?;
    }
    Ok(format!(
        "MAE 11/6, RMSE sqrt(31/6), F1 73.33 and 4.76 exact; AUC 75/100/50; weighted AUC within {worst_auc:.1e} of pairwise oracle; MAE <= RMSE on 1000 draws"
    ))
}

// 8 ─────────────────────────────────────────────────────────────────────────

const SENTINEL: f64 = -987654.0;

fn leakage_fixture(days: usize, start: NaiveDate, cutoff: Option<usize>) -> String {
    let mut s = String::from("fips,date,a,b,score\n");
    for fips in ["19001", "40003"] {
        let base = if fips == "19001" { 0.0 } else { 100000.0 };
        for d in 0..days {
            let date = start + chrono::Days::new(d as u64);
            let (a, b) = match cutoff {
                Some(c) if d >= c => (SENTINEL, SENTINEL),
                _ => (base + d as f64, base + 0.5 * d as f64),
            };
            let score = if d % 7 == 3 {
                format!("{}", (d % 50) as f64 / 10.0)
            } else {
                String::new()
            };
            s.push_str(&format!("{fips},{date},{a},{b},{score}\n"));
        }
    }
    s
}

fn leakage() -> Check {
    let window = 20;
    let days = window + 365 + 7 * 12;
    let start = NaiveDate::from_ymd_opt(2003, 2, 1).unwrap();
    let statics_csv = "fips,elev,SQ1\n19001,1.0,a\n40003,2.0,b\n";
    let cats = vec!["SQ1".to_string()];
    let statics = ok(read_statics(statics_csv.as_bytes(), &cats, None))?;
    let opts = SampleOptions {
        window,
        target_start: TargetStart::Anchor,
    };

    let series = ok(read_timeseries(
        leakage_fixture(days, start, None).as_bytes(),
    ))?;
    let (samples, _) = ok(build_samples(&series, &statics, opts))?;
    ensure(!samples.is_empty(), "fixture produced no samples")?;
    let base_of = |fips: &str| if fips == "19001" { 0.0 } else { 100000.0 };
    for s in &samples {
        let k = (s.anchor - start).num_days() as f64;
        let base = base_of(&s.fips);
        for r in 0..window {
            let row = &s.x[r * 4..(r + 1) * 4];
            let expected_day = k - window as f64 + r as f64;
            ensure(
                row[0] == base + expected_day,
                format!("{} {}: current-year day mismatch", s.fips, s.anchor),
            )?;
            ensure(
                row[0] < base + k,
                format!("{} {}: value from anchor or later", s.fips, s.anchor),
            )?;
            ensure(
                row[2] == row[0] - 365.0,
                format!("{} {}: previous-year a not 365-shifted", s.fips, s.anchor),
            )?;
            ensure(
                row[3] == base + 0.5 * (expected_day - 365.0),
                format!("{} {}: previous-year b not 365-shifted", s.fips, s.anchor),
            )?;
        }
    }

    let mut checked = 0;
    for anchor in samples
        .iter()
        .filter(|s| s.fips == "19001")
        .map(|s| s.anchor)
    {
        let cutoff = (anchor - start).num_days() as usize;
        let series = ok(read_timeseries(
            leakage_fixture(days, start, Some(cutoff)).as_bytes(),
        ))?;
        let (poisoned, _) = ok(build_samples(&series, &statics, opts))?;
        let s = poisoned
            .iter()
            .find(|s| s.anchor == anchor)
            .ok_or_else(|| format!("no sample at {anchor} with sentinels after it"))?;
        ensure(
            !s.x.contains(&SENTINEL),
            format!("sentinel leaked into sample at {anchor}"),
        )?;
        checked += 1;
    }
    Ok(format!(
        "{} samples with exact day indices and 365-day shifts; sentinels from the anchor onward absent at {checked} anchors",
        samples.len()
    ))
}

// 9 ─────────────────────────────────────────────────────────────────────────

fn tsne_check() -> Check {
    let mut rng = RngState::new(41);
    let n = 300;
    let points: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let centre = if i < n / 2 { 0.0 } else { 6.0 };
            (0..10).map(|_| centre + rng.normal()).collect()
        })
        .collect();
    let cfg = TsneConfig::default();
    let result = ok(tsne(&points, &cfg, 12))?;

    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let mut worst_perp = 0.0f64;
    for i in 0..n {
        let beta = 1.0 / (2.0 * result.sigmas[i].powi(2));
        let d: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| dist2(&points[i], &points[j]))
            .collect();
        let dmin = d.iter().cloned().fold(f64::INFINITY, f64::min);
        let w: Vec<f64> = d.iter().map(|v| (-(v - dmin) * beta).exp()).collect();
        let z: f64 = w.iter().sum();
        let entropy: f64 = w
            .iter()
            .map(|v| v / z)
            .filter(|&p| p > 0.0)
            .map(|p| -p * p.ln())
            .sum();
        worst_perp = worst_perp.max((entropy.exp() - result.perplexity).abs());
    }
    ensure(
        worst_perp <= 1e-3,
        format!("perplexity off by {worst_perp:.2e}"),
    )?;

    let (mut intra, mut inter, mut ni, mut nx) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let d = dist2(&result.coords[i], &result.coords[j]).sqrt();
            if (i < n / 2) == (j < n / 2) {
                intra += d;
                ni += 1.0;
            } else {
                inter += d;
                nx += 1.0;
            }
        }
    }
    let (intra, inter) = (intra / ni, inter / nx);
    ensure(
        intra < inter,
        format!("intra {intra:.3} >= inter {inter:.3}"),
    )?;
    ensure(
        result.kl_trace.len() >= 1000,
        "KL trace shorter than 1000 iterations",
    )?;
    let (kl300, kl1000) = (result.kl_trace[299], result.kl_trace[999]);
    ensure(
        kl1000 <= kl300,
        format!("KL rose from {kl300:.4} to {kl1000:.4}"),
    )?;
    Ok(format!(
        "N=300: intra {intra:.2} < inter {inter:.2}, perplexity {:.3} within {worst_perp:.1e}, KL {kl300:.4} -> {kl1000:.4}",
        result.perplexity
    ))
}

// 10 ────────────────────────────────────────────────────────────────────────

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).expect("readable run directory") {
            let path = entry.expect("directory entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                out.insert(rel, fs::read(&path).expect("readable output"));
            }
        }
    }
    out
}

fn one_pipeline(root: &Path) -> std::result::Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let cfg = tiny_run_config(root, 23);
    ok(experiment::cmd_ingest(&with_run(&cfg, "ingest")))?;
    let trained = ok(experiment::cmd_train(&with_run(&cfg, "train")))?;
    let mut intro = with_run(&cfg, "introspect");
    intro.introspect.checkpoint = Some(trained.dir.join("model.ckpt"));
    ok(experiment::cmd_introspect(&intro))?;
    ok(experiment::cmd_ablate(&with_run(&cfg, "ablate")))?;
    Ok(snapshot(&cfg.out_dir))
}

fn determinism() -> Check {
    let tmp = ok(tempfile::tempdir())?;
    let first = one_pipeline(tmp.path())?;
    ok(fs::remove_dir_all(tmp.path().join("out")))?;
    ok(fs::remove_dir_all(tmp.path().join("data")))?;
    let second = one_pipeline(tmp.path())?;
    ensure(
        first.keys().eq(second.keys()),
        format!(
            "file sets differ: {:?} vs {:?}",
            first.keys().collect::<Vec<_>>(),
            second.keys().collect::<Vec<_>>()
        ),
    )?;
    let differing: Vec<_> = first
        .iter()
        .filter(|(k, v)| second.get(*k) != Some(*v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    ensure(
        differing.is_empty(),
        format!("differing files: {differing:?}"),
    )?;
    let count = |ext: &str| {
        first
            .keys()
            .filter(|k| k.extension().is_some_and(|e| e == ext))
            .count()
    };
    ensure(
        count("ckpt") > 0 && count("csv") > 0,
        "no checkpoints or CSVs produced",
    )?;
    Ok(format!(
        "{} files identical across two seeded runs ({} CSV, {} checkpoints)",
        first.len(),
        count("csv"),
        count("ckpt")
    ))
}

// 11 ────────────────────────────────────────────────────────────────────────

fn optimizer() -> Check {
    let (lr, wd, steps) = (0.05, 0.01, 40);
    let theta0 = vec![1.5, -0.25, 3.0e-3, -7.0];
    let mut store = ParamStore::new();
    store.add("theta", Tensor::vector(theta0.clone()));
    let config = AdamWConfig {
        weight_decay: wd,
        ..AdamWConfig::default()
    };
    let mut opt = OptimizerState::new(&store, config);
    let zero = vec![Tensor::zeros(&[4])];
    for _ in 0..steps {
        ok(opt.step(&mut store, &zero, lr))?;
    }
    let got = store.tensors()[0].data().to_vec();
    let factor = 1.0 - lr * wd;
    for (i, &t0) in theta0.iter().enumerate() {
        let mut repeated = t0;
        for _ in 0..steps {
            repeated *= factor;
        }
        ensure(
            got[i] == repeated,
            format!("element {i}: {} vs {repeated}", got[i]),
        )?;
        let closed = t0 * factor.powi(steps);
        ensure(
            ((got[i] - closed) / closed).abs() < 1e-14,
            format!("element {i} vs closed form"),
        )?;
    }

    let mut store = ParamStore::new();
    store.add("w", Tensor::vector(vec![0.8]));
    let cfg = AdamWConfig::default();
    let mut opt = OptimizerState::new(&store, cfg);
    let grads = [0.3, -1.2, 0.05];
    let lr = 0.1;
    let (mut theta, mut m, mut v) = (0.8f64, 0.0f64, 0.0f64);
    let mut worst = 0.0f64;
    for (t, g) in grads.iter().enumerate() {
        ok(opt.step(&mut store, &[Tensor::vector(vec![*g])], lr))?;
        let t = (t + 1) as i32;
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
        let m_hat = m / (1.0 - cfg.beta1.powi(t));
        let v_hat = v / (1.0 - cfg.beta2.powi(t));
        theta -= lr * (cfg.weight_decay * theta + m_hat / (v_hat.sqrt() + cfg.eps));
        worst = worst.max((store.tensors()[0].data()[0] - theta).abs());
    }
    ensure(worst <= 1e-12, format!("scalar AdamW off by {worst:.2e}"))?;
    Ok(format!(
        "{steps} zero-gradient steps equal (1 - lr*wd)^N exactly; 3-step AdamW within {worst:.1e} of oracle"
    ))
}

fn main() {
    let criteria: [Criterion; 11] = [
        (
            "gradient correctness",
            Duration::from_secs(60),
            gradient_correctness,
        ),
        ("attention invariants", Duration::MAX, attention_invariants),
        (
            "statistics reproduction",
            Duration::from_secs(1),
            statistics_reproduction,
        ),
        (
            "relative-improvement reproduction",
            Duration::from_secs(1),
            improvement_reproduction,
        ),
        ("overfit sanity", Duration::from_secs(120), overfit_sanity),
        ("ablation harness", Duration::MAX, ablation_harness),
        ("metric oracles", Duration::MAX, metric_oracles),
        ("data-pipeline leakage", Duration::MAX, leakage),
        ("t-SNE", Duration::from_secs(120), tsne_check),
        ("determinism", Duration::MAX, determinism),
        ("optimizer", Duration::MAX, optimizer),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, limit, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check));
        let elapsed = start.elapsed();
        let result = match outcome {
            Ok(Ok(detail)) if elapsed > *limit => {
                Err(format!("{detail}; took longer than {limit:?}"))
            }
            Ok(r) => r,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        let (tag, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "{tag} criterion {:>2} {name} [{:.2}s]: {detail}",
            i + 1,
            elapsed.as_secs_f64()
        );
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
