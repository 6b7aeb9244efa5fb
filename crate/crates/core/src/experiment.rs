//! Run configuration and the experiment commands behind the CLI.
//!
//! Every command reads a [`RunConfig`], writes its artifacts into a run
//! directory (echoing the resolved configuration as `config.toml`) and
//! returns a text rendering of its result tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    self, filter_by_state, read_samples, state_prefix, write_samples, CategoricalEncoder,
    Normalizer, Sample, SampleOptions, TargetStart,
};
use crate::error::{Error, Result};
use crate::eval::{
    self, cross_validate, evaluate, headline_improvements, location_experiment_report, FoldResults,
    Improvement, LocationResult, MetricsReport, TrainScope,
};
use crate::figures;
use crate::introspect::{self, county_codes};
use crate::metrics::CategoryRule;
use crate::model::{AblationConfig, HybridModel, ModelConfig};
use crate::report::{self, Table};
use crate::stats::paired_t_test;
use crate::train::{
    fit, load_checkpoint, save_checkpoint, write_history, FitOutcome, TrainRunConfig,
};
use crate::tsne::{tsne, TsneConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training-split time-series CSV.
    pub train: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub statics: Option<PathBuf>,
    pub categorical_columns: Vec<String>,
    pub window: usize,
    pub target_start: TargetStart,
    /// Defaults to `<out_dir>/cache`.
    pub cache_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            validation: None,
            test: None,
            statics: None,
            categorical_columns: data::DEFAULT_CATEGORICAL_COLUMNS
                .iter()
                .map(|s| s.to_string())
                .collect(),
            window: data::DEFAULT_WINDOW,
            target_start: TargetStart::Anchor,
            cache_dir: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub category_rule: CategoryRule,
    pub checkpoint: Option<PathBuf>,
    /// Optional baseline checkpoint for relative improvements.
    pub baseline_checkpoint: Option<PathBuf>,
    /// Previously reported improvements (percent) keyed by metric name
    /// (`MAE`, `RMSE`, `F1`, `ROC-AUC`); computed values are checked
    /// against them.
    pub reported_improvements: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub k: usize,
    /// Ablation preset compared against the main configuration.
    pub compare: String,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            k: 5,
            compare: "TS".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocExpConfig {
    /// State abbreviations or two-digit FIPS prefixes.
    pub states: Vec<String>,
}

impl Default for LocExpConfig {
    fn default() -> Self {
        Self {
            states: data::DEFAULT_LOCATION_STATES
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntrospectConfig {
    pub checkpoint: Option<PathBuf>,
    pub color_column: String,
    pub tsne: TsneConfig,
}

impl Default for IntrospectConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            color_column: data::DEFAULT_CATEGORICAL_COLUMNS[0].into(),
            tsne: TsneConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    /// Run directory name; defaults to `<command>-<UTC timestamp>`.
    pub run_name: Option<String>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub ablation: AblationConfig,
    pub train: TrainRunConfig,
    pub eval: EvalConfig,
    pub cv: CvConfig,
    pub locexp: LocExpConfig,
    pub introspect: IntrospectConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            out_dir: PathBuf::from("out"),
            run_name: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            ablation: AblationConfig::FULL,
            train: TrainRunConfig::default(),
            eval: EvalConfig::default(),
            cv: CvConfig::default(),
            locexp: LocExpConfig::default(),
            introspect: IntrospectConfig::default(),
        }
    }
}

/// Every configuration key with its default, for `--help`.
pub const CONFIG_REFERENCE: &str = "\
Configuration file (TOML). Command-line flags override file values.

  seed = <integer>                    required here or via --seed
  out_dir = \"out\"
  run_name = <string>                 default <command>-<UTC timestamp>

  [data]
  train = <path>                      time-series CSV: fips,date,<channels...>,score
  validation = <path>
  test = <path>
  statics = <path>                    statics CSV: fips,<features...>
  categorical_columns = [\"SQ1\", ..., \"SQ7\"]
  window = 180                        look-back days T
  target_start = \"anchor\"             or \"next_week\"
  cache_dir = <path>                  default <out_dir>/cache

  [model]
  lstm_layers = 2
  hidden_size = 490
  embed_dim = 27
  reduced_dim = 6
  ffnn_layers = 1
  ffnn_hidden = 64
  mlp_layers = 2
  mlp_hidden = 256
  dropout = 0.1
  embed_dropout = 0.4
  (input_channels, numeric_static_count and categorical_vocab_sizes are
   taken from the ingested data)

  [ablation]
  use_static = true
  use_timeseries = true
  use_attention = true

  [train]
  batch_size = 128
  epochs = 9
  shuffle = true
  max_lr = 7e-5
  base_lr = <max_lr / 10>
  cycle_epochs = 2.0                  triangular cycle length in epochs
  loss = \"mse\"                        or \"mae\"
  selection = \"best_validation\"       or \"last_epoch\"

  [train.optimizer]
  beta1 = 0.9
  beta2 = 0.999
  eps = 1e-8
  weight_decay = 0.01

  [eval]
  category_rule = \"round_half_up\"     or \"floor\", \"ceil\"
  checkpoint = <path>
  baseline_checkpoint = <path>
  reported_improvements = { MAE = 30.0, F1 = 9.0 }

  [cv]
  k = 5
  compare = \"TS\"                      one of HM, TS+Att, TS, SF+TS, SF

  [locexp]
  states = [\"IA\", \"MT\", \"OK\"]

  [introspect]
  checkpoint = <path>
  color_column = \"SQ1\"

  [introspect.tsne]
  perplexity = 100.0
  iterations = 1000
  exaggeration = 12.0
  exaggeration_iterations = 250
  initial_momentum = 0.5
  final_momentum = 0.8
  learning_rate = <N / 12>
";

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("invalid configuration: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self)
            .map_err(|e| Error::Config(format!("cannot serialise configuration: {e}")))
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("a seed is required (config `seed` or --seed)".into()))
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.data
            .cache_dir
            .clone()
            .unwrap_or_else(|| self.out_dir.join("cache"))
    }
}

/// Creates the run directory and echoes the configuration into it.
pub fn prepare_run_dir(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    cfg.seed()?;
    let name = match &cfg.run_name {
        Some(n) => n.clone(),
        None => {
            let secs = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs() as i64)
                .unwrap_or(0);
            let stamp = chrono::DateTime::from_timestamp(secs, 0)
                .map(|t| t.format("%Y%m%dT%H%M%SZ").to_string())
                .unwrap_or_else(|| secs.to_string());
            format!("{command}-{stamp}")
        }
    };
    let dir = cfg.out_dir.join(name);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(dir)
}

/// Result of one command.
#[derive(Clone, Debug)]
pub struct CommandOutput {
    pub dir: PathBuf,
    pub text: String,
}

fn emit(dir: &Path, stem: &str, tables: &[&Table], text: &mut String) -> Result<()> {
    let mut rendered = String::new();
    for (i, t) in tables.iter().enumerate() {
        let name = if tables.len() == 1 {
            format!("{stem}.csv")
        } else {
            format!("{stem}_{i}.csv")
        };
        t.write_csv(dir.join(name))?;
        rendered.push_str(&t.render());
        rendered.push('\n');
    }
    fs::write(dir.join(format!("{stem}.txt")), &rendered)?;
    text.push_str(&rendered);
    Ok(())
}

// ── ingest ─────────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub channels: Vec<String>,
    pub numeric_columns: Vec<String>,
    pub categorical_columns: Vec<String>,
    pub vocab_sizes: Vec<usize>,
    pub window: usize,
    pub splits: BTreeMap<String, usize>,
}

pub const SPLITS: [&str; 3] = ["train", "validation", "test"];

/// Builds raw samples for every configured split, fits the normalizer on
/// the training split and writes the cache directory.
pub fn cmd_ingest(cfg: &RunConfig) -> Result<CommandOutput> {
    let train_path = cfg
        .data
        .train
        .as_ref()
        .ok_or_else(|| Error::Config("data.train is not set".into()))?;
    let statics_path = cfg
        .data
        .statics
        .as_ref()
        .ok_or_else(|| Error::Config("data.statics is not set".into()))?;
    let statics = data::load_statics(statics_path, &cfg.data.categorical_columns)?;
    let opts = SampleOptions {
        window: cfg.data.window,
        target_start: cfg.data.target_start,
    };
    let dir = cfg.cache_dir();
    fs::create_dir_all(&dir)?;

    let mut text = String::new();
    let mut channels: Option<Vec<String>> = None;
    let mut splits = BTreeMap::new();
    let mut train_samples = Vec::new();
    for (split, path) in SPLITS.iter().zip([
        Some(train_path),
        cfg.data.validation.as_ref(),
        cfg.data.test.as_ref(),
    ]) {
        let Some(path) = path else { continue };
        let series = data::load_timeseries(path)?;
        match &channels {
            None => channels = Some(series.channels.clone()),
            Some(c) if *c != series.channels => {
                return Err(Error::Schema(format!(
                    "{split} split has channels {:?}, expected {c:?}",
                    series.channels
                )))
            }
            _ => {}
        }
        let (samples, drops) = data::build_samples(&series, &statics, opts)?;
        text.push_str(&format!("{split}: {}\n", drops.summary()));
        write_samples(dir.join(format!("{split}.bin")), &samples)?;
        splits.insert(split.to_string(), samples.len());
        if *split == "train" {
            train_samples = samples;
        }
    }
    let channels = channels.unwrap_or_default();
    let normalizer = Normalizer::fit(&train_samples, &channels, &statics.numeric_columns)?;
    normalizer.write(dir.join("normalizer.csv"))?;
    statics.encoder.write(dir.join("dictionary.csv"))?;
    let manifest = Manifest {
        channels,
        numeric_columns: statics.numeric_columns.clone(),
        categorical_columns: statics.categorical_columns.clone(),
        vocab_sizes: statics.encoder.vocab_sizes(),
        window: cfg.data.window,
        splits,
    };
    let manifest_text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("manifest.toml"), manifest_text)?;
    fs::write(dir.join("drops.txt"), &text)?;
    Ok(CommandOutput { dir, text })
}

/// Raw (unnormalised) samples and metadata read back from a cache.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub normalizer: Normalizer,
    pub encoder: CategoricalEncoder,
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join("manifest.toml");
        let text = fs::read_to_string(&manifest_path).map_err(|e| {
            Error::Data(format!(
                "no ingested dataset at {} ({e}); run `ingest` first",
                dir.display()
            ))
        })?;
        let manifest: Manifest =
            toml::from_str(&text).map_err(|e| Error::Format(format!("bad manifest: {e}")))?;
        let split = |name: &str| -> Result<Vec<Sample>> {
            if manifest.splits.contains_key(name) {
                read_samples(dir.join(format!("{name}.bin")))
            } else {
                Ok(Vec::new())
            }
        };
        Ok(Self {
            normalizer: Normalizer::read(dir.join("normalizer.csv"))?,
            encoder: CategoricalEncoder::read(dir.join("dictionary.csv"))?,
            train: split("train")?,
            validation: split("validation")?,
            test: split("test")?,
            manifest,
        })
    }

    /// Held-out evaluation split: test if present, else validation.
    pub fn eval_split(&self) -> Result<&[Sample]> {
        if !self.test.is_empty() {
            Ok(&self.test)
        } else if !self.validation.is_empty() {
            Ok(&self.validation)
        } else {
            Err(Error::Data(
                "dataset has neither a test nor a validation split".into(),
            ))
        }
    }
}

fn normalized(samples: &[Sample], n: &Normalizer) -> Vec<Sample> {
    let mut out = samples.to_vec();
    n.apply(&mut out);
    out
}

fn fit_normalizer(samples: &[Sample], manifest: &Manifest) -> Result<Normalizer> {
    Normalizer::fit(samples, &manifest.channels, &manifest.numeric_columns)
}

/// Model configuration with data-dependent widths filled in.
pub fn resolve_model_config(base: &ModelConfig, manifest: &Manifest) -> ModelConfig {
    ModelConfig {
        input_channels: 2 * manifest.channels.len(),
        numeric_static_count: manifest.numeric_columns.len(),
        categorical_vocab_sizes: manifest.vocab_sizes.clone(),
        ..base.clone()
    }
}

fn train_one(
    cfg: &RunConfig,
    manifest: &Manifest,
    ablation: AblationConfig,
    train: &[Sample],
    val: &[Sample],
    seed: u64,
    checkpoint_dir: Option<PathBuf>,
) -> Result<(HybridModel, FitOutcome)> {
    let mut model = HybridModel::build(resolve_model_config(&cfg.model, manifest), ablation, seed)?;
    let tc = TrainRunConfig {
        checkpoint_dir,
        ..cfg.train.clone()
    };
    let outcome = fit(&mut model, train, val, &tc, None, seed)?;
    Ok((model, outcome))
}

// ── train / eval ───────────────────────────────────────────────────────────

pub fn cmd_train(cfg: &RunConfig) -> Result<CommandOutput> {
    let seed = cfg.seed()?;
    let ds = Dataset::load(cfg.cache_dir())?;
    let dir = prepare_run_dir(cfg, "train")?;
    let train = normalized(&ds.train, &ds.normalizer);
    let val = normalized(&ds.validation, &ds.normalizer);
    let (model, outcome) = train_one(
        cfg,
        &ds.manifest,
        cfg.ablation,
        &train,
        &val,
        seed,
        Some(dir.clone()),
    )?;
    write_history(dir.join("history.csv"), &outcome.history)?;
    save_checkpoint(&model, dir.join("model.ckpt"))?;
    let mut text = format!(
        "trained {} for {} epochs; selected epoch {}\n",
        cfg.ablation.name(),
        cfg.train.epochs,
        outcome.selected_epoch
    );
    if let Ok(eval_set) = ds.eval_split() {
        let report = evaluate(
            &model,
            &normalized(eval_set, &ds.normalizer),
            cfg.eval.category_rule,
        )?;
        let table = report::results_table("Held-out results", &[(cfg.ablation.name(), &report)]);
        emit(&dir, "metrics", &[&table], &mut text)?;
    }
    Ok(CommandOutput { dir, text })
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<CommandOutput> {
    cfg.seed()?;
    let ckpt = cfg
        .eval
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("eval.checkpoint is not set".into()))?;
    let ds = Dataset::load(cfg.cache_dir())?;
    let dir = prepare_run_dir(cfg, "eval")?;
    let eval_set = normalized(ds.eval_split()?, &ds.normalizer);
    let model = load_checkpoint(ckpt)?;
    let report = evaluate(&model, &eval_set, cfg.eval.category_rule)?;
    let mut rows = vec![(model.ablation().name(), &report)];
    let mut text = String::new();
    let baseline_report;
    if let Some(base) = &cfg.eval.baseline_checkpoint {
        let baseline = load_checkpoint(base)?;
        baseline_report = evaluate(&baseline, &eval_set, cfg.eval.category_rule)?;
        rows.insert(
            0,
            (
                format!("baseline ({})", baseline.ablation().name()),
                &baseline_report,
            ),
        );
        let mut improvements = headline_improvements(&baseline_report, &report)?;
        for imp in &mut improvements {
            imp.reported = cfg.eval.reported_improvements.get(&imp.metric).copied();
        }
        let table = report::improvement_table(&improvements);
        emit(&dir, "improvements", &[&table], &mut text)?;
        for imp in &improvements {
            text.push_str(&imp.describe());
            text.push('\n');
        }
    }
    let table = report::results_table("Held-out results", &rows);
    emit(&dir, "metrics", &[&table], &mut text)?;
    Ok(CommandOutput { dir, text })
}

/// Computed improvements for explicit metric values, each checked against
/// an optional reported figure.
pub fn improvements_from_values(
    baseline: &MetricsReport,
    candidate: &MetricsReport,
    reported: &BTreeMap<String, f64>,
) -> Result<Vec<Improvement>> {
    let mut rows = headline_improvements(baseline, candidate)?;
    for r in &mut rows {
        r.reported = reported.get(&r.metric).copied();
    }
    Ok(rows)
}

// ── ablation ───────────────────────────────────────────────────────────────

pub fn cmd_ablate(cfg: &RunConfig) -> Result<CommandOutput> {
    let seed = cfg.seed()?;
    let ds = Dataset::load(cfg.cache_dir())?;
    let dir = prepare_run_dir(cfg, "ablate")?;
    let train = normalized(&ds.train, &ds.normalizer);
    let val = normalized(&ds.validation, &ds.normalizer);
    let eval_set = normalized(ds.eval_split()?, &ds.normalizer);
    let mut reports = Vec::new();
    for (name, ablation) in AblationConfig::TABLE {
        log::info!("ablation setting {name}");
        let sub = dir.join(name.replace('+', "_"));
        let (model, outcome) = train_one(
            cfg,
            &ds.manifest,
            ablation,
            &train,
            &val,
            seed,
            Some(sub.clone()),
        )?;
        write_history(sub.join("history.csv"), &outcome.history)?;
        reports.push((
            name.to_string(),
            evaluate(&model, &eval_set, cfg.eval.category_rule)?,
        ));
    }
    let rows: Vec<(String, &MetricsReport)> = reports.iter().map(|(n, r)| (n.clone(), r)).collect();
    let table = report::results_table("Ablation study", &rows);
    let mut text = String::new();
    emit(&dir, "ablation", &[&table], &mut text)?;
    Ok(CommandOutput { dir, text })
}

// ── cross-validation ───────────────────────────────────────────────────────

pub fn cmd_cv(cfg: &RunConfig) -> Result<CommandOutput> {
    let seed = cfg.seed()?;
    let compare = AblationConfig::by_name(&cfg.cv.compare)
        .ok_or_else(|| Error::Config(format!("unknown cv.compare preset {:?}", cfg.cv.compare)))?;
    let ds = Dataset::load(cfg.cache_dir())?;
    let dir = prepare_run_dir(cfg, "cv")?;
    let pool: Vec<Sample> = ds.train.iter().chain(&ds.validation).cloned().collect();
    let main_name = cfg.ablation.name();
    let compare_name = compare.name();
    let mut other = FoldResults::default();
    let (main, _) = cross_validate(&pool, cfg.cv.k, seed, |fold, train, val| {
        let n = fit_normalizer(train, &ds.manifest)?;
        let (train, val) = (normalized(train, &n), normalized(val, &n));
        let fold_dir = dir.join(format!("fold{}", fold + 1));
        let fold_seed = seed.wrapping_add(fold as u64);
        let (m, _) = train_one(
            cfg,
            &ds.manifest,
            cfg.ablation,
            &train,
            &[],
            fold_seed,
            None,
        )?;
        let (b, _) = train_one(cfg, &ds.manifest, compare, &train, &[], fold_seed, None)?;
        fs::create_dir_all(&fold_dir)?;
        save_checkpoint(&m, fold_dir.join("main.ckpt"))?;
        save_checkpoint(&b, fold_dir.join("compare.ckpt"))?;
        other.push(&evaluate(&b, &val, cfg.eval.category_rule)?);
        evaluate(&m, &val, cfg.eval.category_rule)
    })?;
    let folds = report::cv_table(&compare_name, &other, &main_name, &main)?;
    let test = |metric: &str, a: &[f64], b: &[f64]| match paired_t_test(a, b) {
        Ok(r) => Ok(Some(r)),
        Err(Error::DegenerateTest(msg)) => {
            log::warn!("{metric}: {msg}");
            Ok(None)
        }
        Err(e) => Err(e),
    };
    let tests = vec![
        ("MAE", test("MAE", &other.mae, &main.mae)?),
        ("RMSE", test("RMSE", &other.rmse, &main.rmse)?),
        ("F1", test("F1", &other.f1, &main.f1)?),
    ];
    let ttest = report::ttest_table(&tests);
    let mut text = String::new();
    emit(&dir, "cv_folds", &[&folds], &mut text)?;
    emit(&dir, "cv_ttest", &[&ttest], &mut text)?;
    Ok(CommandOutput { dir, text })
}

// ── location experiment ────────────────────────────────────────────────────

pub fn cmd_locexp(cfg: &RunConfig) -> Result<CommandOutput> {
    let seed = cfg.seed()?;
    let ds = Dataset::load(cfg.cache_dir())?;
    let dir = prepare_run_dir(cfg, "locexp")?;
    let states: Vec<(String, String)> = cfg
        .locexp
        .states
        .iter()
        .map(|s| {
            state_prefix(s)
                .map(|p| (s.clone(), p.to_string()))
                .ok_or_else(|| Error::Config(format!("unknown state {s:?}")))
        })
        .collect::<Result<_>>()?;
    let eval_raw = ds.eval_split()?;

    let mut results = Vec::new();
    let all_train = normalized(&ds.train, &ds.normalizer);
    let all_val = normalized(&ds.validation, &ds.normalizer);
    let (agnostic, _) = train_one(
        cfg,
        &ds.manifest,
        cfg.ablation,
        &all_train,
        &all_val,
        seed,
        Some(dir.join("all")),
    )?;
    for (state, prefix) in &states {
        let p = [prefix.clone()];
        let train = filter_by_state(&ds.train, &p);
        let val = filter_by_state(&ds.validation, &p);
        let test = filter_by_state(eval_raw, &p);
        if train.is_empty() || test.is_empty() {
            return Err(Error::Data(format!(
                "state {state} has no training or evaluation samples"
            )));
        }
        let n = fit_normalizer(&train, &ds.manifest)?;
        let (specific, _) = train_one(
            cfg,
            &ds.manifest,
            cfg.ablation,
            &normalized(&train, &n),
            &normalized(&val, &n),
            seed,
            Some(dir.join(state)),
        )?;
        results.push(LocationResult {
            state: state.clone(),
            scope: TrainScope::Specific,
            report: evaluate(&specific, &normalized(&test, &n), cfg.eval.category_rule)?,
        });
        results.push(LocationResult {
            state: state.clone(),
            scope: TrainScope::Agnostic,
            report: evaluate(
                &agnostic,
                &normalized(&test, &ds.normalizer),
                cfg.eval.category_rule,
            )?,
        });
    }
    let names: Vec<String> = states.iter().map(|(s, _)| s.clone()).collect();
    let improvements = location_experiment_report(&results, &names)?;
    let mut text = String::new();
    emit(
        &dir,
        "location_weekly",
        &[&report::location_weekly_table(&results)],
        &mut text,
    )?;
    emit(
        &dir,
        "location_summary",
        &[&report::location_summary_table(&results)],
        &mut text,
    )?;
    emit(
        &dir,
        "location_improvement",
        &[&report::location_improvement_table(&improvements)],
        &mut text,
    )?;
    Ok(CommandOutput { dir, text })
}

// ── introspection ──────────────────────────────────────────────────────────

pub fn cmd_introspect(cfg: &RunConfig) -> Result<CommandOutput> {
    let seed = cfg.seed()?;
    let ckpt = cfg
        .introspect
        .checkpoint
        .as_ref()
        .or(cfg.eval.checkpoint.as_ref())
        .ok_or_else(|| Error::Config("introspect.checkpoint is not set".into()))?;
    let model = load_checkpoint(ckpt)?;
    if !model.has_attention() && !model.has_embeddings() {
        return Err(Error::Config(
            "model has neither attention nor categorical embeddings".into(),
        ));
    }
    let ds = Dataset::load(cfg.cache_dir())?;
    let dir = prepare_run_dir(cfg, "introspect")?;
    let mut text = String::new();
    if model.has_attention() {
        let eval_set = normalized(ds.eval_split()?, &ds.normalizer);
        let profile = introspect::collect_attention(&model, &eval_set)?;
        figures::write_attention_csv(dir.join("attention_profile.csv"), &profile)?;
        fs::write(dir.join("attention.svg"), figures::attention_svg(&profile))?;
        let peak = profile
            .days
            .iter()
            .max_by(|a, b| a.mean.total_cmp(&b.mean))
            .map(|d| d.offset)
            .unwrap_or(0);
        text.push_str(&format!(
            "attention profile over {} samples; largest mean weight at day {peak}\n",
            eval_set.len()
        ));
    } else {
        log::warn!("model has no attention; skipping the attention profile");
    }
    if model.has_embeddings() {
        let all: Vec<Sample> = ds
            .train
            .iter()
            .chain(&ds.validation)
            .chain(&ds.test)
            .cloned()
            .collect();
        let export = introspect::export_embeddings(&model, &county_codes(&all), &ds.encoder)?;
        figures::write_embeddings_csv(dir.join("embeddings.csv"), &export)?;
        let result = tsne(&export.vectors(), &cfg.introspect.tsne, seed)?;
        figures::write_tsne_csv(dir.join("tsne.csv"), &export, &result)?;
        let color = export
            .columns
            .iter()
            .position(|c| *c == cfg.introspect.color_column)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown color column {:?}",
                    cfg.introspect.color_column
                ))
            })?;
        fs::write(
            dir.join("tsne.svg"),
            figures::tsne_svg(&export, &result, color)?,
        )?;
        text.push_str(&format!(
            "t-SNE over {} counties (perplexity {}), final KL {:.4}\n",
            export.rows.len(),
            result.perplexity,
            result.kl
        ));
    } else {
        log::warn!("model has no categorical embeddings; skipping t-SNE");
    }
    Ok(CommandOutput { dir, text })
}

/// Evaluates an arbitrary predictor on the held-out split of a cache.
pub fn evaluate_on_cache(
    cfg: &RunConfig,
    predictor: &dyn eval::Predictor,
) -> Result<MetricsReport> {
    let ds = Dataset::load(cfg.cache_dir())?;
    let eval_set = normalized(ds.eval_split()?, &ds.normalizer);
    evaluate(predictor, &eval_set, cfg.eval.category_rule)
}
