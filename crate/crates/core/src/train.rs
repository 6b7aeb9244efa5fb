//! Optimisation: AdamW, a triangular cyclical learning rate, the epoch loop
//! with best-validation selection, and binary checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::metrics;
use crate::model::{loss, AblationConfig, Batch, HybridModel, LossKind, ModelConfig};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment buffers for every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, config: AdamWConfig) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One AdamW update. Decay is decoupled: `θ ← θ·(1 − lr·wd)` followed
    /// by the bias-corrected Adam step.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params.tensors()[i].shape() {
                return Err(Error::Shape(format!(
                    "gradient shape mismatch for {}",
                    params.name(i)
                )));
            }
            if g.has_nan() {
                return Err(Error::Numeric(format!(
                    "NaN gradient for parameter {}",
                    params.name(i)
                )));
            }
        }
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let decay = 1.0 - lr * weight_decay;
        for (i, theta) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, th) in theta.data_mut().iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *th *= decay;
                *th -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Triangular cyclical learning rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub max_lr: f64,
    pub cycle_length: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f64, max_lr: f64, cycle_length: usize) -> Result<Self> {
        if !(base_lr > 0.0 && base_lr <= max_lr && max_lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning-rate bounds need 0 < base ({base_lr}) <= max ({max_lr})"
            )));
        }
        if cycle_length < 2 {
            return Err(Error::Config(
                "cycle length must be at least 2 steps".into(),
            ));
        }
        Ok(Self {
            base_lr,
            max_lr,
            cycle_length,
        })
    }

    pub fn constant(lr: f64) -> Result<Self> {
        Self::new(lr, lr, 2)
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let x = (step % self.cycle_length) as f64 / self.cycle_length as f64;
        let tri = 1.0 - (2.0 * x - 1.0).abs();
        self.base_lr + (self.max_lr - self.base_lr) * tri
    }
}

/// Which epoch's parameters `fit` returns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    BestValidation,
    LastEpoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRunConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub shuffle: bool,
    pub max_lr: f64,
    /// Defaults to `max_lr / 10`.
    pub base_lr: Option<f64>,
    /// Cycle length in epochs.
    pub cycle_epochs: f64,
    pub loss: LossKind,
    pub selection: Selection,
    pub optimizer: AdamWConfig,
    /// Directory receiving `best.ckpt` and `final.ckpt`.
    #[serde(skip)]
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 9,
            shuffle: true,
            max_lr: 7e-5,
            base_lr: None,
            cycle_epochs: 2.0,
            loss: LossKind::Mse,
            selection: Selection::BestValidation,
            optimizer: AdamWConfig::default(),
            checkpoint_dir: None,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.cycle_epochs.is_nan() || self.cycle_epochs <= 0.0 {
            return Err(Error::Config("cycle_epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> Result<LrSchedule> {
        let cycle = ((self.cycle_epochs * steps_per_epoch as f64).round() as usize).max(2);
        LrSchedule::new(
            self.base_lr.unwrap_or(self.max_lr / 10.0),
            self.max_lr,
            cycle,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub train_loss: f64,
    pub val_mae: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub history: Vec<HistoryRow>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    /// 1-based epoch whose parameters the model holds on return.
    pub selected_epoch: usize,
    pub best_val_mae: Option<f64>,
}

/// Trains `model` in place. Shuffling and dropout draw from streams 1 and 2
/// of `seed`.
pub fn fit(
    model: &mut HybridModel,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainRunConfig,
    schedule: Option<LrSchedule>,
    seed: u64,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let schedule = match schedule {
        Some(s) => s,
        None => cfg.schedule(steps_per_epoch)?,
    };
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut shuffle_rng = RngState::stream(seed, 1);
    let mut dropout_rng = RngState::stream(seed, 2);
    let mut opt = OptimizerState::new(model.params(), cfg.optimizer);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::with_capacity(cfg.epochs * steps_per_epoch);
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            shuffle_rng.shuffle(&mut order);
        }
        let mut loss_sum = 0.0;
        let mut lr = schedule.lr_at(step);
        for idx in order.chunks(cfg.batch_size) {
            let chunk: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let batch = Batch::from_samples(&chunk)?;
            let targets = Batch::targets(&chunk)?;
            let mut pass = model.forward_graph(&batch, true, &mut dropout_rng)?;
            let y = pass.graph.constant(targets);
            let l = loss(&mut pass.graph, pass.predictions, y, cfg.loss)?;
            let value = pass.graph.value(l).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "training loss diverged at epoch {epoch}, step {step}{}",
                    match &cfg.checkpoint_dir {
                        Some(d) => format!("; last good checkpoint in {}", d.display()),
                        None => String::new(),
                    }
                )));
            }
            pass.graph.backward(l)?;
            lr = schedule.lr_at(step);
            opt.step(model.params_mut(), &pass.param_grads(), lr)?;
            step += 1;
            step_losses.push(value);
            loss_sum += value * chunk.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_mae = if val.is_empty() {
            None
        } else {
            let pred = model.predict(val, cfg.batch_size)?;
            let target: Vec<_> = val.iter().map(|s| s.target).collect();
            Some(metrics::mae(&pred, &target, None)?)
        };
        log::info!(
            "epoch {epoch}: train loss {train_loss:.6}{}",
            val_mae
                .map(|m| format!(", validation MAE {m:.6}"))
                .unwrap_or_default()
        );
        history.push(HistoryRow {
            epoch,
            step,
            lr,
            train_loss,
            val_mae,
        });
        if let Some(mae) = val_mae {
            if best.as_ref().is_none_or(|(b, _, _)| mae < *b) {
                best = Some((mae, epoch, model.params().tensors().to_vec()));
                if let Some(dir) = &cfg.checkpoint_dir {
                    save_checkpoint(model, dir.join("best.ckpt"))?;
                }
            }
        }
    }

    if let Some(dir) = &cfg.checkpoint_dir {
        save_checkpoint(model, dir.join("final.ckpt"))?;
    }
    let best_val_mae = best.as_ref().map(|(m, _, _)| *m);
    let mut selected_epoch = cfg.epochs;
    if let (Selection::BestValidation, Some((_, epoch, tensors))) = (cfg.selection, best) {
        model.params_mut().tensors_mut().clone_from_slice(&tensors);
        selected_epoch = epoch;
    }
    Ok(FitOutcome {
        history,
        step_losses,
        selected_epoch,
        best_val_mae,
    })
}

/// Writes `epoch,step,lr,train_loss,val_mae`.
pub fn write_history(path: impl AsRef<Path>, history: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "step", "lr", "train_loss", "val_mae"])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.step.to_string(),
            r.lr.to_string(),
            r.train_loss.to_string(),
            r.val_mae.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ── checkpoints ────────────────────────────────────────────────────────────

const CHECKPOINT_MAGIC: &[u8; 7] = b"HMCKPT1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    ablation: AblationConfig,
    model: ModelConfig,
}

/// Writes the model atomically (temporary file, then rename).
pub fn save_checkpoint(model: &HybridModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = CheckpointHeader {
        ablation: *model.ablation(),
        model: model.config().clone(),
    };
    let text = toml::to_string(&header)
        .map_err(|e| Error::Format(format!("cannot encode config: {e}")))?;
    let tmp = tmp_path(path);
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(text.len() as u64).to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        let params = model.params();
        w.write_all(&(params.len() as u64).to_le_bytes())?;
        for (name, t) in params.names().iter().zip(params.tensors()) {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u64).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        w.get_ref().sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<HybridModel> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 7];
    read_exact(&mut r, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(
            "not a model checkpoint (bad magic or version)".into(),
        ));
    }
    let len = read_len(&mut r, 1 << 20)?;
    let mut text = vec![0u8; len];
    read_exact(&mut r, &mut text)?;
    let text = String::from_utf8(text)
        .map_err(|_| Error::Format("checkpoint config is not UTF-8".into()))?;
    let header: CheckpointHeader =
        toml::from_str(&text).map_err(|e| Error::Format(format!("bad checkpoint config: {e}")))?;
    let mut model = HybridModel::build(header.model, header.ablation, 0)
        .map_err(|e| Error::Format(format!("checkpoint config is invalid: {e}")))?;
    let count = read_len(&mut r, 1 << 20)?;
    if count != model.params().len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} tensors, model expects {}",
            model.params().len()
        )));
    }
    for i in 0..count {
        let name_len = read_len(&mut r, 4096)?;
        let mut name = vec![0u8; name_len];
        read_exact(&mut r, &mut name)?;
        if name != model.params().name(i).as_bytes() {
            return Err(Error::Format(format!(
                "tensor {i} is {:?}, expected {}",
                String::from_utf8_lossy(&name),
                model.params().name(i)
            )));
        }
        let rank = read_len(&mut r, 8)?;
        let shape = (0..rank)
            .map(|_| read_len(&mut r, 1 << 32))
            .collect::<Result<Vec<_>>>()?;
        let expected = model.params().tensors()[i].shape();
        if shape != expected {
            return Err(Error::Format(format!(
                "tensor {} has shape {shape:?}, expected {expected:?}",
                model.params().name(i)
            )));
        }
        let target = &mut model.params_mut().tensors_mut()[i];
        for v in target.data_mut() {
            let mut b = [0u8; 8];
            read_exact(&mut r, &mut b)?;
            *v = f64::from_le_bytes(b);
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format(
            "trailing bytes after checkpoint payload".into(),
        ));
    }
    Ok(model)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated checkpoint".into()),
        _ => Error::Io(e),
    })
}

fn read_len(r: &mut impl Read, max: u64) -> Result<usize> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    let v = u64::from_le_bytes(b);
    if v > max {
        return Err(Error::Format(format!(
            "implausible length {v} in checkpoint"
        )));
    }
    Ok(v as usize)
}
