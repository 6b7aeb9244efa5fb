//! The hybrid forecasting model and its ablation switches.
//!
//! Full path for one sample:
//!
//! ```text
//! s_d ─ E ─ concat ─ dropout ─ F ─ e′ ─────────────┐
//! x ─ LSTM ─ {h_t} ─ attention ─ h̃ ────────────────┼─ [h̃, h_T, e′, s_n] ─ dropout ─ MLP ─ ŷ ∈ R⁶
//!            └──────────────────── h_T ────────────┤
//! s_n ─────────────────────────────────────────────┘
//! ```

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::Sample;
use crate::error::{shape_err, Error, Result};
use crate::layers::{
    embed_features, AttentionHead, EmbeddingTable, FfnnReducer, LstmStack, Mlp, ParamStore,
};
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::HORIZON;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub lstm_layers: usize,
    pub hidden_size: usize,
    pub embed_dim: usize,
    pub reduced_dim: usize,
    pub ffnn_layers: usize,
    pub ffnn_hidden: usize,
    pub mlp_layers: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
    pub embed_dropout: f64,
    /// `M′ = 2M`: current-year plus previous-year channels.
    pub input_channels: usize,
    pub numeric_static_count: usize,
    /// Vocabulary size per categorical feature, including the unknown slot.
    pub categorical_vocab_sizes: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lstm_layers: 2,
            hidden_size: 490,
            embed_dim: 27,
            reduced_dim: 6,
            ffnn_layers: 1,
            ffnn_hidden: 64,
            mlp_layers: 2,
            mlp_hidden: 256,
            dropout: 0.1,
            embed_dropout: 0.4,
            input_channels: 40,
            numeric_static_count: 0,
            categorical_vocab_sizes: Vec::new(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lstm_layers", self.lstm_layers),
            ("hidden_size", self.hidden_size),
            ("embed_dim", self.embed_dim),
            ("reduced_dim", self.reduced_dim),
            ("ffnn_layers", self.ffnn_layers),
            ("ffnn_hidden", self.ffnn_hidden),
            ("mlp_layers", self.mlp_layers),
            ("mlp_hidden", self.mlp_hidden),
            ("input_channels", self.input_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.reduced_dim >= self.embed_dim {
            return Err(Error::Config(format!(
                "reduced_dim ({}) must be smaller than embed_dim ({})",
                self.reduced_dim, self.embed_dim
            )));
        }
        if !self.input_channels.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "input_channels ({}) must be 2·M (current and previous year)",
                self.input_channels
            )));
        }
        if self.categorical_vocab_sizes.iter().any(|&v| v < 2) {
            return Err(Error::Config(
                "every categorical vocabulary needs the unknown slot plus one label".into(),
            ));
        }
        for (name, p) in [
            ("dropout", self.dropout),
            ("embed_dropout", self.embed_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn categorical_count(&self) -> usize {
        self.categorical_vocab_sizes.len()
    }
}

/// Which input paths are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub use_static: bool,
    pub use_timeseries: bool,
    pub use_attention: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self::FULL
    }
}

impl AblationConfig {
    pub const FULL: Self = Self::new(true, true, true);

    pub const fn new(use_static: bool, use_timeseries: bool, use_attention: bool) -> Self {
        Self {
            use_static,
            use_timeseries,
            use_attention,
        }
    }

    /// The five ablation rows, in reporting order.
    pub const TABLE: [(&'static str, AblationConfig); 5] = [
        ("HM", Self::new(true, true, true)),
        ("TS+Att", Self::new(false, true, true)),
        ("TS", Self::new(false, true, false)),
        ("SF+TS", Self::new(true, true, false)),
        ("SF", Self::new(true, false, false)),
    ];

    pub fn validate(&self) -> Result<()> {
        if !self.use_static && !self.use_timeseries {
            return Err(Error::Config("ablation disables every input path".into()));
        }
        if self.use_attention && !self.use_timeseries {
            return Err(Error::Config(
                "attention requires the time-series path".into(),
            ));
        }
        Ok(())
    }

    pub fn by_name(name: &str) -> Option<Self> {
        Self::TABLE
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, c)| *c)
    }

    pub fn name(&self) -> String {
        Self::TABLE
            .iter()
            .find(|(_, c)| c == self)
            .map(|(n, _)| n.to_string())
            .unwrap_or_else(|| "custom".into())
    }
}

/// Model inputs for one batch. Fields not needed by the active paths may be
/// absent.
#[derive(Clone, Debug, Default)]
pub struct Batch {
    pub size: usize,
    /// `[B × T × M′]`
    pub x: Option<Tensor>,
    /// `[B × f_n]`
    pub numeric: Option<Tensor>,
    /// `codes[b][feature]`
    pub categorical: Option<Vec<Vec<usize>>>,
}

impl Batch {
    pub fn from_samples<S: std::borrow::Borrow<Sample>>(samples: &[S]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Data("empty batch".into()))?
            .borrow();
        let (steps, channels) = (first.window, first.channels);
        let f_n = first.numeric.len();
        let mut x = Vec::with_capacity(samples.len() * steps * channels);
        let mut numeric = Vec::with_capacity(samples.len() * f_n);
        let mut categorical = Vec::with_capacity(samples.len());
        for s in samples {
            let s = s.borrow();
            if s.window != steps || s.channels != channels || s.numeric.len() != f_n {
                return Err(Error::Data(format!(
                    "sample {} {} has a different layout from the rest of the batch",
                    s.fips, s.anchor
                )));
            }
            x.extend_from_slice(&s.x);
            numeric.extend_from_slice(&s.numeric);
            categorical.push(s.categorical.clone());
        }
        let b = samples.len();
        Ok(Self {
            size: b,
            x: Some(Tensor::new(vec![b, steps, channels], x)?),
            numeric: if f_n > 0 {
                Some(Tensor::new(vec![b, f_n], numeric)?)
            } else {
                None
            },
            categorical: Some(categorical),
        })
    }

    pub fn targets<S: std::borrow::Borrow<Sample>>(samples: &[S]) -> Result<Tensor> {
        let data = samples.iter().flat_map(|s| s.borrow().target).collect();
        Tensor::new(vec![samples.len(), HORIZON], data)
    }
}

/// Values produced by a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchOutput {
    /// `[B × 6]`
    pub predictions: Tensor,
    /// `[B × T]`, present when attention is active.
    pub attention: Option<Tensor>,
    /// `[B × z′]`, present when the categorical path is active.
    pub reduced_embeddings: Option<Tensor>,
}

/// A recorded forward pass, ready for a backward call.
pub struct ForwardPass {
    pub graph: Graph,
    /// Parameter leaves, in store order.
    pub params: Vec<Var>,
    pub predictions: Var,
    pub attention: Option<Var>,
    pub reduced_embeddings: Option<Var>,
}

impl ForwardPass {
    pub fn output(&self) -> BatchOutput {
        BatchOutput {
            predictions: self.graph.value(self.predictions).clone(),
            attention: self.attention.map(|v| self.graph.value(v).clone()),
            reduced_embeddings: self.reduced_embeddings.map(|v| self.graph.value(v).clone()),
        }
    }

    /// Gradients of the last backward root, one per parameter.
    pub fn param_grads(&self) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|&v| {
                self.graph
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.graph.shape(v)))
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct HybridModel {
    config: ModelConfig,
    ablation: AblationConfig,
    params: ParamStore,
    embeddings: Vec<EmbeddingTable>,
    reducer: Option<FfnnReducer>,
    lstm: Option<LstmStack>,
    attention: Option<AttentionHead>,
    mlp: Mlp,
}

impl HybridModel {
    /// Builds a model with parameters initialised from `seed`.
    pub fn build(config: ModelConfig, ablation: AblationConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        ablation.validate()?;
        let mut rng = RngState::stream(seed, 0);
        let mut params = ParamStore::new();
        let mut embeddings = Vec::new();
        let mut reducer = None;
        if ablation.use_static && config.categorical_count() > 0 {
            for (j, &vocab) in config.categorical_vocab_sizes.iter().enumerate() {
                embeddings.push(EmbeddingTable::new(
                    &mut params,
                    &format!("embed.{j}"),
                    vocab,
                    config.embed_dim,
                    &mut rng,
                ));
            }
            reducer = Some(FfnnReducer::new(
                &mut params,
                "ffnn",
                config.categorical_count() * config.embed_dim,
                config.ffnn_hidden,
                config.reduced_dim,
                config.ffnn_layers,
                &mut rng,
            ));
        }
        let mut lstm = None;
        let mut attention = None;
        if ablation.use_timeseries {
            lstm = Some(LstmStack::new(
                &mut params,
                "lstm",
                config.input_channels,
                config.hidden_size,
                config.lstm_layers,
                config.dropout,
                &mut rng,
            ));
            if ablation.use_attention {
                attention = Some(AttentionHead::new(
                    &mut params,
                    "attention",
                    config.hidden_size,
                    &mut rng,
                ));
            }
        }
        let width = Self::mlp_width(&config, &ablation);
        if width == 0 {
            return Err(Error::Config(
                "model has no inputs for its output MLP".into(),
            ));
        }
        let mlp = Mlp::new(
            &mut params,
            "mlp",
            width,
            config.mlp_hidden,
            HORIZON,
            config.mlp_layers,
            &mut rng,
        );
        Ok(Self {
            config,
            ablation,
            params,
            embeddings,
            reducer,
            lstm,
            attention,
            mlp,
        })
    }

    /// Width of `x′` for the given configuration.
    pub fn mlp_width(config: &ModelConfig, ablation: &AblationConfig) -> usize {
        let mut w = 0;
        if ablation.use_timeseries {
            w += if ablation.use_attention {
                2 * config.hidden_size
            } else {
                config.hidden_size
            };
        }
        if ablation.use_static {
            if config.categorical_count() > 0 {
                w += config.reduced_dim;
            }
            w += config.numeric_static_count;
        }
        w
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn ablation(&self) -> &AblationConfig {
        &self.ablation
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn input_width(&self) -> usize {
        self.mlp.in_dim()
    }

    pub fn has_attention(&self) -> bool {
        self.attention.is_some()
    }

    pub fn has_embeddings(&self) -> bool {
        self.reducer.is_some()
    }

    /// Fails unless the model was built with `expected`.
    pub fn ensure_ablation(&self, expected: &AblationConfig) -> Result<()> {
        if &self.ablation != expected {
            return Err(Error::Config(format!(
                "model was built as {:?} but {:?} was requested",
                self.ablation, expected
            )));
        }
        Ok(())
    }

    /// Records a forward pass on a fresh graph.
    ///
    /// Random draws happen only in training mode, in the order: embedding
    /// dropout, inter-layer LSTM dropout, `x′` dropout.
    pub fn forward_graph(
        &self,
        batch: &Batch,
        training: bool,
        rng: &mut RngState,
    ) -> Result<ForwardPass> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let (predictions, attention, reduced_embeddings) =
            self.forward_on(&mut g, &p, batch, training, rng)?;
        Ok(ForwardPass {
            graph: g,
            params: p,
            predictions,
            attention,
            reduced_embeddings,
        })
    }

    /// Records a forward pass on `g` with parameters `p` (one variable per
    /// store entry, in store order). Returns predictions, attention weights
    /// and reduced embeddings.
    pub fn forward_on(
        &self,
        g: &mut Graph,
        p: &[Var],
        batch: &Batch,
        training: bool,
        rng: &mut RngState,
    ) -> Result<(Var, Option<Var>, Option<Var>)> {
        if p.len() != self.params.len() {
            return Err(shape_err!(
                "{} parameter variables for {} parameters",
                p.len(),
                self.params.len()
            ));
        }
        let mut parts = Vec::with_capacity(4);
        let mut attention = None;
        let mut reduced = None;

        if let (Some(lstm), true) = (&self.lstm, self.ablation.use_timeseries) {
            let x = batch
                .x
                .as_ref()
                .ok_or_else(|| Error::Data("batch lacks the time-series input".into()))?;
            check_rows(x, batch.size, "time series")?;
            let xv = g.constant(x.clone());
            let out = lstm.forward(g, p, xv, training, rng)?;
            if let Some(head) = &self.attention {
                let (ctx, alpha) = head.attend(g, p, out.states)?;
                parts.push(ctx);
                attention = Some(alpha);
            }
            parts.push(out.last);
        }

        if self.ablation.use_static {
            if let Some(reducer) = &self.reducer {
                let codes = batch
                    .categorical
                    .as_ref()
                    .ok_or_else(|| Error::Data("batch lacks categorical statics".into()))?;
                if codes.len() != batch.size {
                    return Err(Error::Data(
                        "categorical rows do not match batch size".into(),
                    ));
                }
                let e = embed_features(&self.embeddings, g, p, codes)?;
                let e = g.dropout(e, self.config.embed_dropout, training, rng)?;
                let e_red = reducer.forward(g, p, e)?;
                parts.push(e_red);
                reduced = Some(e_red);
            }
            if self.config.numeric_static_count > 0 {
                let s = batch
                    .numeric
                    .as_ref()
                    .ok_or_else(|| Error::Data("batch lacks numeric statics".into()))?;
                check_rows(s, batch.size, "numeric statics")?;
                if s.shape()[1] != self.config.numeric_static_count {
                    return Err(shape_err!(
                        "expected {} numeric statics, got {}",
                        self.config.numeric_static_count,
                        s.shape()[1]
                    ));
                }
                parts.push(g.constant(s.clone()));
            }
        }

        let joined = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat(&parts, 1)?
        };
        let joined = g.dropout(joined, self.config.dropout, training, rng)?;
        let predictions = self.mlp.forward(g, p, joined)?;
        Ok((predictions, attention, reduced))
    }

    pub fn forward(
        &self,
        batch: &Batch,
        training: bool,
        rng: &mut RngState,
    ) -> Result<BatchOutput> {
        Ok(self.forward_graph(batch, training, rng)?.output())
    }

    /// Eval-mode predictions for `samples`, processed in chunks of `batch_size`.
    pub fn predict(&self, samples: &[Sample], batch_size: usize) -> Result<Vec<[f64; HORIZON]>> {
        let mut out = Vec::with_capacity(samples.len());
        let mut rng = RngState::new(0);
        for chunk in samples.chunks(batch_size.max(1)) {
            let batch = Batch::from_samples(chunk)?;
            let o = self.forward(&batch, false, &mut rng)?;
            for r in 0..chunk.len() {
                let mut row = [0.0; HORIZON];
                row.copy_from_slice(o.predictions.row(r));
                out.push(row);
            }
        }
        Ok(out)
    }

    /// Eval-mode reduced embeddings `e′` for rows of categorical codes.
    pub fn reduced_embeddings(&self, codes: &[Vec<usize>]) -> Result<Tensor> {
        let reducer = self
            .reducer
            .as_ref()
            .ok_or_else(|| Error::Config("model has no categorical embedding path".into()))?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let e = embed_features(&self.embeddings, &mut g, &p, codes)?;
        let r = reducer.forward(&mut g, &p, e)?;
        Ok(g.value(r).clone())
    }

    /// Parameters of the attention score layer, if present.
    pub fn attention_head(&self) -> Option<&AttentionHead> {
        self.attention.as_ref()
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }
}

fn check_rows(t: &Tensor, rows: usize, what: &str) -> Result<()> {
    if t.shape().first() != Some(&rows) {
        return Err(Error::Data(format!(
            "{what} has shape {:?}, expected {rows} rows",
            t.shape()
        )));
    }
    Ok(())
}

/// Training loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Mse,
    Mae,
}

/// Mean squared (or absolute) error over all `B·6` entries.
pub fn loss(g: &mut Graph, predictions: Var, targets: Var, kind: LossKind) -> Result<Var> {
    if g.shape(predictions) != g.shape(targets) {
        return Err(shape_err!(
            "loss: predictions {:?} vs targets {:?}",
            g.shape(predictions),
            g.shape(targets)
        ));
    }
    let d = g.sub(predictions, targets)?;
    let e = match kind {
        LossKind::Mse => g.mul(d, d)?,
        LossKind::Mae => g.abs(d),
    };
    Ok(g.mean(e))
}
