//! Parameterised building blocks of the hybrid model.
//!
//! Layers do not own tensors. Each one holds [`ParamId`]s into a
//! [`ParamStore`]; a forward pass binds the whole store onto a [`Graph`]
//! once and hands the resulting variables to every layer.

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Index of a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Tensor of `shape` drawn uniformly from `±sqrt(1/fan_in)`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut RngState,
    ) -> ParamId {
        let bound = (1.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform_in(-bound, bound)).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("shape/data agree");
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every tensor as a gradient-requiring leaf, in store order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.param(t.clone())).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Tanh,
}

/// `act(x · Wᵀ + b)` for a batch `x[B × in]`, with `W[out × in]`, `b[out]`.
#[derive(Clone, Debug)]
pub struct AffineLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl AffineLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut RngState,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[out_dim, in_dim], in_dim, rng);
        let bias = store.add_uniform(format!("{name}.bias"), &[out_dim], in_dim, rng);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
            activation,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != self.in_dim {
            return Err(shape_err!(
                "affine layer expects [B × {}], got {s:?}",
                self.in_dim
            ));
        }
        let z = g.matmul_bt(x, p[self.weight.0])?;
        let z = g.add(z, p[self.bias.0])?;
        Ok(match self.activation {
            Activation::None => z,
            Activation::Relu => g.relu(z),
            Activation::Tanh => g.tanh(z),
        })
    }
}

/// Lookup table for one categorical feature. Row 0 is the unknown code.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub weights: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        vocab_size: usize,
        dim: usize,
        rng: &mut RngState,
    ) -> Self {
        let weights = store.add_uniform(format!("{name}.weight"), &[vocab_size, dim], 1, rng);
        Self {
            weights,
            vocab_size,
            dim,
        }
    }

    /// Rows for `codes`, shape `[len × dim]`.
    pub fn embed(&self, g: &mut Graph, p: &[Var], codes: &[usize]) -> Result<Var> {
        g.gather_rows(p[self.weights.0], codes)
    }
}

/// Embeds each categorical column and concatenates the results, giving
/// `[B × f_d·z]` for `codes[b][feature]`.
pub fn embed_features(
    tables: &[EmbeddingTable],
    g: &mut Graph,
    p: &[Var],
    codes: &[Vec<usize>],
) -> Result<Var> {
    if tables.is_empty() {
        return Err(shape_err!("no embedding tables"));
    }
    let mut parts = Vec::with_capacity(tables.len());
    for (j, table) in tables.iter().enumerate() {
        let column: Vec<usize> = codes
            .iter()
            .map(|row| {
                row.get(j).copied().ok_or_else(|| {
                    shape_err!(
                        "sample has {} categorical codes, need {}",
                        row.len(),
                        tables.len()
                    )
                })
            })
            .collect::<Result<_>>()?;
        parts.push(table.embed(g, p, &column)?);
    }
    g.concat(&parts, 1)
}

/// Stack of relu affine layers reducing concatenated embeddings to `z′`.
#[derive(Clone, Debug)]
pub struct FfnnReducer {
    pub layers: Vec<AffineLayer>,
}

impl FfnnReducer {
    /// `depth` affine+relu layers; inner layers have width `hidden`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        depth: usize,
        rng: &mut RngState,
    ) -> Self {
        let mut layers = Vec::with_capacity(depth);
        let mut width = in_dim;
        for i in 0..depth {
            let out = if i + 1 == depth { out_dim } else { hidden };
            layers.push(AffineLayer::new(
                store,
                &format!("{name}.{i}"),
                width,
                out,
                Activation::Relu,
                rng,
            ));
            width = out;
        }
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        self.layers.iter().try_fold(x, |h, l| l.forward(g, p, h))
    }
}

/// Multi-layer perceptron: relu between layers, linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<AffineLayer>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        depth: usize,
        rng: &mut RngState,
    ) -> Self {
        let mut layers = Vec::with_capacity(depth);
        let mut width = in_dim;
        for i in 0..depth {
            let last = i + 1 == depth;
            let (out, act) = if last {
                (out_dim, Activation::None)
            } else {
                (hidden, Activation::Relu)
            };
            layers.push(AffineLayer::new(
                store,
                &format!("{name}.{i}"),
                width,
                out,
                act,
                rng,
            ));
            width = out;
        }
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        self.layers.iter().try_fold(x, |h, l| l.forward(g, p, h))
    }
}

/// Gate parameters of one LSTM layer, PyTorch layout: the `4h` rows are the
/// input, forget, cell-candidate and output gates in that order.
#[derive(Clone, Debug)]
pub struct LstmLayer {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input_size: usize,
    pub hidden_size: usize,
}

#[derive(Clone, Debug)]
pub struct LstmStack {
    pub layers: Vec<LstmLayer>,
    pub input_size: usize,
    pub hidden_size: usize,
    /// Dropout applied to the outputs of every layer except the last.
    pub dropout: f64,
}

/// Top-layer hidden states of an LSTM pass.
#[derive(Clone, Debug)]
pub struct LstmOutput {
    /// `[B × T × h]`
    pub states: Var,
    /// `h_T`, `[B × h]`
    pub last: Var,
}

impl LstmStack {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_size: usize,
        hidden_size: usize,
        num_layers: usize,
        dropout: f64,
        rng: &mut RngState,
    ) -> Self {
        let layers = (0..num_layers)
            .map(|l| {
                let inp = if l == 0 { input_size } else { hidden_size };
                LstmLayer {
                    w_ih: store.add_uniform(
                        format!("{name}.{l}.w_ih"),
                        &[4 * hidden_size, inp],
                        inp,
                        rng,
                    ),
                    w_hh: store.add_uniform(
                        format!("{name}.{l}.w_hh"),
                        &[4 * hidden_size, hidden_size],
                        hidden_size,
                        rng,
                    ),
                    bias: store.add_uniform(
                        format!("{name}.{l}.bias"),
                        &[4 * hidden_size],
                        hidden_size,
                        rng,
                    ),
                    input_size: inp,
                    hidden_size,
                }
            })
            .collect();
        Self {
            layers,
            input_size,
            hidden_size,
            dropout,
        }
    }

    /// Runs the stack over `x[B × T × M′]` from zero initial states.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &[Var],
        x: Var,
        training: bool,
        rng: &mut RngState,
    ) -> Result<LstmOutput> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 {
            return Err(shape_err!("lstm input must be [B × T × M′], got {s:?}"));
        }
        let (batch, steps, channels) = (s[0], s[1], s[2]);
        if steps == 0 {
            return Err(Error::EmptySequence("lstm input has no time steps".into()));
        }
        if channels != self.input_size {
            return Err(shape_err!(
                "lstm expects {} input channels, got {channels}",
                self.input_size
            ));
        }
        let mut inputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = g.slice(x, &[0..batch, t..t + 1, 0..channels])?;
            inputs.push(g.reshape(xt, &[batch, channels])?);
        }
        let h = self.hidden_size;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut outputs = Vec::with_capacity(steps);
            let mut prev: Option<(Var, Var)> = None;
            for &xt in &inputs {
                let mut gates = g.matmul_bt(xt, p[layer.w_ih.0])?;
                if let Some((h_prev, _)) = prev {
                    let rec = g.matmul_bt(h_prev, p[layer.w_hh.0])?;
                    gates = g.add(gates, rec)?;
                }
                let gates = g.add(gates, p[layer.bias.0])?;
                let gate =
                    |g: &mut Graph, k: usize| g.slice(gates, &[0..batch, k * h..(k + 1) * h]);
                let i = gate(g, 0)?;
                let f = gate(g, 1)?;
                let c_hat = gate(g, 2)?;
                let o = gate(g, 3)?;
                let i = g.sigmoid(i);
                let f = g.sigmoid(f);
                let c_hat = g.tanh(c_hat);
                let o = g.sigmoid(o);
                let mut c = g.mul(i, c_hat)?;
                if let Some((_, c_prev)) = prev {
                    let keep = g.mul(f, c_prev)?;
                    c = g.add(keep, c)?;
                }
                let tc = g.tanh(c);
                let ht = g.mul(o, tc)?;
                prev = Some((ht, c));
                outputs.push(ht);
            }
            inputs = if l + 1 < self.layers.len() {
                outputs
                    .into_iter()
                    .map(|o| g.dropout(o, self.dropout, training, rng))
                    .collect::<Result<_>>()?
            } else {
                outputs
            };
        }
        let last = *inputs.last().expect("steps > 0");
        let stacked = inputs
            .iter()
            .map(|&v| g.reshape(v, &[batch, 1, h]))
            .collect::<Result<Vec<_>>>()?;
        let states = g.concat(&stacked, 1)?;
        Ok(LstmOutput { states, last })
    }
}

/// Scalar-score attention over time: `s_t = W·h_t + b`,
/// `α = softmax(s)` over `t`, context `Σ_t α_t h_t`.
#[derive(Clone, Debug)]
pub struct AttentionHead {
    pub score: AffineLayer,
}

impl AttentionHead {
    pub fn new(store: &mut ParamStore, name: &str, hidden_size: usize, rng: &mut RngState) -> Self {
        Self {
            score: AffineLayer::new(
                store,
                &format!("{name}.score"),
                hidden_size,
                1,
                Activation::None,
                rng,
            ),
        }
    }

    /// Returns `(context [B × h], weights [B × T])` for `states[B × T × h]`.
    pub fn attend(&self, g: &mut Graph, p: &[Var], states: Var) -> Result<(Var, Var)> {
        let s = g.shape(states).to_vec();
        if s.len() != 3 {
            return Err(shape_err!("attention expects [B × T × h], got {s:?}"));
        }
        let (batch, steps, h) = (s[0], s[1], s[2]);
        if steps == 0 {
            return Err(Error::EmptySequence("attention over zero steps".into()));
        }
        let flat = g.reshape(states, &[batch * steps, h])?;
        let scores = self.score.forward(g, p, flat)?;
        let scores = g.reshape(scores, &[batch, steps])?;
        let alpha = g.softmax(scores, 1)?;
        let a3 = g.reshape(alpha, &[batch, 1, steps])?;
        let ctx = g.batch_matmul(a3, states)?;
        let ctx = g.reshape(ctx, &[batch, h])?;
        Ok((ctx, alpha))
    }
}
