//! LSTM layers and the dropout family used to regularize them: weight-drop on
//! the recurrent matrix, variational (locked) dropout, and embedding dropout.
//!
//! Masks are plain tensors sampled outside the graph and fed in as constants,
//! one set per training segment. Gate order in the packed `4H` dimension is
//! `[input, forget, cell, output]`.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::graph::{Graph, MaskMode, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameters of one LSTM layer: `w` is (4H × in), `u` is (4H × H), `b` is 4H.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmLayer {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmLayer {
    /// Weights uniform in `[-1/√H, 1/√H]`, forget-gate bias 1, other biases 0.
    pub fn init(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut uniform = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        let w = Tensor::from_parts(vec![4 * hidden, input], uniform(4 * hidden * input));
        let u = Tensor::from_parts(vec![4 * hidden, hidden], uniform(4 * hidden * hidden));
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        LstmLayer {
            w: store.add(format!("{prefix}.w"), w),
            u: store.add(format!("{prefix}.u"), u),
            b: store.add(format!("{prefix}.b"), Tensor::vector(b)),
            input,
            hidden,
        }
    }

    pub fn param_ids(&self) -> [ParamId; 3] {
        [self.w, self.u, self.b]
    }
}

/// Carried recurrent state, detached from any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        LstmState {
            h: Tensor::zeros(&[batch, hidden]),
            c: Tensor::zeros(&[batch, hidden]),
        }
    }
}

/// Graph outputs of one layer over a segment.
#[derive(Clone, Debug)]
pub struct LayerOutput {
    /// (T·B) × H, time-major: rows `t·B .. (t+1)·B` hold timestep `t`.
    pub output: Var,
    pub final_h: Var,
    pub final_c: Var,
    /// The input after the variational mask, as fed to every timestep.
    pub masked_input: Var,
}

/// Runs one layer over a time-major `(T·B) × in` input.
///
/// `input_mask` (B × in) is the variational mask for this layer's input and
/// is applied to every timestep; `weight_mask` (4H × H) is the weight-drop
/// mask applied once to `u` for the whole segment.
pub fn lstm_segment_forward(
    g: &mut Graph<'_>,
    layer: &LstmLayer,
    input: Var,
    batch: usize,
    state: &LstmState,
    input_mask: Option<&Tensor>,
    weight_mask: Option<&Tensor>,
) -> Result<LayerOutput> {
    let h_dim = layer.hidden;
    let in_shape = g.shape(input).to_vec();
    if in_shape.len() != 2 || in_shape[1] != layer.input || batch == 0 || !in_shape[0].is_multiple_of(batch) {
        return Err(Error::Dimension {
            op: "lstm_segment_forward",
            lhs: in_shape,
            rhs: vec![batch, layer.input],
        });
    }
    if state.h.shape() != [batch, h_dim] || state.c.shape() != [batch, h_dim] {
        return Err(Error::Dimension {
            op: "lstm_segment_forward(state)",
            lhs: state.h.shape().to_vec(),
            rhs: vec![batch, h_dim],
        });
    }
    let steps = in_shape[0] / batch;

    let x = match input_mask {
        Some(m) => {
            let mv = g.constant(m.clone());
            g.apply_mask(input, mv, MaskMode::RowTiled)?
        }
        None => input,
    };
    let w = g.param(layer.w);
    let b = g.param(layer.b);
    let u_raw = g.param(layer.u);
    let u = match weight_mask {
        Some(m) => {
            let mv = g.constant(m.clone());
            g.apply_mask(u_raw, mv, MaskMode::Elementwise)?
        }
        None => u_raw,
    };

    let projected = g.matmul_t(x, w)?;
    let projected = g.add_row_bias(projected, b)?;

    let mut h = g.constant(state.h.clone());
    let mut c = g.constant(state.c.clone());
    let mut outputs = Vec::with_capacity(steps);
    for t in 0..steps {
        let xt = g.slice_rows(projected, t * batch, (t + 1) * batch)?;
        let rec = g.matmul_t(h, u)?;
        let pre = g.add(xt, rec)?;
        let i_pre = g.slice_cols(pre, 0, h_dim)?;
        let f_pre = g.slice_cols(pre, h_dim, 2 * h_dim)?;
        let g_pre = g.slice_cols(pre, 2 * h_dim, 3 * h_dim)?;
        let o_pre = g.slice_cols(pre, 3 * h_dim, 4 * h_dim)?;
        let i_gate = g.sigmoid(i_pre)?;
        let f_gate = g.sigmoid(f_pre)?;
        let cand = g.tanh(g_pre)?;
        let o_gate = g.sigmoid(o_pre)?;
        let keep = g.mul(f_gate, c)?;
        let write = g.mul(i_gate, cand)?;
        c = g.add(keep, write)?;
        let squashed = g.tanh(c)?;
        h = g.mul(o_gate, squashed)?;
        outputs.push(h);
    }
    let output = g.concat_rows(&outputs)?;
    Ok(LayerOutput {
        output,
        final_h: h,
        final_c: c,
        masked_input: x,
    })
}

fn check_rate(p: f64, what: &str) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} rate must be in [0, 1), got {p}")))
    }
}

/// Inverted-dropout mask entries: 0 with probability `p`, else `1/(1-p)`.
fn bernoulli_entries(n: usize, p: f64, rng: &mut Rng) -> Vec<f64> {
    if p == 0.0 {
        return vec![1.0; n];
    }
    let keep = 1.0 / (1.0 - p);
    (0..n)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect()
}

/// Variational mask of shape `rows × cols`, reused at every timestep.
pub fn sample_variational_mask(rows: usize, cols: usize, p: f64, rng: &mut Rng) -> Result<Tensor> {
    check_rate(p, "variational dropout")?;
    Ok(Tensor::from_parts(vec![rows, cols], bernoulli_entries(rows * cols, p, rng)))
}

/// One keep/drop decision per vocabulary row.
pub fn sample_embedding_mask(vocab: usize, p: f64, rng: &mut Rng) -> Result<Tensor> {
    check_rate(p, "embedding dropout")?;
    Ok(Tensor::vector(bernoulli_entries(vocab, p, rng)))
}

/// DropConnect mask for a recurrent matrix of the given shape.
pub fn sample_weight_mask(shape: &[usize], p: f64, rng: &mut Rng) -> Result<Tensor> {
    check_rate(p, "weight drop")?;
    let n = shape.iter().product();
    Ok(Tensor::from_parts(shape.to_vec(), bernoulli_entries(n, p, rng)))
}

/// Weight-dropped copy of `u`. Evaluation mode returns `u` unchanged.
pub fn apply_weight_drop(u: &Tensor, p: f64, mode: Mode, rng: &mut Rng) -> Result<Tensor> {
    check_rate(p, "weight drop")?;
    if mode == Mode::Eval || p == 0.0 {
        return Ok(u.clone());
    }
    let mask = sample_weight_mask(u.shape(), p, rng)?;
    let data = u.data().iter().zip(mask.data()).map(|(a, m)| a * m).collect();
    Ok(Tensor::from_parts(u.shape().to_vec(), data))
}

/// Embedding lookup with row-level dropout: a dropped type is zero at every
/// occurrence in the segment. `mask` holds one entry per vocabulary row
/// (shape `[V]`), or one per batch row and vocabulary row (`[B, V]`) for
/// time-major `indices`, in which case the decision also depends on the row.
pub fn embed_with_dropout(
    g: &mut Graph<'_>,
    table: Var,
    indices: &[usize],
    mask: Option<&Tensor>,
) -> Result<Var> {
    let vocab = g.shape(table).first().copied().unwrap_or(0);
    if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
        return Err(Error::Index {
            op: "embed_with_dropout",
            index: bad,
            bound: vocab,
        });
    }
    match mask {
        Some(m) if m.rank() == 2 => {
            let (batch, v) = m.rows_cols();
            if v != vocab || batch == 0 || !indices.len().is_multiple_of(batch) {
                return Err(Error::Dimension {
                    op: "embed_with_dropout",
                    lhs: m.shape().to_vec(),
                    rhs: vec![indices.len(), vocab],
                });
            }
            let scale: Vec<f64> = indices
                .iter()
                .enumerate()
                .map(|(i, &w)| m.data()[(i % batch) * v + w])
                .collect();
            let rows = g.gather_rows(table, indices)?;
            let sv = g.constant(Tensor::vector(scale));
            g.apply_mask(rows, sv, MaskMode::PerRow)
        }
        Some(m) => {
            let mv = g.constant(m.clone());
            let source = g.apply_mask(table, mv, MaskMode::PerRow)?;
            g.gather_rows(source, indices)
        }
        None => g.gather_rows(table, indices),
    }
}

/// Dropout rates of one model. All rates lie in `[0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutConfig {
    /// On the embedding output (input of the first layer).
    pub input: f64,
    /// Between stacked layers.
    pub hidden: f64,
    /// On the last layer's output, before the decoder.
    pub output: f64,
    /// Whole embedding rows.
    pub embedding: f64,
    /// Draw the embedding decisions separately for each batch row instead of
    /// once per segment.
    pub embedding_per_batch_row: bool,
    /// DropConnect on recurrent matrices.
    pub weight: f64,
    /// Locked (variational) masks for input/output dropout. When false these
    /// two masks are resampled per timestep, as in a plain LSTM.
    pub locked: bool,
}

impl DropoutConfig {
    pub const NONE: DropoutConfig = DropoutConfig {
        input: 0.0,
        hidden: 0.0,
        output: 0.0,
        embedding: 0.0,
        embedding_per_batch_row: false,
        weight: 0.0,
        locked: true,
    };

    pub fn validate(&self) -> Result<()> {
        check_rate(self.input, "input dropout")?;
        check_rate(self.hidden, "hidden dropout")?;
        check_rate(self.output, "output dropout")?;
        check_rate(self.embedding, "embedding dropout")?;
        check_rate(self.weight, "weight drop")
    }
}

/// Sizes a mask set has to match.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskShapes {
    pub batch: usize,
    pub steps: usize,
    pub vocab: usize,
    pub embedding: usize,
    /// `(input, hidden)` for each stacked layer.
    pub layers: Vec<(usize, usize)>,
}

/// Every dropout mask for one language over one segment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DropoutMaskSet {
    /// V entries, one per vocabulary row.
    pub embedding: Option<Tensor>,
    /// Input mask per layer: B × in when locked, (T·B) × in otherwise (layer 0
    /// only, since between-layer dropout is always locked).
    pub layer_inputs: Vec<Option<Tensor>>,
    /// On the last layer output, same shape rules as `layer_inputs[0]`.
    pub output: Option<Tensor>,
    /// One DropConnect mask per layer, shaped like its `u`.
    pub weights: Vec<Option<Tensor>>,
}

impl DropoutMaskSet {
    /// No dropout anywhere (evaluation).
    pub fn none(layers: usize) -> Self {
        DropoutMaskSet {
            embedding: None,
            layer_inputs: vec![None; layers],
            output: None,
            weights: vec![None; layers],
        }
    }

    /// Draws masks in a fixed order: embedding, layer inputs, output, weights.
    /// Zero rates draw nothing and leave the slot empty.
    pub fn sample(config: &DropoutConfig, shapes: &MaskShapes, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let n_layers = shapes.layers.len();
        let io_rows = if config.locked {
            shapes.batch
        } else {
            shapes.batch * shapes.steps
        };
        let maybe = |p: f64, f: &mut dyn FnMut() -> Result<Tensor>| -> Result<Option<Tensor>> {
            if p > 0.0 {
                f().map(Some)
            } else {
                Ok(None)
            }
        };

        let embedding = maybe(config.embedding, &mut || {
            if config.embedding_per_batch_row {
                let m = sample_embedding_mask(shapes.batch * shapes.vocab, config.embedding, rng)?;
                Tensor::new(vec![shapes.batch, shapes.vocab], m.into_data())
            } else {
                sample_embedding_mask(shapes.vocab, config.embedding, rng)
            }
        })?;
        let mut layer_inputs = Vec::with_capacity(n_layers);
        for (k, &(input, _)) in shapes.layers.iter().enumerate() {
            let (p, rows) = if k == 0 {
                (config.input, io_rows)
            } else {
                (config.hidden, shapes.batch)
            };
            layer_inputs.push(maybe(p, &mut || sample_variational_mask(rows, input, p, rng))?);
        }
        let out_dim = shapes.layers.last().map_or(shapes.embedding, |l| l.1);
        let output = maybe(config.output, &mut || {
            sample_variational_mask(io_rows, out_dim, config.output, rng)
        })?;
        let mut weights = Vec::with_capacity(n_layers);
        for &(_, hidden) in &shapes.layers {
            weights.push(maybe(config.weight, &mut || {
                sample_weight_mask(&[4 * hidden, hidden], config.weight, rng)
            })?);
        }
        Ok(DropoutMaskSet {
            embedding,
            layer_inputs,
            output,
            weights,
        })
    }
}

/// Applies an input/output dropout mask that is either locked (B rows, tiled
/// over time) or per-timestep (same shape as `x`).
pub fn apply_sequence_mask(g: &mut Graph<'_>, x: Var, mask: Option<&Tensor>) -> Result<Var> {
    match mask {
        None => Ok(x),
        Some(m) => {
            let mode = if m.shape() == g.shape(x) {
                MaskMode::Elementwise
            } else {
                MaskMode::RowTiled
            };
            let mv = g.constant(m.clone());
            g.apply_mask(x, mv, mode)
        }
    }
}
