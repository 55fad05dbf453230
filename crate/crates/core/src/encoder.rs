//! Stepwise social attention and recurrent encoding.
//!
//! Per observed step, the target agent's position embedding queries its
//! neighbors' embeddings through masked attention, producing a social
//! context vector. Query and context concatenate into the step
//! representation, which a GRU folds into per-step hidden states. The
//! per-step hidden states (summed over a batch) are what the alignment
//! losses compare across domains; the final hidden state feeds the decoder.
//!
//! All positions are shifted into the window's local frame (origin at the
//! agent's last observed point) before entering the network, so encodings —
//! and therefore predictions — are translation-equivariant and numerically
//! well-scaled regardless of where in the scene the window sits.

use crate::diffnum::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::traj::{neighbor_mask, NeighborStep, ObservationWindow};

/// Two-layer perceptron with sigmoid activations after both layers.
#[derive(Clone, Debug)]
pub struct Mlp<S: Scalar> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

/// One GRU layer's gate weights. Layout follows the update equations:
/// `r = σ(x·w_xr + h·w_hr + b_r)`, `z` likewise,
/// `g = tanh(x·w_xg + r ⊙ (h·w_hg) + b_g)`, `h' = (1−z)⊙g + z⊙h`.
#[derive(Clone, Debug)]
pub struct GruLayer<S: Scalar> {
    pub w_xr: Tensor<S>,
    pub w_hr: Tensor<S>,
    pub b_r: Tensor<S>,
    pub w_xz: Tensor<S>,
    pub w_hz: Tensor<S>,
    pub b_z: Tensor<S>,
    pub w_xg: Tensor<S>,
    pub w_hg: Tensor<S>,
    pub b_g: Tensor<S>,
}

/// All encoder weights: embedding MLPs for the agent (`f_o`) and neighbors
/// (`f_b`), attention projections, the GRU stack, and the linear map that
/// produces the initial hidden state from the first step's neighbor
/// embedding summary.
#[derive(Clone, Debug)]
pub struct EncoderParams<S: Scalar> {
    pub f_o: Mlp<S>,
    pub f_b: Mlp<S>,
    pub w_q: Tensor<S>,
    pub w_k: Tensor<S>,
    pub w_v: Tensor<S>,
    pub gru: Vec<GruLayer<S>>,
    pub h0_w: Tensor<S>,
    pub h0_b: Tensor<S>,
}

impl<S: Scalar> Mlp<S> {
    fn named(&self, prefix: &str) -> Vec<(String, &Tensor<S>)> {
        vec![
            (format!("{prefix}.w1"), &self.w1),
            (format!("{prefix}.b1"), &self.b1),
            (format!("{prefix}.w2"), &self.w2),
            (format!("{prefix}.b2"), &self.b2),
        ]
    }

    fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<S>)> {
        vec![
            (format!("{prefix}.w1"), &mut self.w1),
            (format!("{prefix}.b1"), &mut self.b1),
            (format!("{prefix}.w2"), &mut self.w2),
            (format!("{prefix}.b2"), &mut self.b2),
        ]
    }
}

impl<S: Scalar> GruLayer<S> {
    fn named(&self, prefix: &str) -> Vec<(String, &Tensor<S>)> {
        vec![
            (format!("{prefix}.w_xr"), &self.w_xr),
            (format!("{prefix}.w_hr"), &self.w_hr),
            (format!("{prefix}.b_r"), &self.b_r),
            (format!("{prefix}.w_xz"), &self.w_xz),
            (format!("{prefix}.w_hz"), &self.w_hz),
            (format!("{prefix}.b_z"), &self.b_z),
            (format!("{prefix}.w_xg"), &self.w_xg),
            (format!("{prefix}.w_hg"), &self.w_hg),
            (format!("{prefix}.b_g"), &self.b_g),
        ]
    }

    fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<S>)> {
        vec![
            (format!("{prefix}.w_xr"), &mut self.w_xr),
            (format!("{prefix}.w_hr"), &mut self.w_hr),
            (format!("{prefix}.b_r"), &mut self.b_r),
            (format!("{prefix}.w_xz"), &mut self.w_xz),
            (format!("{prefix}.w_hz"), &mut self.w_hz),
            (format!("{prefix}.b_z"), &mut self.b_z),
            (format!("{prefix}.w_xg"), &mut self.w_xg),
            (format!("{prefix}.w_hg"), &mut self.w_hg),
            (format!("{prefix}.b_g"), &mut self.b_g),
        ]
    }
}

impl<S: Scalar> EncoderParams<S> {
    /// Stable (name, tensor) enumeration; the order defines optimizer state
    /// indices and checkpoint layout.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = self.f_o.named("f_o");
        out.extend(self.f_b.named("f_b"));
        out.push(("w_q".into(), &self.w_q));
        out.push(("w_k".into(), &self.w_k));
        out.push(("w_v".into(), &self.w_v));
        for (l, layer) in self.gru.iter().enumerate() {
            out.extend(layer.named(&format!("gru{l}")));
        }
        out.push(("h0.w".into(), &self.h0_w));
        out.push(("h0.b".into(), &self.h0_b));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = self.f_o.named_mut("f_o");
        out.extend(self.f_b.named_mut("f_b"));
        out.push(("w_q".into(), &mut self.w_q));
        out.push(("w_k".into(), &mut self.w_k));
        out.push(("w_v".into(), &mut self.w_v));
        for (l, layer) in self.gru.iter_mut().enumerate() {
            out.extend(layer.named_mut(&format!("gru{l}")));
        }
        out.push(("h0.w".into(), &mut self.h0_w));
        out.push(("h0.b".into(), &mut self.h0_b));
        out
    }
}

/// Tape handles for one bound copy of the encoder weights.
pub struct BoundMlp {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub struct BoundGruLayer {
    pub w_xr: Var,
    pub w_hr: Var,
    pub b_r: Var,
    pub w_xz: Var,
    pub w_hz: Var,
    pub b_z: Var,
    pub w_xg: Var,
    pub w_hg: Var,
    pub b_g: Var,
}

pub struct BoundEncoder {
    pub f_o: BoundMlp,
    pub f_b: BoundMlp,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub gru: Vec<BoundGruLayer>,
    pub h0_w: Var,
    pub h0_b: Var,
}

impl<S: Scalar> Mlp<S> {
    pub fn bind(&self, tape: &Tape<S>) -> BoundMlp {
        BoundMlp {
            w1: tape.param(self.w1.clone()),
            b1: tape.param(self.b1.clone()),
            w2: tape.param(self.w2.clone()),
            b2: tape.param(self.b2.clone()),
        }
    }
}

impl<S: Scalar> GruLayer<S> {
    pub fn bind(&self, tape: &Tape<S>) -> BoundGruLayer {
        BoundGruLayer {
            w_xr: tape.param(self.w_xr.clone()),
            w_hr: tape.param(self.w_hr.clone()),
            b_r: tape.param(self.b_r.clone()),
            w_xz: tape.param(self.w_xz.clone()),
            w_hz: tape.param(self.w_hz.clone()),
            b_z: tape.param(self.b_z.clone()),
            w_xg: tape.param(self.w_xg.clone()),
            w_hg: tape.param(self.w_hg.clone()),
            b_g: tape.param(self.b_g.clone()),
        }
    }
}

impl<S: Scalar> EncoderParams<S> {
    /// Binds every tensor as a tape parameter, in `named_tensors` order.
    pub fn bind(&self, tape: &Tape<S>) -> BoundEncoder {
        BoundEncoder {
            f_o: self.f_o.bind(tape),
            f_b: self.f_b.bind(tape),
            w_q: tape.param(self.w_q.clone()),
            w_k: tape.param(self.w_k.clone()),
            w_v: tape.param(self.w_v.clone()),
            gru: self.gru.iter().map(|l| l.bind(tape)).collect(),
            h0_w: tape.param(self.h0_w.clone()),
            h0_b: tape.param(self.h0_b.clone()),
        }
    }
}

/// `sigmoid(sigmoid(x·w1 + b1)·w2 + b2)`, applied row-wise.
pub fn mlp_forward<S: Scalar>(tape: &Tape<S>, mlp: &BoundMlp, x: Var) -> Result<Var> {
    let h = tape.matmul(x, mlp.w1)?;
    let h = tape.add_row(h, mlp.b1)?;
    let h = tape.sigmoid(h)?;
    let o = tape.matmul(h, mlp.w2)?;
    let o = tape.add_row(o, mlp.b2)?;
    tape.sigmoid(o)
}

/// Embeds the agent's position and (if any slots exist) the padded neighbor
/// rows through their respective MLPs. Pad rows get embedded too; the
/// attention mask is what excludes them.
pub fn embed_step<S: Scalar>(
    tape: &Tape<S>,
    enc: &BoundEncoder,
    point: Var,
    neighbors: Option<Var>,
) -> Result<(Var, Option<Var>)> {
    let f_o = mlp_forward(tape, &enc.f_o, point)?;
    let f_b = match neighbors {
        Some(n) => Some(mlp_forward(tape, &enc.f_b, n)?),
        None => None,
    };
    Ok((f_o, f_b))
}

/// Masked scaled dot-product attention from the agent's embedding over the
/// neighbor embeddings. Returns the query `q` and context `a`, both `[1, d]`.
/// With zero unmasked neighbors the context is exactly zero.
///
/// `heads > 1` splits the projected dimension into equal slices via constant
/// selector matrices; each slice attends independently and the contexts
/// reassemble into the original layout.
pub fn stepwise_attention<S: Scalar>(
    tape: &Tape<S>,
    enc: &BoundEncoder,
    f_o: Var,
    f_b: Option<Var>,
    mask: &[bool],
    heads: usize,
) -> Result<(Var, Var)> {
    let q = tape.matmul(f_o, enc.w_q)?;
    let (_, d) = tape.shape(q);
    let real_neighbors = mask.iter().filter(|&&m| m).count();
    let f_b = match f_b {
        Some(f_b) if real_neighbors > 0 => f_b,
        _ => {
            let a = tape.leaf(Tensor::zeros(1, d));
            return Ok((q, a));
        }
    };
    if heads == 0 || d % heads != 0 {
        return Err(Error::Shape(format!(
            "attention width {d} not divisible into {heads} heads"
        )));
    }
    let keys = tape.matmul(f_b, enc.w_k)?;
    let values = tape.matmul(f_b, enc.w_v)?;
    let d_head = d / heads;
    let scale = S::one() / S::from(d_head).unwrap().sqrt();

    if heads == 1 {
        let kt = tape.transpose(keys)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, scale)?;
        let weights = tape.softmax_masked(scores, mask)?;
        let a = tape.matmul(weights, values)?;
        return Ok((q, a));
    }

    // Column selector for head h: a [d, d_head] 0/1 constant.
    let mut context_parts = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut sel = Tensor::zeros(d, d_head);
        for j in 0..d_head {
            sel.set(h * d_head + j, j, S::one());
        }
        let sel = tape.leaf(sel);
        let q_h = tape.matmul(q, sel)?;
        let k_h = tape.matmul(keys, sel)?;
        let v_h = tape.matmul(values, sel)?;
        let kt = tape.transpose(k_h)?;
        let scores = tape.matmul(q_h, kt)?;
        let scores = tape.scale(scores, scale)?;
        let weights = tape.softmax_masked(scores, mask)?;
        context_parts.push(tape.matmul(weights, v_h)?);
    }
    let mut a = context_parts[0];
    for part in &context_parts[1..] {
        a = tape.concat_cols(a, *part)?;
    }
    Ok((q, a))
}

/// The step representation: query and context concatenated, `[1, 2d]`.
pub fn step_representation<S: Scalar>(tape: &Tape<S>, q: Var, a: Var) -> Result<Var> {
    let (qr, qc) = tape.shape(q);
    let (ar, ac) = tape.shape(a);
    if qr != 1 || ar != 1 || qc != ac {
        return Err(Error::Shape(format!(
            "step representation needs two [1, d] inputs, got {qr}x{qc} and {ar}x{ac}"
        )));
    }
    tape.concat_cols(q, a)
}

/// One GRU update.
pub fn gru_cell<S: Scalar>(
    tape: &Tape<S>,
    layer: &BoundGruLayer,
    x: Var,
    h_prev: Var,
) -> Result<Var> {
    let r = {
        let xr = tape.matmul(x, layer.w_xr)?;
        let hr = tape.matmul(h_prev, layer.w_hr)?;
        let s = tape.add(xr, hr)?;
        let s = tape.add(s, layer.b_r)?;
        tape.sigmoid(s)?
    };
    let z = {
        let xz = tape.matmul(x, layer.w_xz)?;
        let hz = tape.matmul(h_prev, layer.w_hz)?;
        let s = tape.add(xz, hz)?;
        let s = tape.add(s, layer.b_z)?;
        tape.sigmoid(s)?
    };
    let g = {
        let xg = tape.matmul(x, layer.w_xg)?;
        let hg = tape.matmul(h_prev, layer.w_hg)?;
        let gated = tape.mul(r, hg)?;
        let s = tape.add(xg, gated)?;
        let s = tape.add(s, layer.b_g)?;
        tape.tanh(s)?
    };
    // h = (1 - z) ⊙ g + z ⊙ h_prev
    let one_minus_z = tape.one_minus(z)?;
    let a = tape.mul(one_minus_z, g)?;
    let b = tape.mul(z, h_prev)?;
    tape.add(a, b)
}

/// Everything downstream consumers need from one encoded window: the
/// per-step attention contexts, the per-step (top-layer) hidden states, and
/// the final hidden state.
pub struct WindowEncoding {
    pub contexts: Vec<Var>,
    pub hidden: Vec<Var>,
    pub final_hidden: Var,
    /// The window's local-frame origin in world coordinates (the agent's
    /// last observed position); decoding adds it back.
    pub origin: [f64; 2],
}

/// Runs the full encoder over one window: local-frame shift, neighbor
/// padding, per-step embedding + attention + step representation, then the
/// GRU stack. The initial hidden state of the first layer is a linear map of
/// the masked mean of the first step's neighbor embeddings (zeros when the
/// first step has no neighbors); deeper layers start at zero.
pub fn encode_window<S: Scalar>(
    tape: &Tape<S>,
    enc: &BoundEncoder,
    window: &ObservationWindow,
    a_max: usize,
    heads: usize,
) -> Result<WindowEncoding> {
    let t_obs = window.t_obs();
    let origin = *window
        .observed
        .last()
        .ok_or_else(|| Error::Shape("window with empty observation".into()))?;
    let steps = neighbor_mask(window, a_max);
    let hidden_dim = {
        // Hidden width is the GRU gate output width.
        let (_, h) = tape.shape(enc.h0_b);
        h
    };

    let point_leaf = |p: [f64; 2]| {
        tape.leaf(Tensor::row_vec(&[
            S::from(p[0] - origin[0]).unwrap(),
            S::from(p[1] - origin[1]).unwrap(),
        ]))
    };
    let neighbors_leaf = |step: &NeighborStep| {
        if a_max == 0 {
            return None;
        }
        let rows: Vec<Vec<S>> = step
            .coords
            .iter()
            .zip(&step.mask)
            .map(|(&c, &m)| {
                if m {
                    vec![
                        S::from(c[0] - origin[0]).unwrap(),
                        S::from(c[1] - origin[1]).unwrap(),
                    ]
                } else {
                    vec![S::zero(), S::zero()]
                }
            })
            .collect();
        Some(tape.leaf(Tensor::from_rows(&rows).expect("a_max > 0")))
    };

    // Initial hidden state from the first step's neighbor summary.
    let first_neighbors = neighbors_leaf(&steps[0]);
    let summary = match first_neighbors {
        Some(n) if steps[0].mask.iter().any(|&m| m) => {
            let f_b = mlp_forward(tape, &enc.f_b, n)?;
            let count = steps[0].mask.iter().filter(|&&m| m).count();
            let sel: Vec<S> = steps[0]
                .mask
                .iter()
                .map(|&m| if m { S::one() } else { S::zero() })
                .collect();
            let sel = tape.leaf(Tensor::row_vec(&sel));
            let total = tape.matmul(sel, f_b)?;
            tape.scale(total, S::one() / S::from(count).unwrap())?
        }
        _ => {
            let (w_rows, _) = tape.shape(enc.h0_w);
            tape.leaf(Tensor::zeros(1, w_rows))
        }
    };
    let h0 = {
        let m = tape.matmul(summary, enc.h0_w)?;
        tape.add(m, enc.h0_b)?
    };

    let mut layer_states: Vec<Var> = Vec::with_capacity(enc.gru.len());
    for l in 0..enc.gru.len() {
        if l == 0 {
            layer_states.push(h0);
        } else {
            layer_states.push(tape.leaf(Tensor::zeros(1, hidden_dim)));
        }
    }

    let mut contexts = Vec::with_capacity(t_obs);
    let mut hidden = Vec::with_capacity(t_obs);
    for t in 0..t_obs {
        let point = point_leaf(window.observed[t]);
        let neighbors = neighbors_leaf(&steps[t]);
        let (f_o, f_b) = embed_step(tape, enc, point, neighbors)?;
        let (q, a) = stepwise_attention(tape, enc, f_o, f_b, &steps[t].mask, heads)?;
        let mut x = step_representation(tape, q, a)?;
        for (l, layer) in enc.gru.iter().enumerate() {
            let h = gru_cell(tape, layer, x, layer_states[l])?;
            layer_states[l] = h;
            x = h;
        }
        contexts.push(a);
        hidden.push(*layer_states.last().expect("at least one GRU layer"));
    }

    let final_hidden = *hidden.last().expect("t_obs >= 1");
    Ok(WindowEncoding {
        contexts,
        hidden,
        final_hidden,
        origin,
    })
}

/// How per-window states combine into a domain-level feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    /// Plain sum over the batch. Comparable across domains only when batch
    /// sizes match, which the training loop enforces.
    Sum,
    /// Batch mean; size-independent alternative.
    Mean,
}

impl Aggregation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Aggregation::Sum),
            "mean" => Ok(Aggregation::Mean),
            other => Err(Error::Config(format!(
                "unknown aggregation '{other}' (expected sum|mean)"
            ))),
        }
    }
}

/// One step's features for a whole batch: the `[N, H]` per-window state set
/// and its `[1, H]` aggregate. Set-statistic discrepancy measures consume
/// the former, vector measures the latter.
pub struct StepFeatures {
    pub set: Var,
    pub aggregated: Var,
}

fn collect_steps<S: Scalar>(
    tape: &Tape<S>,
    encodings: &[WindowEncoding],
    pick: impl Fn(&WindowEncoding) -> &[Var],
    agg: Aggregation,
) -> Result<Vec<StepFeatures>> {
    let first = encodings
        .first()
        .ok_or_else(|| Error::Shape("domain feature of an empty batch".into()))?;
    let t_obs = pick(first).len();
    if encodings.iter().any(|e| pick(e).len() != t_obs) {
        return Err(Error::Shape(
            "windows in one batch disagree on observation length".into(),
        ));
    }
    let mut out = Vec::with_capacity(t_obs);
    for t in 0..t_obs {
        let rows: Vec<Var> = encodings.iter().map(|e| pick(e)[t]).collect();
        let set = tape.stack_rows(&rows)?;
        let aggregated = match agg {
            Aggregation::Sum => tape.sum_rows(set)?,
            Aggregation::Mean => tape.mean_rows(set)?,
        };
        out.push(StepFeatures { set, aggregated });
    }
    Ok(out)
}

/// Per-step aggregated hidden states of a batch (the alignment target).
pub fn domain_feature<S: Scalar>(
    tape: &Tape<S>,
    encodings: &[WindowEncoding],
    agg: Aggregation,
) -> Result<Vec<StepFeatures>> {
    collect_steps(tape, encodings, |e| &e.hidden, agg)
}

/// Per-step aggregated attention contexts (the pre-recurrence ablation
/// target).
pub fn context_feature<S: Scalar>(
    tape: &Tape<S>,
    encodings: &[WindowEncoding],
    agg: Aggregation,
) -> Result<Vec<StepFeatures>> {
    collect_steps(tape, encodings, |e| &e.contexts, agg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnum::init::uniform_fan_in;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Encoder with every weight and bias zero.
    fn zero_encoder(mlp_h1: usize, mlp_h2: usize, d: usize, hidden: usize) -> EncoderParams<f64> {
        EncoderParams {
            f_o: Mlp {
                w1: Tensor::zeros(2, mlp_h1),
                b1: Tensor::zeros(1, mlp_h1),
                w2: Tensor::zeros(mlp_h1, mlp_h2),
                b2: Tensor::zeros(1, mlp_h2),
            },
            f_b: Mlp {
                w1: Tensor::zeros(2, mlp_h1),
                b1: Tensor::zeros(1, mlp_h1),
                w2: Tensor::zeros(mlp_h1, mlp_h2),
                b2: Tensor::zeros(1, mlp_h2),
            },
            w_q: Tensor::zeros(mlp_h2, d),
            w_k: Tensor::zeros(mlp_h2, d),
            w_v: Tensor::zeros(mlp_h2, d),
            gru: vec![GruLayer {
                w_xr: Tensor::zeros(2 * d, hidden),
                w_hr: Tensor::zeros(hidden, hidden),
                b_r: Tensor::zeros(1, hidden),
                w_xz: Tensor::zeros(2 * d, hidden),
                w_hz: Tensor::zeros(hidden, hidden),
                b_z: Tensor::zeros(1, hidden),
                w_xg: Tensor::zeros(2 * d, hidden),
                w_hg: Tensor::zeros(hidden, hidden),
                b_g: Tensor::zeros(1, hidden),
            }],
            h0_w: Tensor::zeros(mlp_h2, hidden),
            h0_b: Tensor::zeros(1, hidden),
        }
    }

    fn random_encoder(
        mlp_h1: usize,
        mlp_h2: usize,
        d: usize,
        hidden: usize,
        seed: u64,
    ) -> EncoderParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut enc = zero_encoder(mlp_h1, mlp_h2, d, hidden);
        for (_, t) in enc.named_tensors_mut() {
            let (r, c) = t.shape();
            *t = uniform_fan_in(r, c, &mut rng);
        }
        enc
    }

    fn leaf_rows(tape: &Tape<f64>, rows: &[Vec<f64>]) -> Var {
        tape.leaf(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn zero_weights_embed_to_one_half() {
        let enc_params = zero_encoder(4, 6, 8, 8);
        let tape = Tape::new();
        let enc = enc_params.bind(&tape);
        let point = leaf_rows(&tape, &[vec![3.0, -1.0]]);
        let neighbors = leaf_rows(&tape, &[vec![1.0, 1.0], vec![0.0, 2.0]]);
        let (f_o, f_b) = embed_step(&tape, &enc, point, Some(neighbors)).unwrap();
        assert!(tape.value(f_o).as_slice().iter().all(|&v| v == 0.5));
        assert!(tape
            .value(f_b.unwrap())
            .as_slice()
            .iter()
            .all(|&v| v == 0.5));
    }

    #[test]
    fn embedding_is_a_pure_function_of_the_point() {
        let enc_params = random_encoder(4, 6, 8, 8, 1);
        let tape = Tape::new();
        let enc = enc_params.bind(&tape);
        let p1 = leaf_rows(&tape, &[vec![1.5, 2.5]]);
        let p2 = leaf_rows(&tape, &[vec![1.5, 2.5]]);
        let (a, _) = embed_step(&tape, &enc, p1, None).unwrap();
        let (b, _) = embed_step(&tape, &enc, p2, None).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn single_unmasked_neighbor_returns_its_value_row() {
        let enc_params = random_encoder(4, 6, 8, 8, 2);
        let tape = Tape::new();
        let enc = enc_params.bind(&tape);
        let point = leaf_rows(&tape, &[vec![0.3, 0.4]]);
        let neighbors = leaf_rows(&tape, &[vec![1.0, 2.0], vec![0.0, 0.0], vec![0.0, 0.0]]);
        let (f_o, f_b) = embed_step(&tape, &enc, point, Some(neighbors)).unwrap();
        let mask = [true, false, false];
        let (_, a) = stepwise_attention(&tape, &enc, f_o, f_b, &mask, 1).unwrap();
        // Reference: that neighbor's value row.
        let values = tape.matmul(f_b.unwrap(), enc.w_v).unwrap();
        let row0 = tape.value(values).row(0).to_vec();
        assert_eq!(tape.value(a).as_slice(), &row0[..]);
    }

    #[test]
    fn zero_unmasked_neighbors_give_zero_context() {
        let enc_params = random_encoder(4, 6, 8, 8, 3);
        let tape = Tape::new();
        let enc = enc_params.bind(&tape);
        let point = leaf_rows(&tape, &[vec![0.3, 0.4]]);
        let neighbors = leaf_rows(&tape, &[vec![0.0, 0.0], vec![0.0, 0.0]]);
        let (f_o, f_b) = embed_step(&tape, &enc, point, Some(neighbors)).unwrap();
        let (_, a) = stepwise_attention(&tape, &enc, f_o, f_b, &[false, false], 1).unwrap();
        assert!(tape.value(a).as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_neighbors_yield_the_shared_value_row() {
        let enc_params = random_encoder(4, 6, 8, 8, 4);
        let tape = Tape::new();
        let enc = enc_params.bind(&tape);
        let point = leaf_rows(&tape, &[vec![0.1, -0.2]]);
        let same = vec![0.7, 0.9];
        let neighbors = leaf_rows(&tape, &[same.clone(), same.clone(), same.clone()]);
        let (f_o, f_b) = embed_step(&tape, &enc, point, Some(neighbors)).unwrap();
        let (_, a) = stepwise_attention(&tape, &enc, f_o, f_b, &[true; 3], 1).unwrap();
        let values = tape.matmul(f_b.unwrap(), enc.w_v).unwrap();
        let shared = tape.value(values).row(0).to_vec();
        for (&got, &want) in tape.value(a).as_slice().iter().zip(&shared) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_query_averages_the_value_rows() {
        // Zero W_q makes all scores zero → uniform weights over unmasked.
        let mut enc_params = random_encoder(4, 6, 8, 8, 5);
        enc_params.w_q = Tensor::zeros(6, 8);
        let tape = Tape::new();
        let enc = enc_params.bind(&tape);
        let point = leaf_rows(&tape, &[vec![0.1, -0.2]]);
        let neighbors = leaf_rows(&tape, &[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]]);
        let (f_o, f_b) = embed_step(&tape, &enc, point, Some(neighbors)).unwrap();
        let (_, a) = stepwise_attention(&tape, &enc, f_o, f_b, &[true; 3], 1).unwrap();
        let values = tape.value(tape.matmul(f_b.unwrap(), enc.w_v).unwrap());
        for c in 0..8 {
            let mean = (values.get(0, c) + values.get(1, c) + values.get(2, c)) / 3.0;
            assert!((tape.value(a).get(0, c) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_weights_sum_to_one_with_any_unmasked() {
        let enc_params = random_encoder(4, 6, 8, 8, 6);
        let tape = Tape::new();
        let enc = enc_params.bind(&tape);
        let point = leaf_rows(&tape, &[vec![0.5, 0.5]]);
        let neighbors = leaf_rows(
            &tape,
            &[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0], vec![3.0, 1.0]],
        );
        let (f_o, f_b) = embed_step(&tape, &enc, point, Some(neighbors)).unwrap();
        // Recompute the weights directly to check normalization.
        let keys = tape.matmul(f_b.unwrap(), enc.w_k).unwrap();
        let kt = tape.transpose(keys).unwrap();
        let q = tape.matmul(f_o, enc.w_q).unwrap();
        let scores = tape.matmul(q, kt).unwrap();
        let scores = tape.scale(scores, 1.0 / 8.0f64.sqrt()).unwrap();
        let mask = [true, false, true, true];
        let weights = tape.softmax_masked(scores, &mask).unwrap();
        let total: f64 = tape.value(weights).as_slice().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn step_representation_concatenates_in_order() {
        let tape = Tape::<f64>::new();
        let q = leaf_rows(&tape, &[vec![1.0, 2.0]]);
        let a = leaf_rows(&tape, &[vec![3.0, 4.0]]);
        let x = step_representation(&tape, q, a).unwrap();
        assert_eq!(tape.value(x).as_slice(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn step_representation_rejects_width_mismatch() {
        let tape = Tape::<f64>::new();
        let q = leaf_rows(&tape, &[vec![1.0, 2.0]]);
        let a = leaf_rows(&tape, &[vec![3.0]]);
        assert!(step_representation(&tape, q, a).is_err());
    }

    #[test]
    fn gru_zero_weights_halve_previous_state() {
        let enc_params = zero_encoder(4, 6, 8, 8);
        let tape = Tape::new();
        let enc = enc_params.bind(&tape);
        let x = tape.leaf(Tensor::full(1, 16, 0.3));
        let h_prev_vals = [0.2, -0.4, 1.0, 0.0, 0.6, -1.0, 0.8, 0.1];
        let h_prev = tape.leaf(Tensor::row_vec(&h_prev_vals));
        let h = gru_cell(&tape, &enc.gru[0], x, h_prev).unwrap();
        for (got, want) in tape.value(h).as_slice().iter().zip(&h_prev_vals) {
            assert_eq!(*got, 0.5 * want); // exact: σ(0)=0.5, tanh(0)=0
        }
        // And from a zero previous state, the new state is exactly zero.
        let h0 = tape.leaf(Tensor::zeros(1, 8));
        let h = gru_cell(&tape, &enc.gru[0], x, h0).unwrap();
        assert!(tape.value(h).as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_output_interpolates_between_candidate_and_previous() {
        // h is a convex combination of g and h_prev (z strictly inside
        // (0,1)), so each component must lie between them.
        let enc_params = random_encoder(4, 6, 8, 8, 7);
        let tape = Tape::new();
        let enc = enc_params.bind(&tape);
        let layer = &enc.gru[0];
        let x = leaf_rows(&tape, &[(0..16).map(|i| (i as f64) * 0.1 - 0.8).collect()]);
        let h_prev = leaf_rows(&tape, &[(0..8).map(|i| (i as f64) * 0.2 - 0.7).collect()]);
        let h = gru_cell(&tape, layer, x, h_prev).unwrap();

        // Recompute g with the same tape ops to get the candidate state.
        let xg = tape.matmul(x, layer.w_xg).unwrap();
        let hg = tape.matmul(h_prev, layer.w_hg).unwrap();
        let xr = tape.matmul(x, layer.w_xr).unwrap();
        let hr = tape.matmul(h_prev, layer.w_hr).unwrap();
        let r_pre = tape.add(xr, hr).unwrap();
        let r_pre = tape.add(r_pre, layer.b_r).unwrap();
        let r = tape.sigmoid(r_pre).unwrap();
        let gated = tape.mul(r, hg).unwrap();
        let g_pre = tape.add(xg, gated).unwrap();
        let g_pre = tape.add(g_pre, layer.b_g).unwrap();
        let g = tape.tanh(g_pre).unwrap();

        let hv = tape.value(h);
        let gv = tape.value(g);
        let pv = tape.value(h_prev);
        for i in 0..8 {
            let (lo, hi) = if gv.get(0, i) < pv.get(0, i) {
                (gv.get(0, i), pv.get(0, i))
            } else {
                (pv.get(0, i), gv.get(0, i))
            };
            assert!(hv.get(0, i) >= lo - 1e-12 && hv.get(0, i) <= hi + 1e-12);
        }
    }

    fn toy_window(t_obs: usize, t_pred: usize) -> ObservationWindow {
        use crate::traj::Neighbor;
        ObservationWindow {
            agent_id: 1,
            observed: (0..t_obs).map(|t| [t as f64 * 0.4, 0.1 * t as f64]).collect(),
            neighbors: (0..t_obs)
                .map(|t| {
                    vec![
                        Neighbor {
                            agent_id: 2,
                            pos: [t as f64 * 0.4 + 1.0, 0.5],
                        },
                        Neighbor {
                            agent_id: 3,
                            pos: [t as f64 * 0.4 - 0.5, -0.3],
                        },
                    ]
                })
                .collect(),
            future: (0..t_pred)
                .map(|t| [(t_obs + t) as f64 * 0.4, 0.0])
                .collect(),
            domain_id: 0,
        }
    }

    #[test]
    fn encode_window_single_step() {
        let enc_params = random_encoder(4, 6, 8, 8, 8);
        let tape = Tape::new();
        let enc = enc_params.bind(&tape);
        let e = encode_window(&tape, &enc, &toy_window(1, 2), 4, 1).unwrap();
        assert_eq!(e.hidden.len(), 1);
        assert_eq!(tape.value(e.final_hidden), tape.value(e.hidden[0]));
    }

    #[test]
    fn encode_window_is_deterministic() {
        let enc_params = random_encoder(4, 6, 8, 8, 9);
        let tape = Tape::new();
        let enc = enc_params.bind(&tape);
        let w = toy_window(4, 3);
        let a = encode_window(&tape, &enc, &w, 4, 1).unwrap();
        let b = encode_window(&tape, &enc, &w, 4, 1).unwrap();
        assert_eq!(tape.value(a.final_hidden), tape.value(b.final_hidden));
    }

    #[test]
    fn encoding_invariant_to_neighbor_order_exactly() {
        let enc_params = random_encoder(4, 6, 8, 8, 10);
        let tape = Tape::new();
        let enc = enc_params.bind(&tape);
        let w = toy_window(4, 3);
        let mut permuted = w.clone();
        for step in &mut permuted.neighbors {
            step.reverse();
        }
        let a = encode_window(&tape, &enc, &w, 4, 1).unwrap();
        let b = encode_window(&tape, &enc, &permuted, 4, 1).unwrap();
        // Canonical neighbor ordering makes this bitwise, not approximate.
        assert_eq!(tape.value(a.final_hidden), tape.value(b.final_hidden));
        for (x, y) in a.hidden.iter().zip(&b.hidden) {
            assert_eq!(tape.value(*x), tape.value(*y));
        }
    }

    #[test]
    fn encoding_invariant_to_translation() {
        // The local frame removes absolute position; only rounding in the
        // shift-then-subtract survives.
        let enc_params = random_encoder(4, 6, 8, 8, 11);
        let tape = Tape::new();
        let enc = enc_params.bind(&tape);
        let w = toy_window(4, 3);
        let mut shifted = w.clone();
        for p in shifted.observed.iter_mut().chain(shifted.future.iter_mut()) {
            p[0] += 100.0;
            p[1] -= 40.0;
        }
        for step in &mut shifted.neighbors {
            for n in step {
                n.pos[0] += 100.0;
                n.pos[1] -= 40.0;
            }
        }
        let a = encode_window(&tape, &enc, &w, 4, 1).unwrap();
        let b = encode_window(&tape, &enc, &shifted, 4, 1).unwrap();
        let av = tape.value(a.final_hidden);
        let bv = tape.value(b.final_hidden);
        for (x, y) in av.as_slice().iter().zip(bv.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_head_attention_matches_shapes_and_normalization() {
        let enc_params = random_encoder(4, 6, 8, 8, 12);
        let tape = Tape::new();
        let enc = enc_params.bind(&tape);
        let w = toy_window(4, 3);
        let e = encode_window(&tape, &enc, &w, 4, 2).unwrap();
        assert_eq!(e.hidden.len(), 4);
        assert_eq!(tape.shape(e.contexts[0]), (1, 8));
    }

    #[test]
    fn domain_feature_single_window_equals_hidden() {
        let enc_params = random_encoder(4, 6, 8, 8, 13);
        let tape = Tape::new();
        let enc = enc_params.bind(&tape);
        let e = encode_window(&tape, &enc, &toy_window(3, 2), 4, 1).unwrap();
        let hidden_vals: Vec<Tensor<f64>> = e.hidden.iter().map(|&h| tape.value(h)).collect();
        let feats = domain_feature(&tape, &[e], Aggregation::Sum).unwrap();
        assert_eq!(feats.len(), 3);
        for (f, h) in feats.iter().zip(&hidden_vals) {
            assert_eq!(&tape.value(f.aggregated), h);
        }
    }

    #[test]
    fn domain_feature_is_batch_order_invariant() {
        let enc_params = random_encoder(4, 6, 8, 8, 14);
        let tape = Tape::new();
        let enc = enc_params.bind(&tape);
        let w1 = toy_window(3, 2);
        let mut w2 = toy_window(3, 2);
        for p in &mut w2.observed {
            p[1] += 1.0;
        }
        let e1 = encode_window(&tape, &enc, &w1, 4, 1).unwrap();
        let e2 = encode_window(&tape, &enc, &w2, 4, 1).unwrap();
        let e1b = encode_window(&tape, &enc, &w1, 4, 1).unwrap();
        let e2b = encode_window(&tape, &enc, &w2, 4, 1).unwrap();
        let fwd = domain_feature(&tape, &[e1, e2], Aggregation::Sum).unwrap();
        let rev = domain_feature(&tape, &[e2b, e1b], Aggregation::Sum).unwrap();
        for (a, b) in fwd.iter().zip(&rev) {
            // Sum order differs, so allow rounding-level slack.
            let av = tape.value(a.aggregated);
            let bv = tape.value(b.aggregated);
            for (x, y) in av.as_slice().iter().zip(bv.as_slice()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn opposite_hidden_states_cancel_in_sum() {
        // Feed hand-built encodings: h and -h sum to zero.
        let tape = Tape::<f64>::new();
        let h = tape.leaf(Tensor::row_vec(&[1.0, -2.0, 3.0]));
        let neg = tape.leaf(Tensor::row_vec(&[-1.0, 2.0, -3.0]));
        let e1 = WindowEncoding {
            contexts: vec![h],
            hidden: vec![h],
            final_hidden: h,
            origin: [0.0, 0.0],
        };
        let e2 = WindowEncoding {
            contexts: vec![neg],
            hidden: vec![neg],
            final_hidden: neg,
            origin: [0.0, 0.0],
        };
        let feats = domain_feature(&tape, &[e1, e2], Aggregation::Sum).unwrap();
        assert_eq!(tape.value(feats[0].aggregated).as_slice(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        use crate::diffnum::gradcheck::{central_diff, max_rel_err};

        // Tiny dims keep the finite-difference sweep fast while still
        // exercising every parameter tensor, the attention mask path, and
        // the recurrence.
        let enc_params = random_encoder(3, 4, 4, 5, 15);
        let w = toy_window(3, 2);

        let forward = |params: &EncoderParams<f64>| -> f64 {
            let tape = Tape::new();
            let enc = params.bind(&tape);
            let e = encode_window(&tape, &enc, &w, 2, 1).unwrap();
            // Scalar objective: squared norm of the final hidden state plus
            // the first context, touching both output families.
            let n1 = tape.dot(e.final_hidden, e.final_hidden).unwrap();
            let n2 = tape.dot(e.contexts[0], e.contexts[0]).unwrap();
            tape.scalar(tape.add(n1, n2).unwrap())
        };

        // Analytic gradients once.
        let tape = Tape::new();
        let enc = enc_params.bind(&tape);
        let e = encode_window(&tape, &enc, &w, 2, 1).unwrap();
        let n1 = tape.dot(e.final_hidden, e.final_hidden).unwrap();
        let n2 = tape.dot(e.contexts[0], e.contexts[0]).unwrap();
        let root = tape.add(n1, n2).unwrap();
        tape.backward(root).unwrap();

        let bound_order: Vec<Var> = {
            // Rebinding in the same order the params enumerate.
            let b = &enc;
            vec![
                b.f_o.w1, b.f_o.b1, b.f_o.w2, b.f_o.b2, b.f_b.w1, b.f_b.b1, b.f_b.w2, b.f_b.b2,
                b.w_q, b.w_k, b.w_v, b.gru[0].w_xr, b.gru[0].w_hr, b.gru[0].b_r, b.gru[0].w_xz,
                b.gru[0].w_hz, b.gru[0].b_z, b.gru[0].w_xg, b.gru[0].w_hg, b.gru[0].b_g, b.h0_w,
                b.h0_b,
            ]
        };
        let names: Vec<String> = enc_params
            .named_tensors()
            .into_iter()
            .map(|(n, _)| n)
            .collect();

        for (idx, var) in bound_order.iter().enumerate() {
            let (r, c) = tape.shape(*var);
            let analytic = tape.grad(*var).unwrap_or_else(|| Tensor::zeros(r, c));
            let base = enc_params.named_tensors()[idx].1.clone();
            let numeric = central_diff(
                |x| {
                    let mut p = enc_params.clone();
                    *p.named_tensors_mut()[idx].1 = x.clone();
                    Ok(forward(&p))
                },
                &base,
                1e-5,
            )
            .unwrap();
            let err = max_rel_err(&analytic, &numeric);
            assert!(err < 1e-4, "{}: rel err {err}", names[idx]);
        }
    }
}
