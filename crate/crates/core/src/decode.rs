//! Mixture-of-experts decoding and the prediction loss.
//!
//! K independent two-layer heads each map the final hidden state to a full
//! future trajectory (as per-point offsets from the window origin), giving K
//! modes per window. Training is winner-take-all: a window's loss is the
//! best head's mean per-point Euclidean error, so heads specialize instead
//! of collapsing onto the conditional mean.

use crate::diffnum::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// One expert: `sigmoid(h·w1 + b1)·w2 + b2` with a linear output layer wide
/// enough for T_pred 2D points.
#[derive(Clone, Debug)]
pub struct DecoderHead<S: Scalar> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct DecoderParams<S: Scalar> {
    pub heads: Vec<DecoderHead<S>>,
    pub t_pred: usize,
}

impl<S: Scalar> DecoderParams<S> {
    pub fn k(&self) -> usize {
        self.heads.len()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::with_capacity(self.heads.len() * 4);
        for (k, head) in self.heads.iter().enumerate() {
            out.push((format!("head{k}.w1"), &head.w1));
            out.push((format!("head{k}.b1"), &head.b1));
            out.push((format!("head{k}.w2"), &head.w2));
            out.push((format!("head{k}.b2"), &head.b2));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = Vec::with_capacity(self.heads.len() * 4);
        for (k, head) in self.heads.iter_mut().enumerate() {
            out.push((format!("head{k}.w1"), &mut head.w1));
            out.push((format!("head{k}.b1"), &mut head.b1));
            out.push((format!("head{k}.w2"), &mut head.w2));
            out.push((format!("head{k}.b2"), &mut head.b2));
        }
        out
    }

    pub fn bind(&self, tape: &Tape<S>) -> BoundDecoder {
        BoundDecoder {
            heads: self
                .heads
                .iter()
                .map(|h| BoundHead {
                    w1: tape.param(h.w1.clone()),
                    b1: tape.param(h.b1.clone()),
                    w2: tape.param(h.w2.clone()),
                    b2: tape.param(h.b2.clone()),
                })
                .collect(),
            t_pred: self.t_pred,
        }
    }
}

pub struct BoundHead {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub struct BoundDecoder {
    pub heads: Vec<BoundHead>,
    pub t_pred: usize,
}

/// K candidate futures for one window, in world coordinates.
#[derive(Clone, Debug)]
pub struct PredictionSet {
    pub trajectories: Vec<Vec<[f64; 2]>>,
    /// Index of the head selected by a minimum-error criterion, when one
    /// has been applied.
    pub best_index: Option<usize>,
}

/// Runs every head on the final hidden state; returns one `[1, 2·T_pred]`
/// offset row per head, laid out (x_1, y_1, x_2, y_2, …).
pub fn decode_heads<S: Scalar>(
    tape: &Tape<S>,
    dec: &BoundDecoder,
    final_hidden: Var,
) -> Result<Vec<Var>> {
    let mut rows = Vec::with_capacity(dec.heads.len());
    for head in &dec.heads {
        let h = tape.matmul(final_hidden, head.w1)?;
        let h = tape.add_row(h, head.b1)?;
        let h = tape.sigmoid(h)?;
        let o = tape.matmul(h, head.w2)?;
        rows.push(tape.add_row(o, head.b2)?);
    }
    Ok(rows)
}

/// Decodes a window into its K candidate trajectories, restoring world
/// coordinates by adding the window origin back onto the offsets.
pub fn moe_decode<S: Scalar>(
    tape: &Tape<S>,
    dec: &BoundDecoder,
    final_hidden: Var,
    origin: [f64; 2],
) -> Result<PredictionSet> {
    let rows = decode_heads(tape, dec, final_hidden)?;
    let mut trajectories = Vec::with_capacity(rows.len());
    for row in rows {
        let v = tape.value(row);
        if v.cols() != 2 * dec.t_pred {
            return Err(Error::Shape(format!(
                "decoder head produced {} outputs for {} prediction steps",
                v.cols(),
                dec.t_pred
            )));
        }
        let mut traj = Vec::with_capacity(dec.t_pred);
        for t in 0..dec.t_pred {
            traj.push([
                v.get(0, 2 * t).to_f64().unwrap() + origin[0],
                v.get(0, 2 * t + 1).to_f64().unwrap() + origin[1],
            ]);
        }
        trajectories.push(traj);
    }
    Ok(PredictionSet {
        trajectories,
        best_index: None,
    })
}

/// Constant `[2·T_pred, 2]` selector picking point `t` out of an offset row.
fn point_selector<S: Scalar>(tape: &Tape<S>, t_pred: usize, t: usize) -> Var {
    let mut sel = Tensor::zeros(2 * t_pred, 2);
    sel.set(2 * t, 0, S::one());
    sel.set(2 * t + 1, 1, S::one());
    tape.leaf(sel)
}

/// Mean per-point Euclidean error of each head against the local-frame
/// truth, computed from current values (used for winner selection, so it
/// carries no gradient).
fn head_errors<S: Scalar>(tape: &Tape<S>, rows: &[Var], truth_local: &[[f64; 2]]) -> Vec<f64> {
    rows.iter()
        .map(|&row| {
            let v = tape.value(row);
            let mut acc = 0.0;
            for (t, p) in truth_local.iter().enumerate() {
                let dx = v.get(0, 2 * t).to_f64().unwrap() - p[0];
                let dy = v.get(0, 2 * t + 1).to_f64().unwrap() - p[1];
                acc += (dx * dx + dy * dy).sqrt();
            }
            acc / truth_local.len() as f64
        })
        .collect()
}

/// One window's winner-take-all loss term: decodes all heads, picks the one
/// with the lowest mean per-point error (ties to the lowest index), and
/// builds that head's error on the tape so gradient flows only to the
/// winner. Returns the loss node and the winning head index.
pub fn window_prediction_loss<S: Scalar>(
    tape: &Tape<S>,
    dec: &BoundDecoder,
    final_hidden: Var,
    future: &[[f64; 2]],
    origin: [f64; 2],
) -> Result<(Var, usize)> {
    if future.len() != dec.t_pred {
        return Err(Error::Shape(format!(
            "ground truth has {} points but the decoder predicts {}",
            future.len(),
            dec.t_pred
        )));
    }
    if dec.heads.is_empty() {
        return Err(Error::Shape("decoder with zero heads".into()));
    }
    let truth_local: Vec<[f64; 2]> = future
        .iter()
        .map(|p| [p[0] - origin[0], p[1] - origin[1]])
        .collect();
    let rows = decode_heads(tape, dec, final_hidden)?;
    let errors = head_errors(tape, &rows, &truth_local);
    let best = errors
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.total_cmp(b))
        .map(|(i, _)| i)
        .unwrap();

    let mut acc: Option<Var> = None;
    for (t, p) in truth_local.iter().enumerate() {
        let sel = point_selector(tape, dec.t_pred, t);
        let point = tape.matmul(rows[best], sel)?;
        let truth = tape.leaf(Tensor::row_vec(&[
            S::from(p[0]).unwrap(),
            S::from(p[1]).unwrap(),
        ]));
        let d = tape.norm(tape.sub(point, truth)?)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, d)?,
            None => d,
        });
    }
    let loss = tape.scale(
        acc.expect("t_pred >= 1"),
        S::one() / S::from(dec.t_pred).unwrap(),
    )?;
    Ok((loss, best))
}

/// Mean of per-window loss contributions, in their given (deterministic)
/// order — the overall prediction loss across both domains' windows.
pub fn prediction_loss<S: Scalar>(tape: &Tape<S>, contributions: &[Var]) -> Result<Var> {
    if contributions.is_empty() {
        return Err(Error::Shape("prediction loss over zero windows".into()));
    }
    let mut acc = contributions[0];
    for &c in &contributions[1..] {
        acc = tape.add(acc, c)?;
    }
    tape.scale(acc, S::one() / S::from(contributions.len()).unwrap())
}

/// The combined training objective and its ingredients, recorded in f64 so
/// the identity `total = λ1·l_rec + λ2·l_pre` holds to reporting precision
/// regardless of the training scalar type.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_rec: f64,
    pub l_pre: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Combines the two loss terms with their coefficients.
pub fn total_loss(l_rec: f64, l_pre: f64, lambda1: f64, lambda2: f64) -> LossBreakdown {
    LossBreakdown {
        l_rec,
        l_pre,
        total: lambda1 * l_rec + lambda2 * l_pre,
        lambda1,
        lambda2,
    }
}

/// On-tape counterpart of [`total_loss`]: the scalar the optimizer actually
/// differentiates.
pub fn combine_losses<S: Scalar>(
    tape: &Tape<S>,
    l_rec: Var,
    l_pre: Var,
    lambda1: f64,
    lambda2: f64,
) -> Result<Var> {
    let a = tape.scale(l_rec, S::from(lambda1).unwrap())?;
    let b = tape.scale(l_pre, S::from(lambda2).unwrap())?;
    tape.add(a, b)
}
