//! Domain discrepancy measures and alignment losses.
//!
//! The alignment loss compares the two source domains' per-step features and
//! penalizes distribution differences, so the encoder learns domain-invariant
//! representations. The measure slot is pluggable: vector measures (L2, KLD,
//! JS, COS) compare the aggregated per-step feature, while set measures
//! (MMD, CORAL) are sample statistics over the per-window feature sets —
//! treating them otherwise would collapse them to a single sample.
//!
//! Three strategies decide *which* features get aligned: `recurrent` sums
//! per-step discrepancies of the GRU hidden states over every observed step,
//! `state` does the same over the pre-recurrence attention contexts, and
//! `sequence` aligns only the final hidden step. All three are selected by
//! name at runtime through [`strategy_by_name`], mirroring
//! [`measure_by_name`] for the measure slot.

use crate::diffnum::{Scalar, Tape, Tensor, Var};
use crate::encoder::StepFeatures;
use crate::error::{Error, Result};

/// The discrepancy measures available in the alignment loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiscrepancyKind {
    /// Euclidean distance of the aggregated features.
    L2,
    /// Biased maximum-mean-discrepancy estimate (RBF kernel) on feature sets.
    Mmd,
    /// Squared Frobenius distance of feature-set covariances, / (4·d²).
    Coral,
    /// KL(softmax(a) ‖ softmax(b)) with 1e-8 smoothing inside the logs.
    Kld,
    /// Jensen–Shannon divergence of the softmax-normalized pair.
    Js,
    /// 1 − cosine similarity of the aggregated features.
    Cos,
}

impl DiscrepancyKind {
    pub const ALL: [DiscrepancyKind; 6] = [
        DiscrepancyKind::L2,
        DiscrepancyKind::Mmd,
        DiscrepancyKind::Coral,
        DiscrepancyKind::Kld,
        DiscrepancyKind::Js,
        DiscrepancyKind::Cos,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(DiscrepancyKind::L2),
            "mmd" => Ok(DiscrepancyKind::Mmd),
            "coral" => Ok(DiscrepancyKind::Coral),
            "kld" => Ok(DiscrepancyKind::Kld),
            "js" => Ok(DiscrepancyKind::Js),
            "cos" => Ok(DiscrepancyKind::Cos),
            other => Err(Error::Config(format!(
                "unknown discrepancy measure '{other}' (expected l2|mmd|coral|kld|js|cos)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DiscrepancyKind::L2 => "l2",
            DiscrepancyKind::Mmd => "mmd",
            DiscrepancyKind::Coral => "coral",
            DiscrepancyKind::Kld => "kld",
            DiscrepancyKind::Js => "js",
            DiscrepancyKind::Cos => "cos",
        }
    }

    /// Builds the measure implementation for this kind.
    pub fn measure<S: Scalar>(self) -> Box<dyn Discrepancy<S>> {
        match self {
            DiscrepancyKind::L2 => Box::new(L2Distance),
            DiscrepancyKind::Mmd => Box::new(MmdDistance),
            DiscrepancyKind::Coral => Box::new(CoralDistance),
            DiscrepancyKind::Kld => Box::new(KlDivergence),
            DiscrepancyKind::Js => Box::new(JsDivergence),
            DiscrepancyKind::Cos => Box::new(CosineDistance),
        }
    }
}

/// The alignment strategy variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StrategyKind {
    /// Align hidden states at every observed step (the full method).
    Recurrent,
    /// Align the pre-recurrence attention contexts at every step.
    State,
    /// Align only the final hidden step.
    Sequence,
}

impl StrategyKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "recurrent" => Ok(StrategyKind::Recurrent),
            "state" => Ok(StrategyKind::State),
            "sequence" => Ok(StrategyKind::Sequence),
            other => Err(Error::Config(format!(
                "unknown alignment strategy '{other}' (expected recurrent|state|sequence)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Recurrent => "recurrent",
            StrategyKind::State => "state",
            StrategyKind::Sequence => "sequence",
        }
    }

    pub fn strategy<S: Scalar>(self) -> Box<dyn AlignmentStrategy<S>> {
        match self {
            StrategyKind::Recurrent => Box::new(RecurrentStrategy),
            StrategyKind::State => Box::new(StateStrategy),
            StrategyKind::Sequence => Box::new(SequenceStrategy),
        }
    }
}

/// Everything the loss needs to know about how to align.
#[derive(Clone, Debug)]
pub struct AlignmentConfig {
    pub measure: DiscrepancyKind,
    pub strategy: StrategyKind,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Source-domain count; ≥ 2 for training.
    pub m: usize,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            measure: DiscrepancyKind::L2,
            strategy: StrategyKind::Recurrent,
            lambda1: 1.0,
            lambda2: 1.0,
            m: 2,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return Err(Error::Config(format!(
                "lambda1 must be a finite non-negative number, got {}",
                self.lambda1
            )));
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(Error::Config(format!(
                "lambda2 must be a finite non-negative number, got {}",
                self.lambda2
            )));
        }
        if self.m < 2 {
            return Err(Error::Config(format!(
                "training needs at least 2 source domains, got {}",
                self.m
            )));
        }
        Ok(())
    }
}

/// A non-negative distance between two domains' step features, differentiable
/// through the tape on both sides.
pub trait Discrepancy<S: Scalar> {
    fn name(&self) -> &'static str;
    /// Whether `measure(a, b) == measure(b, a)` holds mathematically.
    fn is_symmetric(&self) -> bool;
    fn measure(&self, tape: &Tape<S>, a: &StepFeatures, b: &StepFeatures) -> Result<Var>;
}

/// Looks up a measure implementation by its config name.
pub fn measure_by_name<S: Scalar>(name: &str) -> Result<Box<dyn Discrepancy<S>>> {
    Ok(DiscrepancyKind::parse(name)?.measure())
}

pub struct L2Distance;

impl<S: Scalar> Discrepancy<S> for L2Distance {
    fn name(&self) -> &'static str {
        "l2"
    }
    fn is_symmetric(&self) -> bool {
        true
    }
    fn measure(&self, tape: &Tape<S>, a: &StepFeatures, b: &StepFeatures) -> Result<Var> {
        let d = tape.sub(a.aggregated, b.aggregated)?;
        tape.norm(d)
    }
}

/// `[n, d] x [m, d] -> [n, m]` matrix of pairwise squared distances via
/// `||x−y||² = ||x||² − 2x·y + ||y||²`. The diagonal of a self-pairing is
/// exactly zero because the three terms cancel bitwise.
fn pairwise_sq_dists<S: Scalar>(tape: &Tape<S>, a: Var, b: Var) -> Result<Var> {
    let a_sq = tape.sum_cols(tape.mul(a, a)?)?; // [n, 1]
    let b_sq = tape.sum_cols(tape.mul(b, b)?)?; // [m, 1]
    let b_sq_row = tape.transpose(b_sq)?;
    let cross = tape.matmul(a, tape.transpose(b)?)?;
    let cross = tape.scale(cross, S::from(-2.0).unwrap())?;
    let with_b = tape.add_row(cross, b_sq_row)?;
    tape.add_col(with_b, a_sq)
}

/// Median of the pooled pairwise squared distances, floored away from zero.
/// Recomputed per call from the current values and treated as a constant
/// with respect to gradients.
fn median_bandwidth<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> f64 {
    let dim = a.cols();
    let row = |t: &Tensor<S>, r: usize| -> Vec<f64> {
        t.row(r).iter().map(|v| v.to_f64().unwrap()).collect()
    };
    let mut pts: Vec<Vec<f64>> = Vec::with_capacity(a.rows() + b.rows());
    for r in 0..a.rows() {
        pts.push(row(a, r));
    }
    for r in 0..b.rows() {
        pts.push(row(b, r));
    }
    let mut d2s = Vec::with_capacity(pts.len() * (pts.len() - 1) / 2);
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let mut d2 = 0.0;
            for k in 0..dim {
                let diff = pts[i][k] - pts[j][k];
                d2 += diff * diff;
            }
            d2s.push(d2);
        }
    }
    d2s.sort_by(f64::total_cmp);
    let n = d2s.len();
    let median = if n % 2 == 1 {
        d2s[n / 2]
    } else {
        0.5 * (d2s[n / 2 - 1] + d2s[n / 2])
    };
    median.max(1e-12)
}

pub struct MmdDistance;

impl<S: Scalar> Discrepancy<S> for MmdDistance {
    fn name(&self) -> &'static str {
        "mmd"
    }
    fn is_symmetric(&self) -> bool {
        true
    }
    fn measure(&self, tape: &Tape<S>, a: &StepFeatures, b: &StepFeatures) -> Result<Var> {
        let (n, da) = tape.shape(a.set);
        let (m, db) = tape.shape(b.set);
        if da != db {
            return Err(Error::Shape(format!(
                "mmd: feature widths differ, {da} vs {db}"
            )));
        }
        let sigma_sq = median_bandwidth(&tape.value(a.set), &tape.value(b.set));
        let coef = S::from(-1.0 / (2.0 * sigma_sq)).unwrap();
        let kernel_sum = |x: Var, y: Var| -> Result<Var> {
            let d2 = pairwise_sq_dists(tape, x, y)?;
            let k = tape.exp(tape.scale(d2, coef)?)?;
            tape.sum_all(k)
        };
        let t_aa = tape.scale(kernel_sum(a.set, a.set)?, S::one() / S::from(n * n).unwrap())?;
        let t_bb = tape.scale(kernel_sum(b.set, b.set)?, S::one() / S::from(m * m).unwrap())?;
        let t_ab = tape.scale(
            kernel_sum(a.set, b.set)?,
            S::from(2.0).unwrap() / S::from(n * m).unwrap(),
        )?;
        tape.sub(tape.add(t_aa, t_bb)?, t_ab)
    }
}

pub struct CoralDistance;

/// Sample covariance (n−1 denominator) of the rows of `x`.
fn covariance<S: Scalar>(tape: &Tape<S>, x: Var) -> Result<Var> {
    let (n, _) = tape.shape(x);
    if n < 2 {
        return Err(Error::Shape(format!(
            "coral needs at least 2 samples per set to form a covariance, got {n}"
        )));
    }
    let mean = tape.mean_rows(x)?;
    let neg_mean = tape.scale(mean, S::from(-1.0).unwrap())?;
    let centered = tape.add_row(x, neg_mean)?;
    let cov = tape.matmul(tape.transpose(centered)?, centered)?;
    tape.scale(cov, S::one() / S::from(n - 1).unwrap())
}

impl<S: Scalar> Discrepancy<S> for CoralDistance {
    fn name(&self) -> &'static str {
        "coral"
    }
    fn is_symmetric(&self) -> bool {
        true
    }
    fn measure(&self, tape: &Tape<S>, a: &StepFeatures, b: &StepFeatures) -> Result<Var> {
        let (_, da) = tape.shape(a.set);
        let (_, db) = tape.shape(b.set);
        if da != db {
            return Err(Error::Shape(format!(
                "coral: feature widths differ, {da} vs {db}"
            )));
        }
        let ca = covariance(tape, a.set)?;
        let cb = covariance(tape, b.set)?;
        let d = tape.sub(ca, cb)?;
        let fro_sq = tape.dot(d, d)?;
        tape.scale(fro_sq, S::one() / S::from(4 * da * da).unwrap())
    }
}

const KL_SMOOTHING: f64 = 1e-8;

/// `Σ p ⊙ (ln(p + ε) − ln(q + ε))` for two already-normalized rows.
fn kl_smoothed<S: Scalar>(tape: &Tape<S>, p: Var, q: Var) -> Result<Var> {
    let eps = S::from(KL_SMOOTHING).unwrap();
    let lp = tape.ln(tape.affine(p, S::one(), eps)?)?;
    let lq = tape.ln(tape.affine(q, S::one(), eps)?)?;
    tape.dot(p, tape.sub(lp, lq)?)
}

pub struct KlDivergence;

impl<S: Scalar> Discrepancy<S> for KlDivergence {
    fn name(&self) -> &'static str {
        "kld"
    }
    fn is_symmetric(&self) -> bool {
        false
    }
    fn measure(&self, tape: &Tape<S>, a: &StepFeatures, b: &StepFeatures) -> Result<Var> {
        let p = tape.softmax(a.aggregated)?;
        let q = tape.softmax(b.aggregated)?;
        kl_smoothed(tape, p, q)
    }
}

pub struct JsDivergence;

impl<S: Scalar> Discrepancy<S> for JsDivergence {
    fn name(&self) -> &'static str {
        "js"
    }
    fn is_symmetric(&self) -> bool {
        true
    }
    fn measure(&self, tape: &Tape<S>, a: &StepFeatures, b: &StepFeatures) -> Result<Var> {
        let half = S::from(0.5).unwrap();
        let p = tape.softmax(a.aggregated)?;
        let q = tape.softmax(b.aggregated)?;
        let mix = tape.scale(tape.add(p, q)?, half)?;
        let kl_pm = kl_smoothed(tape, p, mix)?;
        let kl_qm = kl_smoothed(tape, q, mix)?;
        tape.scale(tape.add(kl_pm, kl_qm)?, half)
    }
}

pub struct CosineDistance;

impl<S: Scalar> Discrepancy<S> for CosineDistance {
    fn name(&self) -> &'static str {
        "cos"
    }
    fn is_symmetric(&self) -> bool {
        true
    }
    fn measure(&self, tape: &Tape<S>, a: &StepFeatures, b: &StepFeatures) -> Result<Var> {
        let d = tape.dot(a.aggregated, b.aggregated)?;
        let na = tape.norm(a.aggregated)?;
        let nb = tape.norm(b.aggregated)?;
        // Tiny additive floor keeps the ratio defined for zero vectors
        // without visibly moving it otherwise.
        let denom = tape.affine(tape.mul(na, nb)?, S::one(), S::from(1e-12).unwrap())?;
        let cos = tape.div(d, denom)?;
        tape.one_minus(cos)
    }
}

fn check_aligned(s1: &[StepFeatures], s2: &[StepFeatures]) -> Result<()> {
    if s1.is_empty() || s2.is_empty() {
        return Err(Error::Shape("alignment loss over an empty step sequence".into()));
    }
    if s1.len() != s2.len() {
        return Err(Error::Shape(format!(
            "domains disagree on observation length: {} vs {}",
            s1.len(),
            s2.len()
        )));
    }
    Ok(())
}

/// Sum of per-step discrepancies over two equally long feature sequences.
fn per_step_sum<S: Scalar>(
    tape: &Tape<S>,
    measure: &dyn Discrepancy<S>,
    s1: &[StepFeatures],
    s2: &[StepFeatures],
) -> Result<Var> {
    check_aligned(s1, s2)?;
    let mut total: Option<Var> = None;
    for (a, b) in s1.iter().zip(s2) {
        let d = measure.measure(tape, a, b)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, d)?,
            None => d,
        });
    }
    Ok(total.expect("non-empty sequences"))
}

/// The full alignment loss: per-step discrepancies of the aggregated hidden
/// states, accumulated over every observed step and backpropagated once as a
/// single summed scalar.
pub fn recurrent_alignment_loss<S: Scalar>(
    tape: &Tape<S>,
    measure: &dyn Discrepancy<S>,
    s1: &[StepFeatures],
    s2: &[StepFeatures],
) -> Result<Var> {
    per_step_sum(tape, measure, s1, s2)
}

/// Ablation arm: the same per-step sum but over the pre-recurrence attention
/// contexts instead of the hidden states.
pub fn state_alignment_loss<S: Scalar>(
    tape: &Tape<S>,
    measure: &dyn Discrepancy<S>,
    contexts1: &[StepFeatures],
    contexts2: &[StepFeatures],
) -> Result<Var> {
    per_step_sum(tape, measure, contexts1, contexts2)
}

/// Ablation arm: the discrepancy at the final observed step only.
pub fn sequence_alignment_loss<S: Scalar>(
    tape: &Tape<S>,
    measure: &dyn Discrepancy<S>,
    s1: &[StepFeatures],
    s2: &[StepFeatures],
) -> Result<Var> {
    check_aligned(s1, s2)?;
    measure.measure(tape, s1.last().unwrap(), s2.last().unwrap())
}

/// Generalization beyond two sources: the mean discrepancy over all ordered
/// domain pairs (self pairs included; they contribute zero), summed over
/// steps. Cost grows as T_obs·m² discrepancy evaluations.
pub fn multi_source_loss<S: Scalar>(
    tape: &Tape<S>,
    measure: &dyn Discrepancy<S>,
    domains: &[&[StepFeatures]],
) -> Result<Var> {
    let m = domains.len();
    if m == 0 {
        return Err(Error::Shape("multi-source loss needs at least one domain".into()));
    }
    let t_obs = domains[0].len();
    if t_obs == 0 {
        return Err(Error::Shape("multi-source loss over an empty step sequence".into()));
    }
    if domains.iter().any(|d| d.len() != t_obs) {
        return Err(Error::Shape(
            "multi-source domains disagree on observation length".into(),
        ));
    }
    let mut total: Option<Var> = None;
    for t in 0..t_obs {
        for p in 0..m {
            for q in 0..m {
                let d = measure.measure(tape, &domains[p][t], &domains[q][t])?;
                total = Some(match total {
                    Some(acc) => tape.add(acc, d)?,
                    None => d,
                });
            }
        }
    }
    tape.scale(total.expect("m ≥ 1, t_obs ≥ 1"), S::one() / S::from(m * m).unwrap())
}

/// Both per-step feature families of one domain batch, as produced by the
/// encoder: the GRU hidden states and the attention contexts.
pub struct DomainFeatures {
    pub hidden: Vec<StepFeatures>,
    pub contexts: Vec<StepFeatures>,
}

/// Chooses which features of two domains get aligned and how.
pub trait AlignmentStrategy<S: Scalar> {
    fn name(&self) -> &'static str;
    fn loss(
        &self,
        tape: &Tape<S>,
        measure: &dyn Discrepancy<S>,
        dom1: &DomainFeatures,
        dom2: &DomainFeatures,
    ) -> Result<Var>;
}

pub struct RecurrentStrategy;
pub struct StateStrategy;
pub struct SequenceStrategy;

impl<S: Scalar> AlignmentStrategy<S> for RecurrentStrategy {
    fn name(&self) -> &'static str {
        "recurrent"
    }
    fn loss(
        &self,
        tape: &Tape<S>,
        measure: &dyn Discrepancy<S>,
        dom1: &DomainFeatures,
        dom2: &DomainFeatures,
    ) -> Result<Var> {
        recurrent_alignment_loss(tape, measure, &dom1.hidden, &dom2.hidden)
    }
}

impl<S: Scalar> AlignmentStrategy<S> for StateStrategy {
    fn name(&self) -> &'static str {
        "state"
    }
    fn loss(
        &self,
        tape: &Tape<S>,
        measure: &dyn Discrepancy<S>,
        dom1: &DomainFeatures,
        dom2: &DomainFeatures,
    ) -> Result<Var> {
        state_alignment_loss(tape, measure, &dom1.contexts, &dom2.contexts)
    }
}

impl<S: Scalar> AlignmentStrategy<S> for SequenceStrategy {
    fn name(&self) -> &'static str {
        "sequence"
    }
    fn loss(
        &self,
        tape: &Tape<S>,
        measure: &dyn Discrepancy<S>,
        dom1: &DomainFeatures,
        dom2: &DomainFeatures,
    ) -> Result<Var> {
        sequence_alignment_loss(tape, measure, &dom1.hidden, &dom2.hidden)
    }
}

/// Looks up a strategy implementation by its config name.
pub fn strategy_by_name<S: Scalar>(name: &str) -> Result<Box<dyn AlignmentStrategy<S>>> {
    Ok(StrategyKind::parse(name)?.strategy())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn features_from(tape: &Tape<f64>, rows: &[Vec<f64>]) -> StepFeatures {
        let set = tape.leaf(Tensor::from_rows(rows).unwrap());
        let aggregated = tape.sum_rows(set).unwrap();
        StepFeatures { set, aggregated }
    }

    fn random_rows(rng: &mut ChaCha8Rng, n: usize, h: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..h).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect()
    }

    fn random_features(
        tape: &Tape<f64>,
        rng: &mut ChaCha8Rng,
        t_obs: usize,
        n: usize,
        h: usize,
    ) -> Vec<StepFeatures> {
        (0..t_obs)
            .map(|_| {
                let rows = random_rows(rng, n, h);
                features_from(tape, &rows)
            })
            .collect()
    }

    #[test]
    fn every_measure_has_zero_self_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for kind in DiscrepancyKind::ALL {
            let measure = kind.measure::<f64>();
            for _ in 0..20 {
                let tape = Tape::new();
                let rows = random_rows(&mut rng, 5, 7);
                // Two independently built but value-identical features.
                let a = features_from(&tape, &rows);
                let b = features_from(&tape, &rows);
                let d = measure.measure(&tape, &a, &b).unwrap();
                let v = tape.scalar(d);
                assert!(
                    v.abs() <= 1e-9,
                    "{}: self-distance {v}",
                    measure.name()
                );
            }
        }
    }

    #[test]
    fn every_measure_is_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for kind in DiscrepancyKind::ALL {
            let measure = kind.measure::<f64>();
            for _ in 0..20 {
                let tape = Tape::new();
                let a = features_from(&tape, &random_rows(&mut rng, 4, 6));
                let b = features_from(&tape, &random_rows(&mut rng, 4, 6));
                let v = tape.scalar(measure.measure(&tape, &a, &b).unwrap());
                assert!(v >= 0.0, "{}: negative discrepancy {v}", measure.name());
            }
        }
    }

    #[test]
    fn symmetric_measures_commute() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for kind in DiscrepancyKind::ALL {
            let measure = kind.measure::<f64>();
            if !measure.is_symmetric() {
                continue;
            }
            for _ in 0..20 {
                let tape = Tape::new();
                let a = features_from(&tape, &random_rows(&mut rng, 4, 6));
                let b = features_from(&tape, &random_rows(&mut rng, 4, 6));
                let ab = tape.scalar(measure.measure(&tape, &a, &b).unwrap());
                let ba = tape.scalar(measure.measure(&tape, &b, &a).unwrap());
                assert!(
                    (ab - ba).abs() <= 1e-9 * ab.abs().max(1.0),
                    "{}: {ab} vs {ba}",
                    measure.name()
                );
            }
        }
    }

    #[test]
    fn l2_of_a_three_four_difference_is_five() {
        let tape = Tape::new();
        let a = features_from(&tape, &[vec![4.0, 6.0]]);
        let b = features_from(&tape, &[vec![1.0, 2.0]]);
        let d = L2Distance.measure(&tape, &a, &b).unwrap();
        assert_eq!(tape.scalar(d), 5.0);
    }

    #[test]
    fn js_divergence_never_exceeds_ln_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..200 {
            let tape = Tape::new();
            let a = features_from(&tape, &random_rows(&mut rng, 3, 8));
            let b = features_from(&tape, &random_rows(&mut rng, 3, 8));
            let v = tape.scalar(JsDivergence.measure(&tape, &a, &b).unwrap());
            assert!(v <= std::f64::consts::LN_2, "JS = {v}");
        }
    }

    #[test]
    fn kld_is_asymmetric_in_general() {
        let tape = Tape::new();
        let a = features_from(&tape, &[vec![2.0, 0.0, -1.0]]);
        let b = features_from(&tape, &[vec![-1.0, 1.0, 0.5]]);
        let ab = tape.scalar(KlDivergence.measure(&tape, &a, &b).unwrap());
        let ba = tape.scalar(KlDivergence.measure(&tape, &b, &a).unwrap());
        assert!((ab - ba).abs() > 1e-6);
    }

    #[test]
    fn coral_rejects_single_sample_sets_and_mmd_accepts_them() {
        let tape = Tape::new();
        let a = features_from(&tape, &[vec![1.0, 2.0, 3.0]]);
        let b = features_from(&tape, &[vec![0.5, 1.0, -1.0]]);
        assert!(CoralDistance.measure(&tape, &a, &b).is_err());
        let v = tape.scalar(MmdDistance.measure(&tape, &a, &b).unwrap());
        assert!(v.is_finite() && v >= 0.0);
    }

    #[test]
    fn measures_reject_width_mismatch() {
        for kind in DiscrepancyKind::ALL {
            let tape = Tape::new();
            let measure = kind.measure::<f64>();
            let a = features_from(&tape, &[vec![1.0, 2.0, 3.0], vec![0.0, 1.0, 2.0]]);
            let b = features_from(&tape, &[vec![1.0, 2.0], vec![0.0, 1.0]]);
            assert!(
                measure.measure(&tape, &a, &b).is_err(),
                "{} accepted mismatched widths",
                measure.name()
            );
        }
    }

    /// Naive MMD² oracle: direct per-pair kernel evaluation, no matrix
    /// identities, same median bandwidth rule.
    fn naive_mmd(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        let mut d2s = Vec::new();
        let pooled: Vec<&Vec<f64>> = a.iter().chain(b.iter()).collect();
        for i in 0..pooled.len() {
            for j in i + 1..pooled.len() {
                let d2: f64 = pooled[i]
                    .iter()
                    .zip(pooled[j])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                d2s.push(d2);
            }
        }
        d2s.sort_by(f64::total_cmp);
        let n = d2s.len();
        let med = if n % 2 == 1 {
            d2s[n / 2]
        } else {
            0.5 * (d2s[n / 2 - 1] + d2s[n / 2])
        };
        let sigma_sq = med.max(1e-12);
        let k = |x: &Vec<f64>, y: &Vec<f64>| -> f64 {
            let d2: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
            (-d2 / (2.0 * sigma_sq)).exp()
        };
        let mut t_aa = 0.0;
        for x in a {
            for y in a {
                t_aa += k(x, y);
            }
        }
        let mut t_bb = 0.0;
        for x in b {
            for y in b {
                t_bb += k(x, y);
            }
        }
        let mut t_ab = 0.0;
        for x in a {
            for y in b {
                t_ab += k(x, y);
            }
        }
        t_aa / (a.len() * a.len()) as f64 + t_bb / (b.len() * b.len()) as f64
            - 2.0 * t_ab / (a.len() * b.len()) as f64
    }

    #[test]
    fn mmd_matches_naive_per_pair_estimator() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..20 {
            let tape = Tape::new();
            let ra = random_rows(&mut rng, 5, 4);
            let rb = random_rows(&mut rng, 7, 4); // unequal sizes on purpose
            let a = features_from(&tape, &ra);
            let b = features_from(&tape, &rb);
            let got = tape.scalar(MmdDistance.measure(&tape, &a, &b).unwrap());
            let want = naive_mmd(&ra, &rb);
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    /// Naive CORAL oracle: covariances by explicit loops.
    fn naive_coral(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        let d = a[0].len();
        let cov = |s: &[Vec<f64>]| -> Vec<Vec<f64>> {
            let n = s.len();
            let mut mean = vec![0.0; d];
            for row in s {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v / n as f64;
                }
            }
            let mut c = vec![vec![0.0; d]; d];
            for row in s {
                for i in 0..d {
                    for j in 0..d {
                        c[i][j] += (row[i] - mean[i]) * (row[j] - mean[j]) / (n - 1) as f64;
                    }
                }
            }
            c
        };
        let ca = cov(a);
        let cb = cov(b);
        let mut fro = 0.0;
        for i in 0..d {
            for j in 0..d {
                let diff = ca[i][j] - cb[i][j];
                fro += diff * diff;
            }
        }
        fro / (4 * d * d) as f64
    }

    #[test]
    fn coral_matches_naive_covariance_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..20 {
            let tape = Tape::new();
            let ra = random_rows(&mut rng, 6, 4);
            let rb = random_rows(&mut rng, 6, 4);
            let a = features_from(&tape, &ra);
            let b = features_from(&tape, &rb);
            let got = tape.scalar(CoralDistance.measure(&tape, &a, &b).unwrap());
            let want = naive_coral(&ra, &rb);
            assert!((got - want).abs() < 1e-9 * want.max(1.0), "{got} vs {want}");
        }
    }

    /// Naive KLD oracle: plain softmax + smoothed KL in straightforward
    /// loops over the aggregated vectors.
    fn naive_kld(a: &[f64], b: &[f64]) -> f64 {
        let softmax = |v: &[f64]| -> Vec<f64> {
            let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.iter().map(|e| e / z).collect()
        };
        let p = softmax(a);
        let q = softmax(b);
        p.iter()
            .zip(&q)
            .map(|(pi, qi)| pi * ((pi + 1e-8).ln() - (qi + 1e-8).ln()))
            .sum()
    }

    #[test]
    fn kld_matches_naive_softmax_kl() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let tape = Tape::new();
            let ra = random_rows(&mut rng, 3, 6);
            let rb = random_rows(&mut rng, 3, 6);
            let a = features_from(&tape, &ra);
            let b = features_from(&tape, &rb);
            let agg = |rows: &[Vec<f64>]| -> Vec<f64> {
                let mut out = vec![0.0; rows[0].len()];
                for row in rows {
                    for (o, v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                out
            };
            let got = tape.scalar(KlDivergence.measure(&tape, &a, &b).unwrap());
            let want = naive_kld(&agg(&ra), &agg(&rb));
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn recurrent_loss_is_zero_for_identical_domains() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let tape = Tape::new();
        let rows: Vec<Vec<Vec<f64>>> = (0..4).map(|_| random_rows(&mut rng, 3, 5)).collect();
        let s1: Vec<StepFeatures> = rows.iter().map(|r| features_from(&tape, r)).collect();
        let s2: Vec<StepFeatures> = rows.iter().map(|r| features_from(&tape, r)).collect();
        for kind in DiscrepancyKind::ALL {
            let measure = kind.measure::<f64>();
            let l = recurrent_alignment_loss(&tape, measure.as_ref(), &s1, &s2).unwrap();
            assert!(tape.scalar(l).abs() <= 1e-9, "{}", measure.name());
        }
    }

    #[test]
    fn recurrent_loss_equals_sum_of_per_step_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let tape = Tape::new();
        let s1 = random_features(&tape, &mut rng, 5, 3, 6);
        let s2 = random_features(&tape, &mut rng, 5, 3, 6);
        let measure = L2Distance;
        let total = tape.scalar(recurrent_alignment_loss(&tape, &measure, &s1, &s2).unwrap());
        let mut by_hand = 0.0;
        for (a, b) in s1.iter().zip(&s2) {
            by_hand += tape.scalar(measure.measure(&tape, a, b).unwrap());
        }
        assert!((total - by_hand).abs() <= 1e-9 * by_hand.max(1.0));
    }

    #[test]
    fn single_step_recurrent_loss_is_one_discrepancy() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let tape = Tape::new();
        let s1 = random_features(&tape, &mut rng, 1, 3, 6);
        let s2 = random_features(&tape, &mut rng, 1, 3, 6);
        let l = tape.scalar(recurrent_alignment_loss(&tape, &L2Distance, &s1, &s2).unwrap());
        let d = tape.scalar(L2Distance.measure(&tape, &s1[0], &s2[0]).unwrap());
        assert_eq!(l, d);
        // And the sequence variant coincides when there is only one step.
        let seq = tape.scalar(sequence_alignment_loss(&tape, &L2Distance, &s1, &s2).unwrap());
        assert_eq!(seq, d);
    }

    #[test]
    fn recurrent_loss_rejects_mismatched_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let tape = Tape::new();
        let s1 = random_features(&tape, &mut rng, 3, 3, 6);
        let s2 = random_features(&tape, &mut rng, 4, 3, 6);
        assert!(recurrent_alignment_loss(&tape, &L2Distance, &s1, &s2).is_err());
    }

    #[test]
    fn multi_source_with_one_domain_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let tape = Tape::new();
        let s = random_features(&tape, &mut rng, 3, 4, 5);
        for kind in DiscrepancyKind::ALL {
            let measure = kind.measure::<f64>();
            let l = multi_source_loss(&tape, measure.as_ref(), &[&s]).unwrap();
            assert!(tape.scalar(l).abs() <= 1e-12, "{}", measure.name());
        }
    }

    #[test]
    fn multi_source_two_domains_halve_the_pairwise_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for kind in DiscrepancyKind::ALL {
            let measure = kind.measure::<f64>();
            if !measure.is_symmetric() {
                continue;
            }
            let tape = Tape::new();
            let s1 = random_features(&tape, &mut rng, 4, 3, 5);
            let s2 = random_features(&tape, &mut rng, 4, 3, 5);
            let pair = tape.scalar(
                recurrent_alignment_loss(&tape, measure.as_ref(), &s1, &s2).unwrap(),
            );
            let multi =
                tape.scalar(multi_source_loss(&tape, measure.as_ref(), &[&s1, &s2]).unwrap());
            assert!(
                (multi - pair / 2.0).abs() <= 1e-9 * pair.abs().max(1.0),
                "{}: {multi} vs {}",
                measure.name(),
                pair / 2.0
            );
        }
    }

    #[test]
    fn multi_source_three_domains_match_brute_force() {
        // Independent oracle: plain-f64 L2 over the aggregated values,
        // ordered double loop, self terms included.
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let tape = Tape::new();
        let doms: Vec<Vec<StepFeatures>> = (0..3)
            .map(|_| random_features(&tape, &mut rng, 4, 3, 5))
            .collect();
        let refs: Vec<&[StepFeatures]> = doms.iter().map(|d| d.as_slice()).collect();
        let got = tape.scalar(multi_source_loss(&tape, &L2Distance, &refs).unwrap());

        let agg: Vec<Vec<Vec<f64>>> = doms
            .iter()
            .map(|d| {
                d.iter()
                    .map(|f| tape.value(f.aggregated).as_slice().to_vec())
                    .collect()
            })
            .collect();
        let mut want = 0.0;
        for t in 0..4 {
            for p in 0..3 {
                for q in 0..3 {
                    let d2: f64 = agg[p][t]
                        .iter()
                        .zip(&agg[q][t])
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum();
                    want += d2.sqrt();
                }
            }
        }
        want /= 9.0;
        assert!((got - want).abs() <= 1e-9 * want.max(1.0), "{got} vs {want}");
    }

    #[test]
    fn sequence_loss_ignores_earlier_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let tape = Tape::new();
        let mut s1 = random_features(&tape, &mut rng, 4, 3, 5);
        let s2 = random_features(&tape, &mut rng, 4, 3, 5);
        let before = tape.scalar(sequence_alignment_loss(&tape, &L2Distance, &s1, &s2).unwrap());
        // Perturb everything except the final step.
        for f in s1.iter_mut().take(3) {
            *f = features_from(&tape, &random_rows(&mut rng, 3, 5));
        }
        let after = tape.scalar(sequence_alignment_loss(&tape, &L2Distance, &s1, &s2).unwrap());
        assert_eq!(before, after);
    }

    #[test]
    fn strategies_differ_on_constructed_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let tape = Tape::new();
        let dom = |rng: &mut ChaCha8Rng| DomainFeatures {
            hidden: random_features(&tape, rng, 4, 3, 5),
            contexts: random_features(&tape, rng, 4, 3, 5),
        };
        let d1 = dom(&mut rng);
        let d2 = dom(&mut rng);
        let vals: Vec<f64> = [
            StrategyKind::Recurrent,
            StrategyKind::State,
            StrategyKind::Sequence,
        ]
        .iter()
        .map(|k| {
            let strategy = k.strategy::<f64>();
            tape.scalar(strategy.loss(&tape, &L2Distance, &d1, &d2).unwrap())
        })
        .collect();
        assert!((vals[0] - vals[1]).abs() > 1e-6);
        assert!((vals[0] - vals[2]).abs() > 1e-6);
        assert!((vals[1] - vals[2]).abs() > 1e-6);
        // Recurrent over hidden must dominate its own last term.
        assert!(vals[0] > vals[2]);
    }

    #[test]
    fn registry_resolves_all_names_and_rejects_unknowns() {
        for kind in DiscrepancyKind::ALL {
            let m = measure_by_name::<f64>(kind.name()).unwrap();
            assert_eq!(m.name(), kind.name());
        }
        for name in ["recurrent", "state", "sequence"] {
            let s = strategy_by_name::<f64>(name).unwrap();
            assert_eq!(s.name(), name);
        }
        assert!(measure_by_name::<f64>("wasserstein").is_err());
        assert!(strategy_by_name::<f64>("adversarial").is_err());
    }

    #[test]
    fn alignment_config_validation() {
        let mut cfg = AlignmentConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.lambda1 = -0.5;
        assert!(cfg.validate().is_err());
        cfg.lambda1 = 1.0;
        cfg.m = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn alignment_gradients_match_finite_differences() {
        use crate::diffnum::gradcheck::{central_diff, max_rel_err};
        use crate::diffnum::init::uniform_fan_in;

        // Gradient of each measure with respect to the raw feature sets.
        // MMD is excluded: its bandwidth is recomputed from the values on
        // every call and held constant under differentiation, so finite
        // differences would pick up the bandwidth's own variation.
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        for kind in DiscrepancyKind::ALL {
            if kind == DiscrepancyKind::Mmd {
                continue;
            }
            let base_a = uniform_fan_in::<f64>(4, 5, &mut rng);
            let base_b = uniform_fan_in::<f64>(4, 5, &mut rng);

            let eval = |ta: &Tensor<f64>, tb: &Tensor<f64>| -> (f64, Tensor<f64>, Tensor<f64>) {
                let tape = Tape::new();
                let a_set = tape.param(ta.clone());
                let b_set = tape.param(tb.clone());
                let a = StepFeatures {
                    set: a_set,
                    aggregated: tape.sum_rows(a_set).unwrap(),
                };
                let b = StepFeatures {
                    set: b_set,
                    aggregated: tape.sum_rows(b_set).unwrap(),
                };
                let measure = kind.measure::<f64>();
                let l = measure.measure(&tape, &a, &b).unwrap();
                tape.backward(l).unwrap();
                (
                    tape.scalar(l),
                    tape.grad(a_set).unwrap_or_else(|| Tensor::zeros(4, 5)),
                    tape.grad(b_set).unwrap_or_else(|| Tensor::zeros(4, 5)),
                )
            };
            let (_, ga, gb) = eval(&base_a, &base_b);

            let fd_a = central_diff(
                |x| Ok(eval(x, &base_b).0),
                &base_a,
                1e-5,
            )
            .unwrap();
            let fd_b = central_diff(
                |x| Ok(eval(&base_a, x).0),
                &base_b,
                1e-5,
            )
            .unwrap();
            let ea = max_rel_err(&ga, &fd_a);
            let eb = max_rel_err(&gb, &fd_b);
            assert!(ea < 1e-4, "{}: side-a rel err {ea}", kind.name());
            assert!(eb < 1e-4, "{}: side-b rel err {eb}", kind.name());
        }
    }
}
