//! The dual-source training loop and the inference path.
//!
//! Each step draws one equally sized batch per source domain, encodes both
//! through the *same* parameter store (weight sharing is structural: there
//! is only one store to bind), computes the alignment loss across domains
//! and the winner-take-all prediction loss over all windows, and applies a
//! single Adam step on the combined objective. Everything is seeded and
//! single-threaded, so a (seed, config, data) triple reproduces its loss
//! log byte for byte.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::{
    multi_source_loss, AlignmentConfig, DomainFeatures,
};
use crate::decode::{
    moe_decode, prediction_loss, total_loss, window_prediction_loss, LossBreakdown,
    PredictionSet,
};
use crate::diffnum::{lr_schedule, AdamState, Scalar, Tape, Var};
use crate::encoder::{context_feature, domain_feature, encode_window, Aggregation, WindowEncoding};
use crate::error::{Error, Result};
use crate::model::{BoundModel, ModelDims, ModelParams};
use crate::traj::ObservationWindow;

/// Everything the training loop needs beyond the data itself.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub dims: ModelDims,
    pub align: AlignmentConfig,
    /// How per-window states combine into the per-step domain feature.
    pub aggregation: Aggregation,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Multiplicative learning-rate decay factor, applied every
    /// `decay_interval` epochs (0 disables decay).
    pub decay: f64,
    pub decay_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Full-scale defaults: 300 epochs, learning rate 0.001, batch 512,
    /// decay 0.5 every 50 epochs.
    fn default() -> Self {
        TrainConfig {
            dims: ModelDims::paper(),
            align: AlignmentConfig::default(),
            aggregation: Aggregation::Sum,
            lr: 0.001,
            batch_size: 512,
            epochs: 300,
            decay: 0.5,
            decay_interval: 50,
            seed: 1,
        }
    }
}

/// Shrunk defaults for commodity-CPU runs: the desk model, batch 64,
/// 100 epochs.
pub fn desk_train_config() -> TrainConfig {
    TrainConfig {
        dims: ModelDims::desk(),
        batch_size: 64,
        epochs: 100,
        ..TrainConfig::default()
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        self.align.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be ≥ 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epoch count must be ≥ 1".into()));
        }
        if !(self.decay > 0.0 && self.decay.is_finite()) {
            return Err(Error::Config(format!(
                "lr decay factor must be positive, got {}",
                self.decay
            )));
        }
        Ok(())
    }
}

/// One epoch's mean losses and the learning rate in force.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub l_rec: f64,
    pub l_pre: f64,
    pub total: f64,
    pub lr: f64,
}

/// Renders the loss log as CSV (`epoch,l_rec,l_pre,total,lr`), using
/// shortest-round-trip float formatting so identical runs serialize to
/// identical bytes.
pub fn log_csv(log: &[EpochSummary]) -> String {
    let mut out = String::from("epoch,l_rec,l_pre,total,lr\n");
    for row in log {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.epoch, row.l_rec, row.l_pre, row.total, row.lr
        ));
    }
    out
}

pub struct TrainResult<S: Scalar> {
    pub params: ModelParams<S>,
    pub log: Vec<EpochSummary>,
}

fn check_windows(dims: &ModelDims, domains: &[Vec<ObservationWindow>]) -> Result<()> {
    for (d, windows) in domains.iter().enumerate() {
        if windows.is_empty() {
            return Err(Error::Train(format!("source domain {d} has no windows")));
        }
        for w in windows {
            if w.t_obs() != dims.t_obs || w.t_pred() != dims.t_pred {
                return Err(Error::Shape(format!(
                    "domain {d} window splits {}+{} steps but the model expects {}+{}",
                    w.t_obs(),
                    w.t_pred(),
                    dims.t_obs,
                    dims.t_pred
                )));
            }
        }
    }
    Ok(())
}

/// Encodes one batch and assembles both per-step feature families.
fn encode_batch<S: Scalar>(
    tape: &Tape<S>,
    bound: &BoundModel,
    windows: &[ObservationWindow],
    dims: &ModelDims,
    agg: Aggregation,
) -> Result<(Vec<WindowEncoding>, DomainFeatures)> {
    let mut encodings = Vec::with_capacity(windows.len());
    for w in windows {
        encodings.push(encode_window(
            tape,
            &bound.encoder,
            w,
            dims.a_max,
            dims.heads,
        )?);
    }
    let features = DomainFeatures {
        hidden: domain_feature(tape, &encodings, agg)?,
        contexts: context_feature(tape, &encodings, agg)?,
    };
    Ok((encodings, features))
}

/// Trains a freshly initialized model; see [`train_from`].
pub fn train<S: Scalar>(
    domains: &[Vec<ObservationWindow>],
    config: &TrainConfig,
) -> Result<TrainResult<S>> {
    let params = ModelParams::init(config.dims, config.seed)?;
    train_from(params, domains, config)
}

/// The full training loop, starting from the given parameters.
///
/// Both domains' pipelines bind the one parameter store each step; the
/// alignment loss follows the configured strategy for two sources and the
/// mean-over-ordered-pairs formula when more are given. Batches are drawn
/// without replacement from independently shuffled per-domain orders; an
/// epoch runs as many steps as the smallest domain can fill.
pub fn train_from<S: Scalar>(
    mut params: ModelParams<S>,
    domains: &[Vec<ObservationWindow>],
    config: &TrainConfig,
) -> Result<TrainResult<S>> {
    config.validate()?;
    if domains.len() < 2 {
        return Err(Error::Train(format!(
            "training needs at least 2 source domains, got {}",
            domains.len()
        )));
    }
    check_windows(&config.dims, domains)?;
    let steps_per_epoch = domains
        .iter()
        .map(|d| d.len() / config.batch_size)
        .min()
        .unwrap();
    if steps_per_epoch == 0 {
        let smallest = domains.iter().map(Vec::len).min().unwrap();
        return Err(Error::Train(format!(
            "batch size {} exceeds the smallest domain's {} windows",
            config.batch_size, smallest
        )));
    }

    let measure = config.align.measure.measure::<S>();
    let strategy = config.align.strategy.strategy::<S>();
    let mut adam = AdamState::<S>::new(&params.shapes());
    // One shuffle stream per domain, continuous across epochs, independent
    // of the weight-init stream.
    let mut shufflers: Vec<ChaCha8Rng> = (0..domains.len())
        .map(|d| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(10 + d as u64);
            rng
        })
        .collect();
    let mut orders: Vec<Vec<usize>> = domains.iter().map(|d| (0..d.len()).collect()).collect();

    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = lr_schedule(config.lr, config.decay, config.decay_interval, epoch);
        for (order, rng) in orders.iter_mut().zip(&mut shufflers) {
            order.shuffle(rng);
        }
        let mut sum_rec = 0.0;
        let mut sum_pre = 0.0;

        for step in 0..steps_per_epoch {
            let step_ctx = |e: Error| {
                Error::Train(format!("epoch {epoch} step {step}: {e}"))
            };
            let tape = Tape::new();
            let bound = params.bind(&tape);

            let mut batches: Vec<Vec<ObservationWindow>> = Vec::with_capacity(domains.len());
            for (windows, order) in domains.iter().zip(&orders) {
                let picked = order[step * config.batch_size..(step + 1) * config.batch_size]
                    .iter()
                    .map(|&i| windows[i].clone())
                    .collect();
                batches.push(picked);
            }

            let mut all_features: Vec<DomainFeatures> = Vec::with_capacity(batches.len());
            let mut all_encodings: Vec<Vec<WindowEncoding>> = Vec::with_capacity(batches.len());
            for batch in &batches {
                let (enc, feats) =
                    encode_batch(&tape, &bound, batch, &config.dims, config.aggregation)
                        .map_err(step_ctx)?;
                all_encodings.push(enc);
                all_features.push(feats);
            }

            let l_rec = if all_features.len() == 2 {
                strategy
                    .loss(&tape, measure.as_ref(), &all_features[0], &all_features[1])
                    .map_err(step_ctx)?
            } else {
                let hidden: Vec<&[crate::encoder::StepFeatures]> =
                    all_features.iter().map(|f| f.hidden.as_slice()).collect();
                multi_source_loss(&tape, measure.as_ref(), &hidden).map_err(step_ctx)?
            };

            let mut contributions: Vec<Var> = Vec::new();
            for (batch, encodings) in batches.iter().zip(&all_encodings) {
                for (w, e) in batch.iter().zip(encodings) {
                    let (term, _) = window_prediction_loss(
                        &tape,
                        &bound.decoder,
                        e.final_hidden,
                        &w.future,
                        e.origin,
                    )
                    .map_err(step_ctx)?;
                    contributions.push(term);
                }
            }
            let l_pre = prediction_loss(&tape, &contributions).map_err(step_ctx)?;

            // A zero coefficient removes that term from the graph entirely
            // (no wasted backward work, no 0·∞ edge cases); its value is
            // still recorded for the log.
            let total = if config.align.lambda1 == 0.0 {
                tape.scale(l_pre, S::from(config.align.lambda2).unwrap())
                    .map_err(step_ctx)?
            } else if config.align.lambda2 == 0.0 {
                tape.scale(l_rec, S::from(config.align.lambda1).unwrap())
                    .map_err(step_ctx)?
            } else {
                crate::decode::combine_losses(
                    &tape,
                    l_rec,
                    l_pre,
                    config.align.lambda1,
                    config.align.lambda2,
                )
                .map_err(step_ctx)?
            };

            let rec_val = tape.scalar(l_rec).to_f64().unwrap();
            let pre_val = tape.scalar(l_pre).to_f64().unwrap();
            let total_val = tape.scalar(total).to_f64().unwrap();
            if !(rec_val.is_finite() && pre_val.is_finite() && total_val.is_finite()) {
                return Err(Error::Train(format!(
                    "diverged at epoch {epoch} step {step}: l_rec={rec_val} l_pre={pre_val} total={total_val}"
                )));
            }
            sum_rec += rec_val;
            sum_pre += pre_val;

            tape.backward(total).map_err(step_ctx)?;
            adam.begin_step();
            let vars = bound.vars();
            let lr_s = S::from(lr).unwrap();
            for (idx, (var, (_, tensor))) in
                vars.iter().zip(params.named_tensors_mut()).enumerate()
            {
                let (r, c) = tensor.shape();
                let grad = tape
                    .grad(*var)
                    .unwrap_or_else(|| crate::diffnum::Tensor::zeros(r, c));
                adam.update(idx, lr_s, tensor, &grad).map_err(step_ctx)?;
            }
        }

        let n = steps_per_epoch as f64;
        let breakdown: LossBreakdown = total_loss(
            sum_rec / n,
            sum_pre / n,
            config.align.lambda1,
            config.align.lambda2,
        );
        log.push(EpochSummary {
            epoch,
            l_rec: breakdown.l_rec,
            l_pre: breakdown.l_pre,
            total: breakdown.total,
            lr,
        });
    }

    Ok(TrainResult { params, log })
}

/// Inference: one window through the single shared pipeline, out to K
/// candidate futures in world coordinates. No second domain is involved.
pub fn predict<S: Scalar>(
    params: &ModelParams<S>,
    window: &ObservationWindow,
) -> Result<PredictionSet> {
    if window.t_obs() != params.dims.t_obs {
        return Err(Error::Shape(format!(
            "window observes {} steps but the model expects {}",
            window.t_obs(),
            params.dims.t_obs
        )));
    }
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let encoding = encode_window(
        &tape,
        &bound.encoder,
        window,
        params.dims.a_max,
        params.dims.heads,
    )?;
    moe_decode(&tape, &bound.decoder, encoding.final_hidden, encoding.origin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{synth_domain, SynthDomainConfig};
    use crate::traj::build_windows;

    fn tiny_dims() -> ModelDims {
        ModelDims {
            mlp_h1: 4,
            mlp_h2: 6,
            d: 8,
            hidden: 8,
            k: 3,
            t_obs: 4,
            t_pred: 3,
            a_max: 3,
            gru_layers: 1,
            heads: 1,
            dec_hidden: 6,
        }
    }

    fn synth_windows(seed: u64, speed: f64, dims: &ModelDims) -> Vec<ObservationWindow> {
        let cfg = SynthDomainConfig {
            n_agents: 6,
            n_frames: 40,
            speed_mean: speed,
            speed_std: 0.1,
            turn_rate_std: 0.05,
            repulsion_radius: 1.0,
            noise_std: 0.01,
            seed,
        };
        cfg.validate().unwrap();
        let table = synth_domain(&cfg).unwrap();
        build_windows(&table, dims.t_obs, dims.t_pred, 3)
    }

    fn tiny_config(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            dims: tiny_dims(),
            align: AlignmentConfig::default(),
            aggregation: Aggregation::Sum,
            lr: 0.01,
            batch_size: 8,
            epochs,
            decay: 0.5,
            decay_interval: 50,
            seed,
        }
    }

    #[test]
    fn same_seed_reproduces_the_loss_log_bitwise() {
        let dims = tiny_dims();
        let d1 = synth_windows(1, 0.8, &dims);
        let d2 = synth_windows(2, 1.5, &dims);
        let domains = vec![d1, d2];
        let cfg = tiny_config(3, 9);
        let a = train::<f64>(&domains, &cfg).unwrap();
        let b = train::<f64>(&domains, &cfg).unwrap();
        assert_eq!(log_csv(&a.log), log_csv(&b.log));
        for ((_, ta), (_, tb)) in a
            .params
            .named_tensors()
            .iter()
            .zip(b.params.named_tensors().iter())
        {
            assert_eq!(ta, tb);
        }
        // A different seed must actually change the trajectory of training.
        let mut other = cfg.clone();
        other.seed = 10;
        let c = train::<f64>(&domains, &other).unwrap();
        assert_ne!(log_csv(&a.log), log_csv(&c.log));
    }

    #[test]
    fn identical_domains_have_zero_alignment_loss_throughout() {
        // Weight sharing means identical batches produce identical features.
        // With the batch spanning the whole (duplicated) domain, the two
        // slots see the same windows each step — only in independently
        // shuffled order, so the summed features differ by rounding alone.
        // Any failure of weight sharing would show up at O(1), not 1e-12.
        let dims = tiny_dims();
        let d = synth_windows(3, 1.0, &dims);
        let n = d.len();
        let domains = vec![d.clone(), d];
        let mut cfg = tiny_config(3, 4);
        cfg.batch_size = n;
        let result = train::<f64>(&domains, &cfg).unwrap();
        for row in &result.log {
            assert!(row.l_rec < 1e-9, "epoch {}: l_rec {}", row.epoch, row.l_rec);
        }
    }

    #[test]
    fn same_batch_through_both_slots_gives_exactly_zero_alignment() {
        // The sharper witness: one bound parameter store, the same batch
        // routed through the slot-1 and slot-2 encode calls, bitwise-equal
        // features, exactly zero discrepancy.
        let dims = tiny_dims();
        let windows = synth_windows(4, 1.0, &dims);
        let batch: Vec<ObservationWindow> = windows[..6].to_vec();
        let params = ModelParams::<f64>::init(dims, 5).unwrap();
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let (_, f1) = encode_batch(&tape, &bound, &batch, &dims, Aggregation::Sum).unwrap();
        let (_, f2) = encode_batch(&tape, &bound, &batch, &dims, Aggregation::Sum).unwrap();
        let measure = AlignmentConfig::default().measure.measure::<f64>();
        let strategy = AlignmentConfig::default().strategy.strategy::<f64>();
        let l = strategy.loss(&tape, measure.as_ref(), &f1, &f2).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
    }

    #[test]
    fn supervised_only_training_halves_the_prediction_loss() {
        // λ1 = 0 with one domain duplicated as both sources reduces the
        // loop to plain supervised learning, which must make clear progress
        // on an easy synthetic task within 50 epochs.
        let dims = tiny_dims();
        let d = synth_windows(5, 1.2, &dims);
        let domains = vec![d.clone(), d];
        let mut cfg = tiny_config(50, 6);
        cfg.align.lambda1 = 0.0;
        let result = train::<f64>(&domains, &cfg).unwrap();
        let first = result.log.first().unwrap().l_pre;
        let last = result.log.last().unwrap().l_pre;
        assert!(
            last <= 0.5 * first,
            "l_pre went from {first} to {last} over 50 epochs"
        );
        // And the logged total honors the degenerate coefficient.
        for row in &result.log {
            assert!((row.total - row.l_pre).abs() < 1e-12);
        }
    }

    #[test]
    fn alignment_loss_decreases_with_the_full_objective() {
        let dims = tiny_dims();
        let d1 = synth_windows(7, 0.7, &dims);
        let d2 = synth_windows(8, 1.8, &dims);
        let result = train::<f64>(&vec![d1, d2], &tiny_config(30, 11)).unwrap();
        let first = result.log.first().unwrap().l_rec;
        let last = result.log.last().unwrap().l_rec;
        assert!(
            last < first,
            "l_rec went from {first} to {last} while being minimized"
        );
    }

    #[test]
    fn predictions_have_best_of_k_shape_and_are_deterministic() {
        let dims = tiny_dims();
        let windows = synth_windows(12, 1.0, &dims);
        let params = ModelParams::<f64>::init(dims, 3).unwrap();
        let a = predict(&params, &windows[0]).unwrap();
        let b = predict(&params, &windows[0]).unwrap();
        assert_eq!(a.trajectories.len(), dims.k);
        assert!(a.trajectories.iter().all(|t| t.len() == dims.t_pred));
        assert_eq!(a.trajectories, b.trajectories);
    }

    #[test]
    fn training_rejects_single_domain_and_oversized_batches() {
        let dims = tiny_dims();
        let d = synth_windows(13, 1.0, &dims);
        let cfg = tiny_config(1, 1);
        assert!(matches!(
            train::<f64>(&vec![d.clone()], &cfg),
            Err(Error::Train(_))
        ));
        let mut big = cfg.clone();
        big.batch_size = 10_000;
        assert!(matches!(
            train::<f64>(&vec![d.clone(), d], &big),
            Err(Error::Train(_))
        ));
    }

    #[test]
    fn non_finite_parameters_abort_with_context() {
        let dims = tiny_dims();
        let d = synth_windows(14, 1.0, &dims);
        let mut params = ModelParams::<f64>::init(dims, 1).unwrap();
        let poisoned = params.named_tensors_mut();
        poisoned
            .into_iter()
            .find(|(n, _)| n == "enc.w_q")
            .unwrap()
            .1
            .set(0, 0, f64::NAN);
        let Err(err) = train_from(params, &vec![d.clone(), d], &tiny_config(1, 1)) else {
            panic!("poisoned parameters trained successfully");
        };
        let msg = err.to_string();
        assert!(matches!(err, Error::Train(_)));
        assert!(msg.contains("epoch 0"), "unhelpful diagnostic: {msg}");
    }

    #[test]
    fn multi_source_training_runs_and_logs() {
        let dims = tiny_dims();
        let domains = vec![
            synth_windows(15, 0.8, &dims),
            synth_windows(16, 1.2, &dims),
            synth_windows(17, 1.7, &dims),
        ];
        let result = train::<f64>(&domains, &tiny_config(2, 2)).unwrap();
        assert_eq!(result.log.len(), 2);
        assert!(result.log.iter().all(|r| r.total.is_finite()));
    }

    #[test]
    fn csv_log_has_the_documented_header_and_width() {
        let log = vec![EpochSummary {
            epoch: 0,
            l_rec: 0.5,
            l_pre: 1.25,
            total: 1.75,
            lr: 0.001,
        }];
        let csv = log_csv(&log);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("epoch,l_rec,l_pre,total,lr"));
        assert_eq!(lines.next(), Some("0,0.5,1.25,1.75,0.001"));
    }
}
