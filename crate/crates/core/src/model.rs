//! The complete model: dimensions, parameter store, initialization, and
//! checkpoint round-tripping.
//!
//! There is exactly one parameter store per model. Both source-domain
//! pipelines bind the same store onto a tape each training step, which is
//! what "weight sharing" means here — there is no second copy to fall out
//! of sync.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decode::{BoundDecoder, DecoderHead, DecoderParams};
use crate::diffnum::checkpoint::{read_tensors, write_tensors};
use crate::diffnum::init::uniform_fan_in;
use crate::diffnum::{Scalar, Tape, Tensor, Var};
use crate::encoder::{BoundEncoder, EncoderParams, GruLayer, Mlp};
use crate::error::{Error, Result};

/// Every size the architecture depends on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    /// First and second hidden widths of the two embedding MLPs.
    pub mlp_h1: usize,
    pub mlp_h2: usize,
    /// Attention projection width (queries, keys, values).
    pub d: usize,
    /// GRU hidden width.
    pub hidden: usize,
    /// Number of decoder heads (the K in best-of-K).
    pub k: usize,
    pub t_obs: usize,
    pub t_pred: usize,
    /// Neighbor slots per step.
    pub a_max: usize,
    pub gru_layers: usize,
    /// Attention heads; d must divide evenly among them.
    pub heads: usize,
    /// Hidden width of each decoder head.
    pub dec_hidden: usize,
}

impl ModelDims {
    /// Full-scale configuration: 8 observed and 12 predicted frames,
    /// best-of-20, 64/128 embeddings, 256-wide attention and recurrence.
    pub fn paper() -> Self {
        ModelDims {
            mlp_h1: 64,
            mlp_h2: 128,
            d: 256,
            hidden: 256,
            k: 20,
            t_obs: 8,
            t_pred: 12,
            a_max: 8,
            gru_layers: 1,
            heads: 1,
            dec_hidden: 128,
        }
    }

    /// Shrunk configuration for commodity-CPU experiments; same shape of
    /// computation, a fraction of the arithmetic.
    pub fn desk() -> Self {
        ModelDims {
            mlp_h1: 16,
            mlp_h2: 32,
            d: 32,
            hidden: 32,
            k: 20,
            t_obs: 8,
            t_pred: 12,
            a_max: 8,
            gru_layers: 1,
            heads: 1,
            dec_hidden: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mlp_h1", self.mlp_h1),
            ("mlp_h2", self.mlp_h2),
            ("d", self.d),
            ("hidden", self.hidden),
            ("k", self.k),
            ("t_obs", self.t_obs),
            ("t_pred", self.t_pred),
            ("gru_layers", self.gru_layers),
            ("heads", self.heads),
            ("dec_hidden", self.dec_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model dimension {name} must be ≥ 1")));
            }
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "attention width d={} must divide evenly among heads={}",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims::paper()
    }
}

/// The single parameter store.
#[derive(Clone, Debug)]
pub struct ModelParams<S: Scalar> {
    pub dims: ModelDims,
    pub encoder: EncoderParams<S>,
    pub decoder: DecoderParams<S>,
}

pub struct BoundModel {
    pub encoder: BoundEncoder,
    pub decoder: BoundDecoder,
}

impl<S: Scalar> ModelParams<S> {
    /// Fresh parameters: weights uniform in ±1/√fan_in, biases zero,
    /// drawn in enumeration order from a seeded generator so equal seeds
    /// give bitwise-equal models.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weight = |rows: usize, cols: usize| uniform_fan_in::<S>(rows, cols, &mut rng);

        let mut mlp = |input: usize, h1: usize, h2: usize| Mlp {
            w1: weight(input, h1),
            b1: Tensor::zeros(1, h1),
            w2: weight(h1, h2),
            b2: Tensor::zeros(1, h2),
        };
        let f_o = mlp(2, dims.mlp_h1, dims.mlp_h2);
        let f_b = mlp(2, dims.mlp_h1, dims.mlp_h2);
        let w_q = weight(dims.mlp_h2, dims.d);
        let w_k = weight(dims.mlp_h2, dims.d);
        let w_v = weight(dims.mlp_h2, dims.d);
        let gru = (0..dims.gru_layers)
            .map(|l| {
                let input = if l == 0 { 2 * dims.d } else { dims.hidden };
                GruLayer {
                    w_xr: weight(input, dims.hidden),
                    w_hr: weight(dims.hidden, dims.hidden),
                    b_r: Tensor::zeros(1, dims.hidden),
                    w_xz: weight(input, dims.hidden),
                    w_hz: weight(dims.hidden, dims.hidden),
                    b_z: Tensor::zeros(1, dims.hidden),
                    w_xg: weight(input, dims.hidden),
                    w_hg: weight(dims.hidden, dims.hidden),
                    b_g: Tensor::zeros(1, dims.hidden),
                }
            })
            .collect();
        let h0_w = weight(dims.mlp_h2, dims.hidden);
        let h0_b = Tensor::zeros(1, dims.hidden);
        let encoder = EncoderParams {
            f_o,
            f_b,
            w_q,
            w_k,
            w_v,
            gru,
            h0_w,
            h0_b,
        };

        let heads = (0..dims.k)
            .map(|_| DecoderHead {
                w1: weight(dims.hidden, dims.dec_hidden),
                b1: Tensor::zeros(1, dims.dec_hidden),
                w2: weight(dims.dec_hidden, 2 * dims.t_pred),
                b2: Tensor::zeros(1, 2 * dims.t_pred),
            })
            .collect();
        let decoder = DecoderParams {
            heads,
            t_pred: dims.t_pred,
        };

        Ok(ModelParams {
            dims,
            encoder,
            decoder,
        })
    }

    /// Stable global enumeration, `enc.`/`dec.` prefixed. Optimizer slot
    /// indices and checkpoint entries both follow this order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out: Vec<(String, &Tensor<S>)> = self
            .encoder
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (format!("enc.{n}"), t))
            .collect();
        out.extend(
            self.decoder
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (format!("dec.{n}"), t)),
        );
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out: Vec<(String, &mut Tensor<S>)> = self
            .encoder
            .named_tensors_mut()
            .into_iter()
            .map(|(n, t)| (format!("enc.{n}"), t))
            .collect();
        out.extend(
            self.decoder
                .named_tensors_mut()
                .into_iter()
                .map(|(n, t)| (format!("dec.{n}"), t)),
        );
        out
    }

    /// Shapes of every tensor, in enumeration order (for optimizer state).
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.named_tensors().iter().map(|(_, t)| t.shape()).collect()
    }

    /// Binds the whole store onto a tape. The returned handles follow the
    /// same enumeration order as [`Self::named_tensors`], which
    /// [`BoundModel::vars`] exposes flat.
    pub fn bind(&self, tape: &Tape<S>) -> BoundModel {
        BoundModel {
            encoder: self.encoder.bind(tape),
            decoder: self.decoder.bind(tape),
        }
    }

    /// Writes every tensor (as f32) to one checkpoint file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<(String, Tensor<S>)> = self
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        write_tensors(path, &entries)
    }

    /// Reads a checkpoint into a model of the given dimensions. Every
    /// expected tensor must be present with its exact shape, and the file
    /// must not carry extras — a mismatch means the checkpoint belongs to a
    /// different configuration.
    pub fn load(path: &Path, dims: ModelDims) -> Result<Self> {
        let mut model = ModelParams::<S>::init(dims, 0)?;
        let stored = read_tensors(path)?;
        let mut by_name: std::collections::BTreeMap<String, Tensor<f32>> =
            stored.into_iter().collect();
        for (name, tensor) in model.named_tensors_mut() {
            let Some(loaded) = by_name.remove(&name) else {
                return Err(Error::Checkpoint(format!(
                    "checkpoint is missing tensor '{name}'"
                )));
            };
            if loaded.shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has shape {}x{} but the model expects {}x{}",
                    loaded.rows(),
                    loaded.cols(),
                    tensor.rows(),
                    tensor.cols()
                )));
            }
            *tensor = loaded.cast();
        }
        if let Some((name, _)) = by_name.into_iter().next() {
            return Err(Error::Checkpoint(format!(
                "checkpoint carries unexpected tensor '{name}'"
            )));
        }
        Ok(model)
    }
}

impl BoundModel {
    /// Flat tape handles in the same order as `ModelParams::named_tensors`.
    pub fn vars(&self) -> Vec<Var> {
        let e = &self.encoder;
        let mut out = vec![
            e.f_o.w1, e.f_o.b1, e.f_o.w2, e.f_o.b2, e.f_b.w1, e.f_b.b1, e.f_b.w2, e.f_b.b2,
            e.w_q, e.w_k, e.w_v,
        ];
        for l in &e.gru {
            out.extend([
                l.w_xr, l.w_hr, l.b_r, l.w_xz, l.w_hz, l.b_z, l.w_xg, l.w_hg, l.b_g,
            ]);
        }
        out.push(e.h0_w);
        out.push(e.h0_b);
        for h in &self.decoder.heads {
            out.extend([h.w1, h.b1, h.w2, h.b2]);
        }
        out
    }
}
