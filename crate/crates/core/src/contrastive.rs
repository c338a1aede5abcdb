//! Spatio-temporal InfoNCE objectives and the pretraining loop.
//!
//! For consecutive frames `(x_t, x_{t+1})` in a minibatch of `B` pairs, every
//! local-map location `(m, n)` yields a `B x B` score matrix whose diagonal
//! holds the true pairs and whose off-diagonal entries use the other pairs'
//! next frames as negatives:
//!
//! * global-local: `g(i, j) = global(x_t^i)^T W_g local_mn(x_{t+1}^j)`
//! * local-local:  `f(i, j) = local_mn(x_t^i)^T W_l local_mn(x_{t+1}^j)`
//!
//! Each loss is the cross-entropy of every row against its diagonal,
//! averaged over rows and locations. The masked variants encode
//! `apply_mask(x_t, k_t)` as the anchor and leave positives untouched.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{init_encoder, EncoderConfig, EncoderParams};
use crate::envsim::{Split, TrajectoryDataset};
use crate::masking::{apply_mask_in_place, mask_observation, FillMode, Mask, MaskSpec};
use crate::numerics::{
    checkpoint, matmul, softmax_cross_entropy_with_grad, AdamConfig, AdamState, Parameters, Real,
    Tensor,
};
use crate::{Error, Result};

/// Bilinear scorer weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerParams<T = f32> {
    /// `[D_g, C_l]`
    pub w_g: Tensor<T>,
    /// `[C_l, C_l]`
    pub w_l: Tensor<T>,
}

impl<T: Real> ScorerParams<T> {
    /// Gaussian init with standard deviation `1 / sqrt(rows * cols)`.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        let (cl, _, _) = config.local_shape()?;
        let dg = config.global_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gaussian = |rows: usize, cols: usize| {
            let normal = Normal::new(0.0, 1.0 / ((rows * cols) as f64).sqrt()).expect("positive std");
            Tensor::from_fn(&[rows, cols], |_| T::from_f64(normal.sample(&mut rng)))
        };
        Ok(ScorerParams {
            w_g: gaussian(dg, cl),
            w_l: gaussian(cl, cl),
        })
    }

    pub fn cast<U: Real>(&self) -> ScorerParams<U> {
        ScorerParams {
            w_g: self.w_g.cast(),
            w_l: self.w_l.cast(),
        }
    }
}

impl<T: Real> Parameters<T> for ScorerParams<T> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("scorer.w_g".to_string(), &self.w_g),
            ("scorer.w_l".to_string(), &self.w_l),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.w_g, &mut self.w_l]
    }
}

/// `sum_i log softmax(scores[i, :])[i]` for a square score matrix.
pub fn infonce<T: Real>(scores: &Tensor<T>) -> Result<T> {
    let &[rows, cols] = scores.shape() else {
        return Err(Error::config("infonce expects a 2-D score matrix"));
    };
    if rows != cols {
        return Err(Error::config(format!("infonce needs a square matrix, got {rows}x{cols}")));
    }
    let mut total = T::zero();
    for i in 0..rows {
        let (ce, _) = softmax_cross_entropy_with_grad(&scores.data()[i * cols..(i + 1) * cols], i)?;
        total -= ce;
    }
    Ok(total)
}

/// A minibatch of consecutive pairs. Anchors and positives are stored back
/// to back as `[C, H, W]` images; `masks`, when present, holds one `k_t`
/// per pair.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch<T> {
    pub batch: usize,
    pub anchors: Vec<T>,
    pub positives: Vec<T>,
    pub masks: Option<Vec<Mask>>,
}

impl<T: Real> ContrastiveBatch<T> {
    pub fn new(batch: usize, anchors: Vec<T>, positives: Vec<T>) -> Result<Self> {
        if batch < 2 {
            return Err(Error::config("a contrastive batch needs at least 2 pairs"));
        }
        if anchors.len() != positives.len() || !anchors.len().is_multiple_of(batch) {
            return Err(Error::config("anchor and positive buffers disagree with the batch size"));
        }
        Ok(ContrastiveBatch {
            batch,
            anchors,
            positives,
            masks: None,
        })
    }

    pub fn with_masks(mut self, masks: Vec<Mask>) -> Result<Self> {
        if masks.len() != self.batch {
            return Err(Error::config("need exactly one mask per pair"));
        }
        self.masks = Some(masks);
        Ok(self)
    }

    /// Anchors with each pair's mask applied; noise fill draws from `rng`.
    pub fn masked_anchors<R: rand::Rng + ?Sized>(&self, fill: FillMode, rng: &mut R) -> Result<Vec<T>> {
        let masks = self
            .masks
            .as_ref()
            .ok_or_else(|| Error::config("masked loss requires a mask on every pair"))?;
        let mut out = self.anchors.clone();
        let n = out.len() / self.batch;
        for (img, mask) in out.chunks_exact_mut(n).zip(masks) {
            apply_mask_in_place(img, mask, fill, rng)?;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    GlobalLocal,
    LocalLocal,
}

/// Which terms enter the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Objective {
    pub global_local: bool,
    pub local_local: bool,
}

impl Objective {
    pub const BOTH: Objective = Objective {
        global_local: true,
        local_local: true,
    };
    pub const GL: Objective = Objective {
        global_local: true,
        local_local: false,
    };
    pub const LL: Objective = Objective {
        global_local: false,
        local_local: true,
    };
}

/// Mean losses plus the raw sums over rows and locations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues<T> {
    pub gl: T,
    pub ll: T,
    pub gl_sum: T,
    pub ll_sum: T,
}

impl<T: Real> LossValues<T> {
    pub fn total(&self) -> T {
        self.gl + self.ll
    }
}

/// `[B, C, L]` -> `[L, B, C]`.
fn location_major<T: Real>(local: &[T], b: usize, c: usize, l: usize) -> Vec<T> {
    let mut out = vec![T::zero(); local.len()];
    for bi in 0..b {
        for ci in 0..c {
            let src = &local[(bi * c + ci) * l..][..l];
            for (li, &v) in src.iter().enumerate() {
                out[(li * b + bi) * c + ci] = v;
            }
        }
    }
    out
}

/// Adds `[L, B, C]` into `[B, C, L]`.
fn add_batch_major<T: Real>(src: &[T], dst: &mut [T], b: usize, c: usize, l: usize) {
    for bi in 0..b {
        for ci in 0..c {
            let d = &mut dst[(bi * c + ci) * l..][..l];
            for (li, v) in d.iter_mut().enumerate() {
                *v += src[(li * b + bi) * c + ci];
            }
        }
    }
}

/// Row-wise cross-entropy against the diagonal. Replaces `scores` with
/// `scale * dLoss/dScores` when `want_grad` and returns the summed loss.
fn diagonal_cross_entropy<T: Real>(scores: &mut [T], b: usize, scale: T, want_grad: bool) -> Result<T> {
    let mut total = T::zero();
    for i in 0..b {
        let row = &mut scores[i * b..(i + 1) * b];
        let (ce, grad) = softmax_cross_entropy_with_grad(row, i)?;
        total += ce;
        if want_grad {
            for (r, g) in row.iter_mut().zip(grad) {
                *r = g * scale;
            }
        }
    }
    Ok(total)
}

/// Per-location global-local score matrices, `[M * N]` tensors of `[B, B]`.
pub fn gl_scores<T: Real>(
    batch: &ContrastiveBatch<T>,
    encoder: &EncoderParams<T>,
    scorer: &ScorerParams<T>,
) -> Result<Vec<Tensor<T>>> {
    let b = batch.batch;
    let (c, m, n) = encoder.config.local_shape()?;
    let l = m * n;
    let dg = encoder.config.global_dim;
    if scorer.w_g.shape() != [dg, c] {
        return Err(Error::config("W_g shape does not match the encoder"));
    }
    let anchors = encoder.forward(&batch.anchors, b)?;
    let positives = encoder.forward(&batch.positives, b)?;
    let mut u = vec![T::zero(); b * c];
    matmul(b, dg, c, &anchors.global, false, scorer.w_g.data(), false, &mut u, false);
    let pos = location_major(&positives.local, b, c, l);
    (0..l)
        .map(|li| {
            let mut s = vec![T::zero(); b * b];
            matmul(b, c, b, &u, false, &pos[li * b * c..(li + 1) * b * c], true, &mut s, false);
            Tensor::from_vec(&[b, b], s)
        })
        .collect()
}

/// Evaluates the objective on pre-built anchor/positive buffers and, when
/// `backprop` is set, accumulates gradients into both parameter sets.
#[allow(clippy::too_many_arguments)]
pub fn contrastive_loss<T: Real>(
    encoder: &mut EncoderParams<T>,
    scorer: &mut ScorerParams<T>,
    anchors: &[T],
    positives: &[T],
    batch: usize,
    objective: Objective,
    backprop: bool,
) -> Result<LossValues<T>> {
    if batch < 2 {
        return Err(Error::config("contrastive loss needs at least 2 pairs"));
    }
    let b = batch;
    let (c, m, n) = encoder.config.local_shape()?;
    let l = m * n;
    let dg = encoder.config.global_dim;
    if scorer.w_g.shape() != [dg, c] || scorer.w_l.shape() != [c, c] {
        return Err(Error::config("scorer shapes do not match the encoder"));
    }
    let ea = encoder.forward(anchors, b)?;
    let ep = encoder.forward(positives, b)?;
    let pos = location_major(&ep.local, b, c, l);
    let scale = T::one() / T::from_f64((b * l) as f64);
    let mut d_pos = vec![T::zero(); b * c * l];
    let mut d_anchor_local = vec![T::zero(); b * c * l];
    let mut d_anchor_global = vec![T::zero(); b * dg];
    let mut out = LossValues {
        gl: T::zero(),
        ll: T::zero(),
        gl_sum: T::zero(),
        ll_sum: T::zero(),
    };
    let mut s = vec![T::zero(); b * b];

    if objective.global_local {
        let mut u = vec![T::zero(); b * c];
        matmul(b, dg, c, &ea.global, false, scorer.w_g.data(), false, &mut u, false);
        let mut du = vec![T::zero(); b * c];
        for li in 0..l {
            let p = &pos[li * b * c..(li + 1) * b * c];
            matmul(b, c, b, &u, false, p, true, &mut s, false);
            out.gl_sum += diagonal_cross_entropy(&mut s, b, scale, backprop)?;
            if backprop {
                matmul(b, b, c, &s, false, p, false, &mut du, true);
                matmul(b, b, c, &s, true, &u, false, &mut d_pos[li * b * c..(li + 1) * b * c], true);
            }
        }
        if backprop {
            matmul(dg, b, c, &ea.global, true, &du, false, scorer.w_g.grad_mut(), true);
            matmul(b, c, dg, &du, false, scorer.w_g.data(), true, &mut d_anchor_global, true);
        }
        out.gl = out.gl_sum * scale;
    }

    if objective.local_local {
        let anc = location_major(&ea.local, b, c, l);
        let mut d_anc = vec![T::zero(); b * c * l];
        let mut v = vec![T::zero(); b * c];
        let mut dv = vec![T::zero(); b * c];
        for li in 0..l {
            let a = &anc[li * b * c..(li + 1) * b * c];
            let p = &pos[li * b * c..(li + 1) * b * c];
            matmul(b, c, c, a, false, scorer.w_l.data(), false, &mut v, false);
            matmul(b, c, b, &v, false, p, true, &mut s, false);
            out.ll_sum += diagonal_cross_entropy(&mut s, b, scale, backprop)?;
            if backprop {
                matmul(b, b, c, &s, false, p, false, &mut dv, false);
                matmul(b, b, c, &s, true, &v, false, &mut d_pos[li * b * c..(li + 1) * b * c], true);
                matmul(c, b, c, a, true, &dv, false, scorer.w_l.grad_mut(), true);
                matmul(b, c, c, &dv, false, scorer.w_l.data(), true, &mut d_anc[li * b * c..(li + 1) * b * c], false);
            }
        }
        if backprop {
            add_batch_major(&d_anc, &mut d_anchor_local, b, c, l);
        }
        out.ll = out.ll_sum * scale;
    }

    if !(out.gl.is_finite() && out.ll.is_finite()) {
        return Err(Error::NonFinite {
            op: "contrastive loss".into(),
        });
    }
    if backprop {
        let mut d_positive_local = vec![T::zero(); b * c * l];
        add_batch_major(&d_pos, &mut d_positive_local, b, c, l);
        encoder.backward(&ea, Some(&d_anchor_local), &d_anchor_global, false)?;
        encoder.backward(&ep, Some(&d_positive_local), &vec![T::zero(); b * dg], false)?;
    }
    Ok(out)
}

/// Global-local loss (mean cross-entropy) on unmasked anchors.
pub fn loss_gl<T: Real>(batch: &ContrastiveBatch<T>, encoder: &EncoderParams<T>, scorer: &ScorerParams<T>) -> Result<T> {
    let (mut e, mut s) = (encoder.clone(), scorer.clone());
    Ok(contrastive_loss(&mut e, &mut s, &batch.anchors, &batch.positives, batch.batch, Objective::GL, false)?.gl)
}

/// Local-local loss (mean cross-entropy) on unmasked anchors.
pub fn loss_ll<T: Real>(batch: &ContrastiveBatch<T>, encoder: &EncoderParams<T>, scorer: &ScorerParams<T>) -> Result<T> {
    let (mut e, mut s) = (encoder.clone(), scorer.clone());
    Ok(contrastive_loss(&mut e, &mut s, &batch.anchors, &batch.positives, batch.batch, Objective::LL, false)?.ll)
}

/// Masked global-local or local-local loss: anchors pass through their
/// masks before encoding.
pub fn loss_masked<T: Real, R: rand::Rng + ?Sized>(
    batch: &ContrastiveBatch<T>,
    encoder: &EncoderParams<T>,
    scorer: &ScorerParams<T>,
    variant: Variant,
    fill: FillMode,
    rng: &mut R,
) -> Result<T> {
    let anchors = batch.masked_anchors(fill, rng)?;
    let (mut e, mut s) = (encoder.clone(), scorer.clone());
    let objective = match variant {
        Variant::GlobalLocal => Objective::GL,
        Variant::LocalLocal => Objective::LL,
    };
    let v = contrastive_loss(&mut e, &mut s, &anchors, &batch.positives, batch.batch, objective, false)?;
    Ok(match variant {
        Variant::GlobalLocal => v.gl,
        Variant::LocalLocal => v.ll,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    /// Optimizer updates.
    pub updates: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Anchor mask; a zero ratio gives the unmasked objective.
    pub mask: MaskSpec,
    /// Also mask positives (ablation; off by default).
    pub mask_positives: bool,
    pub log_every: usize,
    pub seed: u64,
    /// Where to write the last finite parameters if training diverges.
    #[serde(skip)]
    pub abort_checkpoint: Option<PathBuf>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            updates: 5000,
            batch_size: 64,
            adam: AdamConfig::default(),
            mask: MaskSpec::default(),
            mask_positives: false,
            log_every: 50,
            seed: 0,
            abort_checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss_gl: f64,
    pub loss_ll: f64,
    pub loss_total: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub encoder: EncoderParams<f32>,
    pub scorer: ScorerParams<f32>,
    pub log: Vec<LogRow>,
}

/// Fills `batch` anchor/positive buffers for the given pairs.
fn fill_pairs(
    dataset: &TrajectoryDataset,
    pairs: &[(usize, usize)],
    config: &PretrainConfig,
    rng: &mut ChaCha8Rng,
    anchors: &mut [f32],
    positives: &mut [f32],
) -> Result<()> {
    let n = dataset.frame_len();
    let (h, w) = (dataset.height(), dataset.width());
    for (k, &(t, t1)) in pairs.iter().enumerate() {
        let a = &mut anchors[k * n..(k + 1) * n];
        dataset.write_image(t, a);
        mask_observation(a, h, w, &config.mask, t as u64, config.seed, rng)?;
        let p = &mut positives[k * n..(k + 1) * n];
        dataset.write_image(t1, p);
        if config.mask_positives {
            mask_observation(p, h, w, &config.mask, t1 as u64, config.seed, rng)?;
        }
    }
    Ok(())
}

/// Minimizes `L_GL + L_LL` (masked anchors when `config.mask.ratio > 0`)
/// with Adam over shuffled consecutive pairs.
pub fn pretrain(
    dataset: &TrajectoryDataset,
    encoder_config: &EncoderConfig,
    config: &PretrainConfig,
) -> Result<PretrainOutput> {
    if dataset.split != Split::Pretrain {
        return Err(Error::config(format!(
            "pretraining needs the pretrain split, got {}",
            dataset.split.key()
        )));
    }
    let cfg = encoder_config
        .clone()
        .with_input(dataset.channels, dataset.height(), dataset.width());
    config.mask.validate(dataset.height(), dataset.width())?;
    let mut encoder = init_encoder::<f32>(&cfg, config.seed)?;
    let mut scorer = ScorerParams::<f32>::init(&cfg, config.seed ^ 0x5c0e)?;
    let mut log = Vec::new();
    if config.updates == 0 {
        return Ok(PretrainOutput { encoder, scorer, log });
    }
    let mut pairs = dataset.consecutive_pairs();
    let b = config.batch_size;
    if b < 2 || pairs.len() < b {
        return Err(Error::config(format!(
            "need batch size >= 2 and at least {b} consecutive pairs, have {}",
            pairs.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let enc_lens = encoder.segment_lens();
    let mut lens = enc_lens.clone();
    lens.extend(scorer.segment_lens());
    let mut adam = AdamState::<f32>::new(config.adam, &lens);
    let n = dataset.frame_len();
    let mut anchors = vec![0f32; b * n];
    let mut positives = vec![0f32; b * n];
    let start = Instant::now();
    let mut cursor = pairs.len();
    let mut last_good = (encoder.clone(), scorer.clone());

    for step in 1..=config.updates {
        if cursor + b > pairs.len() {
            pairs.shuffle(&mut rng);
            cursor = 0;
        }
        fill_pairs(dataset, &pairs[cursor..cursor + b], config, &mut rng, &mut anchors, &mut positives)?;
        cursor += b;

        encoder.zero_grad();
        scorer.zero_grad();
        let result = contrastive_loss(&mut encoder, &mut scorer, &anchors, &positives, b, Objective::BOTH, true)
            .and_then(|loss| {
                let mut params: Vec<&mut Tensor<f32>> = encoder.tensors_mut();
                params.extend(scorer.tensors_mut());
                adam.update_tensors(&mut params)?;
                Ok(loss)
            });
        let loss = match result {
            Ok(loss) => loss,
            Err(err) => {
                let mut reason = err.to_string();
                if let Some(path) = &config.abort_checkpoint {
                    save_pretrained(path, &last_good.0, &last_good.1)?;
                    reason.push_str(&format!("; last finite parameters saved to {}", path.display()));
                }
                return Err(Error::Training {
                    step: step as u64,
                    reason,
                });
            }
        };
        if config.abort_checkpoint.is_some() {
            last_good = (encoder.clone(), scorer.clone());
        }
        if step == 1 || step % config.log_every.max(1) == 0 || step == config.updates {
            log.push(LogRow {
                step,
                loss_gl: loss.gl as f64,
                loss_ll: loss.ll as f64,
                loss_total: loss.total() as f64,
                wall_ms: start.elapsed().as_millis() as u64,
            });
        }
    }
    Ok(PretrainOutput { encoder, scorer, log })
}

pub fn write_log_csv(path: &Path, log: &[LogRow]) -> Result<()> {
    let mut out = String::from("step,loss_gl,loss_ll,loss_total,wall_ms\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.loss_gl, r.loss_ll, r.loss_total, r.wall_ms
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Writes encoder and scorer weights into one checkpoint file.
pub fn save_pretrained(path: &Path, encoder: &EncoderParams<f32>, scorer: &ScorerParams<f32>) -> Result<()> {
    let mut named = encoder.named_tensors();
    named.extend(scorer.named_tensors());
    let refs: Vec<(&str, &Tensor<f32>)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    checkpoint::save(path, &refs)
}

pub fn load_pretrained(path: &Path, config: &EncoderConfig) -> Result<(EncoderParams<f32>, ScorerParams<f32>)> {
    let tensors = checkpoint::load::<f32>(path)?;
    let mut encoder = init_encoder::<f32>(config, 0)?;
    let mut scorer = ScorerParams::<f32>::init(config, 0)?;
    encoder.load_named(&tensors)?;
    scorer.load_named(&tensors)?;
    Ok((encoder, scorer))
}

#[cfg(test)]
mod tests;
