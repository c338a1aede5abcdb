//! Linear probing: entropy filtering, per-variable 256-way heads on global
//! features, the end-to-end supervised baseline, and accuracy / macro-F1
//! aggregation by category.

mod report;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderParams;
use crate::envsim::{Split, TrajectoryDataset, VariableSpec};
use crate::masking::{mask_observation, MaskPolicy, MaskSpec};
use crate::numerics::{matmul, softmax_cross_entropy_with_grad, AdamConfig, AdamState, Parameters, Real, Tensor};
use crate::{Error, Result};

pub use report::{CategoryScore, ConditionReport, ReportRow, VariableScore, F1_AVERAGING};

/// Classes per head: every byte value.
pub const PROBE_CLASSES: usize = 256;

/// Default entropy threshold in nats.
pub const ENTROPY_THRESHOLD: f64 = 0.6;

/// Variables whose label entropy on the probe-training split reaches
/// `threshold` nats.
pub fn filter_variables(dataset: &TrajectoryDataset, threshold: f64) -> Result<Vec<VariableSpec>> {
    if threshold.is_nan() || threshold < 0.0 {
        return Err(Error::config(format!("entropy threshold must be >= 0, got {threshold}")));
    }
    if dataset.split != Split::ProbeTrain {
        return Err(Error::config("entropy filtering uses the probe_train split"));
    }
    if dataset.is_empty() {
        return Err(Error::config("entropy filtering on an empty dataset"));
    }
    let kept: Vec<VariableSpec> = dataset
        .variables
        .iter()
        .enumerate()
        .filter(|(i, _)| crate::envsim::entropy_of(dataset.variable_values(*i)) >= threshold)
        .map(|(_, v)| v.clone())
        .collect();
    if kept.is_empty() {
        return Err(Error::config(format!(
            "no state variable reaches entropy {threshold} nats; the environment is too degenerate to probe"
        )));
    }
    Ok(kept)
}

/// One linear classifier per retained variable.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeHeads<T = f32> {
    pub variables: Vec<VariableSpec>,
    /// `[256, D_g]` per head.
    pub weights: Vec<Tensor<T>>,
    /// `[256]` per head.
    pub biases: Vec<Tensor<T>>,
}

impl<T: Real> ProbeHeads<T> {
    /// Uniform init in `+-1/sqrt(dim)`, zero biases.
    pub fn init(variables: &[VariableSpec], dim: usize, seed: u64) -> Result<Self> {
        if variables.is_empty() || dim == 0 {
            return Err(Error::config("probe heads need variables and a positive feature width"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (dim as f64).sqrt();
        let weights = variables
            .iter()
            .map(|_| Tensor::from_fn(&[PROBE_CLASSES, dim], |_| T::from_f64(rng.gen_range(-bound..bound))))
            .collect();
        Ok(ProbeHeads {
            variables: variables.to_vec(),
            weights,
            biases: variables.iter().map(|_| Tensor::zeros(&[PROBE_CLASSES])).collect(),
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.weights[0].shape()[1]
    }

    /// `[B, 256]` logits of head `h`.
    fn logits(&self, h: usize, features: &[T], batch: usize) -> Vec<T> {
        let d = self.feature_dim();
        let mut out = vec![T::zero(); batch * PROBE_CLASSES];
        for row in out.chunks_exact_mut(PROBE_CLASSES) {
            row.copy_from_slice(self.biases[h].data());
        }
        matmul(batch, d, PROBE_CLASSES, features, false, self.weights[h].data(), true, &mut out, true);
        out
    }

    /// Summed over heads of the mean cross-entropy; `labels` is `[B, V]` in
    /// head order. With `backprop`, accumulates head gradients and returns
    /// the gradient with respect to `features`.
    pub fn loss(&mut self, features: &[T], labels: &[u8], batch: usize, backprop: bool) -> Result<(T, Vec<T>)> {
        let d = self.feature_dim();
        let v = self.variables.len();
        if features.len() != batch * d || labels.len() != batch * v {
            return Err(Error::config("probe batch does not match head shapes"));
        }
        let scale = T::one() / T::from_f64(batch as f64);
        let mut total = T::zero();
        let mut d_features = vec![T::zero(); if backprop { batch * d } else { 0 }];
        for h in 0..v {
            let mut logits = self.logits(h, features, batch);
            for (b, row) in logits.chunks_exact_mut(PROBE_CLASSES).enumerate() {
                let (ce, grad) = softmax_cross_entropy_with_grad(row, labels[b * v + h] as usize)?;
                total += ce * scale;
                if backprop {
                    for (r, g) in row.iter_mut().zip(grad) {
                        *r = g * scale;
                    }
                }
            }
            if backprop {
                let dl = &logits;
                matmul(PROBE_CLASSES, batch, d, dl, true, features, false, self.weights[h].grad_mut(), true);
                let gb = self.biases[h].grad_mut();
                for row in dl.chunks_exact(PROBE_CLASSES) {
                    for (g, &x) in gb.iter_mut().zip(row) {
                        *g += x;
                    }
                }
                matmul(batch, PROBE_CLASSES, d, dl, false, self.weights[h].data(), false, &mut d_features, true);
            }
        }
        if !total.is_finite() {
            return Err(Error::NonFinite { op: "probe loss".into() });
        }
        Ok((total, d_features))
    }

    /// Argmax class per head, `[B, V]`. Ties go to the lowest class.
    pub fn predict(&self, features: &[T], batch: usize) -> Vec<u8> {
        let v = self.variables.len();
        let mut out = vec![0u8; batch * v];
        for h in 0..v {
            let logits = self.logits(h, features, batch);
            for (b, row) in logits.chunks_exact(PROBE_CLASSES).enumerate() {
                let mut best = 0;
                for (c, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = c;
                    }
                }
                out[b * v + h] = best as u8;
            }
        }
        out
    }
}

impl<T: Real> Parameters<T> for ProbeHeads<T> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (v, (w, b)) in self.variables.iter().zip(self.weights.iter().zip(&self.biases)) {
            out.push((format!("probe.{}.weight", v.name), w));
            out.push((format!("probe.{}.bias", v.name), b));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Optimizer updates.
    pub updates: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            updates: 2000,
            batch_size: 64,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// Encoder (trained only when not frozen) plus heads.
#[derive(Debug, Clone)]
pub struct ProbeModel {
    pub encoder: EncoderParams<f32>,
    pub heads: ProbeHeads<f32>,
}

/// Label columns of `variables`, in order, for every frame: `[N, V]`.
fn label_matrix(dataset: &TrajectoryDataset, variables: &[VariableSpec]) -> Result<Vec<u8>> {
    let idx = variables
        .iter()
        .map(|v| dataset.variable_index(&v.name))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(dataset.len() * idx.len());
    for t in 0..dataset.len() {
        let row = dataset.frame_labels(t);
        out.extend(idx.iter().map(|&i| row[i]));
    }
    Ok(out)
}

/// Loads (and masks) frames `indices` into `images`.
fn load_images(
    dataset: &TrajectoryDataset,
    indices: &[usize],
    mask: &MaskSpec,
    mask_seed: u64,
    rng: &mut ChaCha8Rng,
    images: &mut [f32],
) -> Result<()> {
    let n = dataset.frame_len();
    for (k, &t) in indices.iter().enumerate() {
        let img = &mut images[k * n..(k + 1) * n];
        dataset.write_image(t, img);
        mask_observation(img, dataset.height(), dataset.width(), mask, t as u64, mask_seed, rng)?;
    }
    Ok(())
}

/// Trains one linear head per variable on global features of (masked)
/// probe-training frames. A frozen encoder is left untouched; otherwise the
/// encoder and heads train jointly.
pub fn train_probes(
    encoder: &EncoderParams<f32>,
    dataset: &TrajectoryDataset,
    variables: &[VariableSpec],
    mask: &MaskSpec,
    frozen: bool,
    config: &ProbeConfig,
) -> Result<ProbeModel> {
    if dataset.split != Split::ProbeTrain {
        return Err(Error::config(format!(
            "probes train on the probe_train split, got {}",
            dataset.split.key()
        )));
    }
    mask.validate(dataset.height(), dataset.width())?;
    let b = config.batch_size;
    if b == 0 || dataset.len() < b {
        return Err(Error::config(format!(
            "probe batch size {b} needs at least that many frames, have {}",
            dataset.len()
        )));
    }
    let mut encoder = encoder.clone();
    let dg = encoder.config.global_dim;
    let mut heads = ProbeHeads::<f32>::init(variables, dg, config.seed)?;
    let labels = label_matrix(dataset, variables)?;
    let v = variables.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9);

    let mut lens = heads.segment_lens();
    if !frozen {
        lens.extend(encoder.segment_lens());
    }
    let mut adam = AdamState::<f32>::new(config.adam, &lens);

    // Unmasked frozen probing sees the same features on every visit.
    let cached: Option<Vec<f32>> = if frozen && mask.is_identity() {
        Some(encode_all(&encoder, dataset, mask, 0)?)
    } else {
        None
    };

    let n = dataset.frame_len();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let mut images = vec![0f32; b * n];
    let mut feats = vec![0f32; b * dg];
    let mut batch_labels = vec![0u8; b * v];
    for step in 1..=config.updates {
        if cursor + b > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + b];
        cursor += b;
        for (k, &t) in idx.iter().enumerate() {
            batch_labels[k * v..(k + 1) * v].copy_from_slice(&labels[t * v..(t + 1) * v]);
        }
        heads.zero_grad();
        let result = if let Some(all) = &cached {
            for (k, &t) in idx.iter().enumerate() {
                feats[k * dg..(k + 1) * dg].copy_from_slice(&all[t * dg..(t + 1) * dg]);
            }
            heads.loss(&feats, &batch_labels, b, true).map(|_| ())
        } else {
            load_images(dataset, idx, mask, config.seed, &mut rng, &mut images)?;
            let enc = encoder.forward(&images, b)?;
            heads.loss(&enc.global, &batch_labels, b, true).and_then(|(_, d_global)| {
                if !frozen {
                    encoder.zero_grad();
                    encoder.backward(&enc, None, &d_global, false)?;
                }
                Ok(())
            })
        };
        let result = result.and_then(|()| {
            let mut params = heads.tensors_mut();
            if !frozen {
                params.extend(encoder.tensors_mut());
            }
            adam.update_tensors(&mut params)
        });
        if let Err(err) = result {
            return Err(Error::Training {
                step: step as u64,
                reason: format!("probe training: {err}"),
            });
        }
    }
    Ok(ProbeModel { encoder, heads })
}

/// Global features `[N, D_g]` of every frame, masked per `mask` with
/// per-observation seeds derived from `mask_seed`.
pub fn encode_all(encoder: &EncoderParams<f32>, dataset: &TrajectoryDataset, mask: &MaskSpec, mask_seed: u64) -> Result<Vec<f32>> {
    const CHUNK: usize = 64;
    let n = dataset.frame_len();
    let dg = encoder.config.global_dim;
    let mut out = Vec::with_capacity(dataset.len() * dg);
    let mut images = vec![0f32; CHUNK * n];
    // Only consulted by fresh-per-visit masks.
    let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let all: Vec<usize> = (0..dataset.len()).collect();
    for idx in all.chunks(CHUNK) {
        let imgs = &mut images[..idx.len() * n];
        load_images(dataset, idx, mask, mask_seed, &mut rng, imgs)?;
        out.extend(encoder.forward(imgs, idx.len())?.global);
    }
    Ok(out)
}

/// Fraction of positions where `predictions` equals `labels`.
pub fn accuracy(labels: &[u8], predictions: &[u8]) -> f64 {
    assert_eq!(labels.len(), predictions.len(), "label/prediction length mismatch");
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels.iter().zip(predictions).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}

/// Per-class F1 averaged over the classes present in `labels`.
pub fn macro_f1(labels: &[u8], predictions: &[u8]) -> f64 {
    assert_eq!(labels.len(), predictions.len(), "label/prediction length mismatch");
    let classes: BTreeSet<u8> = labels.iter().copied().collect();
    if classes.is_empty() {
        return 0.0;
    }
    let mut tp = [0usize; 256];
    let mut fp = [0usize; 256];
    let mut fn_ = [0usize; 256];
    for (&y, &p) in labels.iter().zip(predictions) {
        if y == p {
            tp[y as usize] += 1;
        } else {
            fp[p as usize] += 1;
            fn_[y as usize] += 1;
        }
    }
    let sum: f64 = classes
        .iter()
        .map(|&c| {
            let c = c as usize;
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    sum / classes.len() as f64
}

/// Scores trained heads on the probe-test split. Masks must be fixed per
/// observation so repeated evaluations see identical inputs.
pub fn evaluate(
    encoder: &EncoderParams<f32>,
    heads: &ProbeHeads<f32>,
    dataset: &TrajectoryDataset,
    mask: &MaskSpec,
    mask_seed: u64,
) -> Result<ConditionReport> {
    if dataset.split != Split::ProbeTest {
        return Err(Error::config(format!(
            "evaluation uses the probe_test split, got {}",
            dataset.split.key()
        )));
    }
    if !mask.is_identity() && mask.policy != MaskPolicy::FixedPerObservation {
        return Err(Error::config("evaluation masks must be fixed_per_observation"));
    }
    if heads.feature_dim() != encoder.config.global_dim {
        return Err(Error::config("probe heads do not match the encoder's global width"));
    }
    let labels = label_matrix(dataset, &heads.variables)?;
    let feats = encode_all(encoder, dataset, mask, mask_seed)?;
    let preds = heads.predict(&feats, dataset.len());
    let v = heads.variables.len();
    let scores = heads
        .variables
        .iter()
        .enumerate()
        .map(|(h, spec)| {
            let y: Vec<u8> = labels.iter().skip(h).step_by(v).copied().collect();
            let p: Vec<u8> = preds.iter().skip(h).step_by(v).copied().collect();
            VariableScore {
                name: spec.name.clone(),
                category: spec.category,
                accuracy: accuracy(&y, &p),
                f1: macro_f1(&y, &p),
            }
        })
        .collect();
    Ok(ConditionReport::new("unnamed", mask_seed, "", scores))
}

#[cfg(test)]
mod tests;
