//! Convolutional state encoder producing a local feature map and a global
//! feature vector.
//!
//! The stack is a sequence of ReLU convolutions. The output of one
//! configurable intermediate layer is the local map `[C_l, M, N]`; the last
//! conv output is flattened and passed through a linear head to give the
//! global vector `[D_g]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{matmul, relu_backward_in_place, relu_in_place, Conv2dGeometry, Parameters, Real, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerConfig {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

pub const fn conv(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> ConvLayerConfig {
    ConvLayerConfig {
        out_channels,
        kernel,
        stride,
        padding,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub layers: Vec<ConvLayerConfig>,
    /// Index of the conv layer whose activation is the local feature map.
    pub local_layer: usize,
    pub global_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::desk()
    }
}

impl EncoderConfig {
    /// Four-layer stack for 64x64 frames: local map 128x7x7, global 256.
    pub fn desk() -> Self {
        EncoderConfig {
            input_channels: 1,
            input_height: 64,
            input_width: 64,
            layers: vec![conv(32, 4, 2, 1), conv(64, 4, 2, 1), conv(128, 4, 2, 0), conv(64, 3, 1, 0)],
            local_layer: 2,
            global_dim: 256,
        }
    }

    /// The 8/4, 4/2, 4/2, 3/1 stack without padding, for Atari-sized
    /// 210x160 frames: local map 128x11x8, global 256.
    pub fn atari() -> Self {
        EncoderConfig {
            input_channels: 1,
            input_height: 210,
            input_width: 160,
            layers: vec![conv(32, 8, 4, 0), conv(64, 4, 2, 0), conv(128, 4, 2, 0), conv(64, 3, 1, 0)],
            local_layer: 2,
            global_dim: 256,
        }
    }

    /// Narrow stack for 64x64 frames sized for single-core CPU training:
    /// local map 32x8x8, global 128.
    pub fn compact() -> Self {
        EncoderConfig {
            input_channels: 1,
            input_height: 64,
            input_width: 64,
            layers: vec![conv(16, 8, 4, 2), conv(32, 4, 2, 1), conv(32, 3, 1, 1), conv(16, 3, 2, 1)],
            local_layer: 2,
            global_dim: 128,
        }
    }

    pub fn with_input(mut self, channels: usize, height: usize, width: usize) -> Self {
        self.input_channels = channels;
        self.input_height = height;
        self.input_width = width;
        self
    }

    pub fn geometries(&self) -> Result<Vec<Conv2dGeometry>> {
        if self.layers.is_empty() {
            return Err(Error::config("encoder needs at least one conv layer"));
        }
        if self.local_layer >= self.layers.len() {
            return Err(Error::config(format!(
                "local feature layer {} is not one of the {} conv layers",
                self.local_layer,
                self.layers.len()
            )));
        }
        if self.global_dim == 0 {
            return Err(Error::config("global feature width must be positive"));
        }
        let (mut c, mut h, mut w) = (self.input_channels, self.input_height, self.input_width);
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let g = Conv2dGeometry::new(c, h, w, l.out_channels, l.kernel, l.kernel, l.stride, l.padding)
                .map_err(|e| Error::config(format!("encoder layer {i}: {e}")))?;
            (c, h, w) = (g.out_channels, g.out_h(), g.out_w());
            out.push(g);
        }
        Ok(out)
    }

    /// `(C_l, M, N)` of the local feature map.
    pub fn local_shape(&self) -> Result<(usize, usize, usize)> {
        let g = self.geometries()?[self.local_layer];
        Ok((g.out_channels, g.out_h(), g.out_w()))
    }

    pub fn flat_dim(&self) -> Result<usize> {
        Ok(self.geometries()?.last().expect("non-empty").output_len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    /// `[C_out, C_in, k, k]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T = f32> {
    pub config: EncoderConfig,
    pub convs: Vec<ConvParams<T>>,
    /// `[D_g, flat]`
    pub head_weight: Tensor<T>,
    pub head_bias: Tensor<T>,
}

fn kaiming_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..bound)))
}

/// Seeded initialization: Kaiming-uniform (fan-in) weights, zero biases.
pub fn init_encoder<T: Real>(config: &EncoderConfig, seed: u64) -> Result<EncoderParams<T>> {
    let geoms = config.geometries()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let convs = geoms
        .iter()
        .map(|g| ConvParams {
            weight: kaiming_uniform(
                &[g.out_channels, g.in_channels, g.kernel_h, g.kernel_w],
                g.patch_len(),
                &mut rng,
            ),
            bias: Tensor::zeros(&[g.out_channels]),
        })
        .collect();
    let flat = config.flat_dim()?;
    Ok(EncoderParams {
        config: config.clone(),
        convs,
        head_weight: kaiming_uniform(&[config.global_dim, flat], flat, &mut rng),
        head_bias: Tensor::zeros(&[config.global_dim]),
    })
}

impl<T: Real> Parameters<T> for EncoderParams<T> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::with_capacity(2 * self.convs.len() + 2);
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("encoder.conv{i}.weight"), &c.weight));
            out.push((format!("encoder.conv{i}.bias"), &c.bias));
        }
        out.push(("encoder.head.weight".to_string(), &self.head_weight));
        out.push(("encoder.head.bias".to_string(), &self.head_bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::with_capacity(2 * self.convs.len() + 2);
        for c in self.convs.iter_mut() {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }
}

impl<T: Real> EncoderParams<T> {
    pub fn cast<U: Real>(&self) -> EncoderParams<U> {
        EncoderParams {
            config: self.config.clone(),
            convs: self
                .convs
                .iter()
                .map(|c| ConvParams {
                    weight: c.weight.cast(),
                    bias: c.bias.cast(),
                })
                .collect(),
            head_weight: self.head_weight.cast(),
            head_bias: self.head_bias.cast(),
        }
    }
}

/// Encoder output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput<T = f32> {
    /// `[C_l, M, N]`
    pub local: Tensor<T>,
    /// `[D_g]`
    pub global: Tensor<T>,
}

/// Batched encoder output plus what the backward pass needs.
#[derive(Debug, Clone)]
pub struct BatchEncoding<T> {
    pub batch: usize,
    /// `[B, C_l, M, N]`
    pub local: Vec<T>,
    /// `[B, D_g]`
    pub global: Vec<T>,
    cols: Vec<Vec<T>>,
    activations: Vec<Vec<T>>,
}

impl<T: Real> BatchEncoding<T> {
    pub fn local_of(&self, index: usize) -> &[T] {
        let n = self.local.len() / self.batch;
        &self.local[index * n..(index + 1) * n]
    }

    pub fn global_of(&self, index: usize) -> &[T] {
        let n = self.global.len() / self.batch;
        &self.global[index * n..(index + 1) * n]
    }

    /// On/off state of every ReLU unit. Parameter settings with equal
    /// patterns sit on the same smooth piece of the network.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.activations.iter().flatten().map(|v| *v > T::zero()).collect()
    }
}

impl<T: Real> EncoderParams<T> {
    fn check_config(&self) -> Result<Vec<Conv2dGeometry>> {
        let geoms = self.config.geometries()?;
        if geoms.len() != self.convs.len() {
            return Err(Error::config("encoder params do not match their config"));
        }
        Ok(geoms)
    }

    /// Forward pass over `batch` images stored back to back as `[C, H, W]`.
    pub fn forward(&self, images: &[T], batch: usize) -> Result<BatchEncoding<T>> {
        let geoms = self.check_config()?;
        let in_len = geoms[0].input_len();
        if batch == 0 || images.len() != batch * in_len {
            return Err(Error::config(format!(
                "encoder expects {batch} images of {}x{}x{}, got {} values",
                self.config.input_channels,
                self.config.input_height,
                self.config.input_width,
                images.len()
            )));
        }
        let mut cols = Vec::with_capacity(geoms.len());
        let mut activations: Vec<Vec<T>> = Vec::with_capacity(geoms.len());
        for (i, g) in geoms.iter().enumerate() {
            let input = if i == 0 { images } else { &activations[i - 1] };
            let (mut out, c) = g.forward_batch(input, batch, self.convs[i].weight.data(), Some(self.convs[i].bias.data()));
            relu_in_place(&mut out);
            cols.push(c);
            activations.push(out);
        }
        let flat = activations.last().expect("non-empty");
        let flat_dim = geoms.last().expect("non-empty").output_len();
        let d_g = self.config.global_dim;
        let mut global = Vec::with_capacity(batch * d_g);
        for _ in 0..batch {
            global.extend_from_slice(self.head_bias.data());
        }
        matmul(batch, flat_dim, d_g, flat, false, self.head_weight.data(), true, &mut global, true);
        let local = activations[self.config.local_layer].clone();
        if !global.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                op: "encoder forward".into(),
            });
        }
        Ok(BatchEncoding {
            batch,
            local,
            global,
            cols,
            activations,
        })
    }

    /// Accumulates parameter gradients given output gradients. Returns the
    /// gradient with respect to the input images when `want_input_grad`.
    pub fn backward(
        &mut self,
        enc: &BatchEncoding<T>,
        d_local: Option<&[T]>,
        d_global: &[T],
        want_input_grad: bool,
    ) -> Result<Option<Vec<T>>> {
        let geoms = self.check_config()?;
        let batch = enc.batch;
        let d_g = self.config.global_dim;
        if d_global.len() != batch * d_g {
            return Err(Error::config("global gradient has the wrong length"));
        }
        if let Some(dl) = d_local {
            if dl.len() != enc.local.len() {
                return Err(Error::config("local gradient has the wrong length"));
            }
        }
        let last = geoms.len() - 1;
        let flat_dim = geoms[last].output_len();
        let flat = &enc.activations[last];

        matmul(d_g, batch, flat_dim, d_global, true, flat, false, self.head_weight.grad_mut(), true);
        {
            let gb = self.head_bias.grad_mut();
            for b in 0..batch {
                for (g, &d) in gb.iter_mut().zip(&d_global[b * d_g..(b + 1) * d_g]) {
                    *g += d;
                }
            }
        }
        let mut d_act = vec![T::zero(); batch * flat_dim];
        matmul(batch, d_g, flat_dim, d_global, false, self.head_weight.data(), false, &mut d_act, false);

        for i in (0..geoms.len()).rev() {
            if i == self.config.local_layer {
                if let Some(dl) = d_local {
                    for (a, &d) in d_act.iter_mut().zip(dl) {
                        *a += d;
                    }
                }
            }
            relu_backward_in_place(&mut d_act, &enc.activations[i]);
            let need_input = i > 0 || want_input_grad;
            let conv = &mut self.convs[i];
            let (w, gw) = conv.weight.data_and_grad_mut();
            let gb = conv.bias.grad_mut();
            let d_in = geoms[i].backward_batch(&enc.cols[i], batch, w, &d_act, gw, Some(gb), need_input);
            match d_in {
                Some(d) if i > 0 => d_act = d,
                other => return Ok(other),
            }
        }
        unreachable!("loop returns at layer 0")
    }
}

/// Encodes a single `[C, H, W]` image.
pub fn encode<T: Real>(image: &Tensor<T>, params: &EncoderParams<T>) -> Result<EncoderOutput<T>> {
    let c = &params.config;
    if image.shape() != [c.input_channels, c.input_height, c.input_width] {
        return Err(Error::config(format!(
            "encoder configured for {}x{}x{} input, got {:?}",
            c.input_channels,
            c.input_height,
            c.input_width,
            image.shape()
        )));
    }
    let enc = params.forward(image.data(), 1)?;
    let (cl, m, n) = c.local_shape()?;
    Ok(EncoderOutput {
        local: Tensor::from_vec(&[cl, m, n], enc.local)?,
        global: Tensor::from_vec(&[c.global_dim], enc.global)?,
    })
}
