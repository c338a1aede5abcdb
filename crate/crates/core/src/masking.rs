//! Random occlusion masks for partially observed frames.
//!
//! A mask marks each pixel (or each square patch) as visible with
//! probability `1 - ratio`, independently. Masked pixels are filled with
//! zeros or with uniform noise; the mask is shared by all channels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{Real, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Pixel,
    /// Square patches of the given side.
    Patch(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillMode {
    Zero,
    UniformNoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPolicy {
    /// A new mask every time an observation is drawn.
    FreshPerVisit,
    /// The mask depends only on the observation id and a base seed.
    FixedPerObservation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    /// Fraction of the frame that is hidden.
    pub ratio: f64,
    pub granularity: Granularity,
    pub fill: FillMode,
    pub policy: MaskPolicy,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec {
            ratio: 0.0,
            granularity: Granularity::Pixel,
            fill: FillMode::UniformNoise,
            policy: MaskPolicy::FreshPerVisit,
        }
    }
}

impl MaskSpec {
    pub fn with_ratio(ratio: f64) -> Self {
        MaskSpec {
            ratio,
            ..MaskSpec::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        self.ratio == 0.0
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::config(format!("mask ratio {} outside [0, 1]", self.ratio)));
        }
        if let Granularity::Patch(side) = self.granularity {
            if side == 0 || !height.is_multiple_of(side) || !width.is_multiple_of(side) {
                return Err(Error::config(format!(
                    "mask patch side {side} must divide the {height}x{width} frame"
                )));
            }
        }
        Ok(())
    }

    /// Random stream for one observation under the fixed policy.
    pub fn observation_rng(base_seed: u64, observation: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
        rng.set_stream(observation);
        rng
    }
}

/// Binary visibility map: 1 = visible, 0 = masked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub visible: Vec<u8>,
    /// Seed of the stream that generated the mask, when known.
    pub seed: Option<u64>,
}

impl Mask {
    pub fn all_visible(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            visible: vec![1; height * width],
            seed: None,
        }
    }

    pub fn masked_fraction(&self) -> f64 {
        let hidden = self.visible.iter().filter(|&&v| v == 0).count();
        hidden as f64 / self.visible.len().max(1) as f64
    }
}

/// Draws a mask where every unit is hidden independently with probability
/// `spec.ratio`.
pub fn sample_mask<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    spec: &MaskSpec,
    rng: &mut R,
) -> Result<Mask> {
    spec.validate(height, width)?;
    let mut visible = vec![1u8; height * width];
    match spec.granularity {
        Granularity::Pixel => {
            for v in visible.iter_mut() {
                if rng.gen::<f64>() < spec.ratio {
                    *v = 0;
                }
            }
        }
        Granularity::Patch(side) => {
            for py in 0..height / side {
                for px in 0..width / side {
                    if rng.gen::<f64>() < spec.ratio {
                        for y in py * side..(py + 1) * side {
                            visible[y * width + px * side..y * width + (px + 1) * side].fill(0);
                        }
                    }
                }
            }
        }
    }
    Ok(Mask {
        height,
        width,
        visible,
        seed: None,
    })
}

/// Fills the hidden pixels of a `[C, H, W]` buffer in place.
pub fn apply_mask_in_place<T: Real, R: Rng + ?Sized>(
    image: &mut [T],
    mask: &Mask,
    fill: FillMode,
    rng: &mut R,
) -> Result<()> {
    let plane = mask.height * mask.width;
    if plane == 0 || !image.len().is_multiple_of(plane) {
        return Err(Error::config(format!(
            "image of {} values does not match a {}x{} mask",
            image.len(),
            mask.height,
            mask.width
        )));
    }
    for channel in image.chunks_exact_mut(plane) {
        for (px, &vis) in channel.iter_mut().zip(&mask.visible) {
            if vis == 0 {
                *px = match fill {
                    FillMode::Zero => T::zero(),
                    FillMode::UniformNoise => T::from_f64(rng.gen::<f64>()),
                };
            }
        }
    }
    Ok(())
}

pub fn apply_mask<T: Real, R: Rng + ?Sized>(
    image: &Tensor<T>,
    mask: &Mask,
    fill: FillMode,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let mut out = image.clone();
    out.drop_grad();
    if image.shape().len() != 3 || image.shape()[1..] != [mask.height, mask.width] {
        return Err(Error::config(format!(
            "image shape {:?} does not match a {}x{} mask",
            image.shape(),
            mask.height,
            mask.width
        )));
    }
    apply_mask_in_place(out.data_mut(), mask, fill, rng)?;
    Ok(out)
}

/// Masks an image according to `spec`'s policy. Under the fixed policy the
/// result depends only on `(base_seed, observation)`; otherwise both the
/// mask and the noise come from `visit_rng`.
pub fn mask_observation<T: Real, R: Rng + ?Sized>(
    image: &mut [T],
    height: usize,
    width: usize,
    spec: &MaskSpec,
    observation: u64,
    base_seed: u64,
    visit_rng: &mut R,
) -> Result<Option<Mask>> {
    if spec.is_identity() {
        return Ok(None);
    }
    let mask = match spec.policy {
        MaskPolicy::FreshPerVisit => {
            let mask = sample_mask(height, width, spec, visit_rng)?;
            apply_mask_in_place(image, &mask, spec.fill, visit_rng)?;
            mask
        }
        MaskPolicy::FixedPerObservation => {
            let mut rng = MaskSpec::observation_rng(base_seed, observation);
            let mut mask = sample_mask(height, width, spec, &mut rng)?;
            mask.seed = Some(base_seed);
            apply_mask_in_place(image, &mask, spec.fill, &mut rng)?;
            mask
        }
    };
    Ok(Some(mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn extreme_ratios() {
        let m = sample_mask(8, 8, &MaskSpec::with_ratio(0.0), &mut rng(0)).unwrap();
        assert!(m.visible.iter().all(|&v| v == 1));
        let m = sample_mask(8, 8, &MaskSpec::with_ratio(1.0), &mut rng(0)).unwrap();
        assert!(m.visible.iter().all(|&v| v == 0));
    }

    #[test]
    fn single_mask_fraction_is_near_ratio() {
        let m = sample_mask(64, 64, &MaskSpec::with_ratio(0.4), &mut rng(17)).unwrap();
        assert!((m.masked_fraction() - 0.4).abs() <= 0.02, "{}", m.masked_fraction());
    }

    #[test]
    fn patch_masks_are_blocky() {
        let spec = MaskSpec {
            ratio: 0.5,
            granularity: Granularity::Patch(4),
            ..MaskSpec::default()
        };
        let m = sample_mask(16, 16, &spec, &mut rng(2)).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let corner = m.visible[(y / 4 * 4) * 16 + x / 4 * 4];
                assert_eq!(m.visible[y * 16 + x], corner);
            }
        }
        let bad = MaskSpec {
            granularity: Granularity::Patch(5),
            ..spec
        };
        assert!(matches!(sample_mask(16, 16, &bad, &mut rng(2)), Err(Error::Config(_))));
        assert!(MaskSpec::with_ratio(1.5).validate(4, 4).is_err());
    }

    #[test]
    fn fills() {
        let img = Tensor::<f64>::from_fn(&[1, 4, 4], |i| i as f64 / 16.0);
        let ones = Mask::all_visible(4, 4);
        assert_eq!(apply_mask(&img, &ones, FillMode::UniformNoise, &mut rng(1)).unwrap(), img);
        let zeros = Mask {
            visible: vec![0; 16],
            ..ones.clone()
        };
        let z = apply_mask(&img, &zeros, FillMode::Zero, &mut rng(1)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));

        let checker = Mask {
            visible: (0..16).map(|i| ((i / 4 + i % 4) % 2) as u8).collect(),
            ..ones.clone()
        };
        let c = apply_mask(&img, &checker, FillMode::Zero, &mut rng(1)).unwrap();
        for i in 0..16 {
            assert_eq!(c.data()[i], img.data()[i] * checker.visible[i] as f64);
        }
        let n = apply_mask(&img, &zeros, FillMode::UniformNoise, &mut rng(1)).unwrap();
        assert!(n.data().iter().all(|&v| (0.0..1.0).contains(&v)));
        assert!(apply_mask(&img, &Mask::all_visible(3, 4), FillMode::Zero, &mut rng(1)).is_err());
    }

    #[test]
    fn fixed_policy_repeats_per_observation() {
        let spec = MaskSpec {
            ratio: 0.4,
            policy: MaskPolicy::FixedPerObservation,
            ..MaskSpec::default()
        };
        let base = vec![0.5f32; 64];
        let run = |obs: u64, visit_seed: u64| {
            let mut img = base.clone();
            mask_observation(&mut img, 8, 8, &spec, obs, 99, &mut rng(visit_seed)).unwrap();
            img
        };
        assert_eq!(run(3, 1), run(3, 2));
        assert_ne!(run(3, 1), run(4, 1));

        let fresh = MaskSpec {
            policy: MaskPolicy::FreshPerVisit,
            ..spec
        };
        let mut r = rng(5);
        let mut a = base.clone();
        let mut b = base.clone();
        mask_observation(&mut a, 8, 8, &fresh, 3, 99, &mut r).unwrap();
        mask_observation(&mut b, 8, 8, &fresh, 3, 99, &mut r).unwrap();
        assert_ne!(a, b);
    }

    proptest! {
        #[test]
        fn visible_pixels_untouched_and_zero_fill_idempotent(
            seed in any::<u64>(), ratio in 0.0f64..=1.0, channels in 1usize..3,
        ) {
            let mut r = rng(seed);
            let img = Tensor::<f32>::from_fn(&[channels, 6, 5], |i| (i as f32 * 0.37).fract());
            let mask = sample_mask(6, 5, &MaskSpec::with_ratio(ratio), &mut r).unwrap();
            let noisy = apply_mask(&img, &mask, FillMode::UniformNoise, &mut r).unwrap();
            for c in 0..channels {
                for (p, &vis) in mask.visible.iter().enumerate() {
                    if vis == 1 {
                        prop_assert_eq!(noisy.data()[c * 30 + p], img.data()[c * 30 + p]);
                    }
                }
            }
            let once = apply_mask(&img, &mask, FillMode::Zero, &mut r).unwrap();
            let twice = apply_mask(&once, &mask, FillMode::Zero, &mut r).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
