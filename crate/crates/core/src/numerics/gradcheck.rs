use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Real;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference half step, in `[1e-6, 1e-3]`.
    pub epsilon: f64,
    /// Absolute floor on the relative-error denominator, so coordinates whose
    /// true gradient is ~0 are judged by absolute error.
    pub denominator_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-6,
            denominator_floor: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Coordinate with the largest error.
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

/// Picks coordinates to check: `per_segment` from each segment (all of a
/// segment if it is shorter), topped up uniformly until at least `min_total`.
pub fn sample_coordinates(
    segment_lens: &[usize],
    per_segment: usize,
    min_total: usize,
    seed: u64,
) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: usize = segment_lens.iter().sum();
    let mut picked = Vec::new();
    let mut offset = 0;
    for &len in segment_lens {
        let k = per_segment.min(len);
        let mut idx: Vec<usize> = sample(&mut rng, len, k).into_iter().map(|i| offset + i).collect();
        idx.sort_unstable();
        picked.extend(idx);
        offset += len;
    }
    let target = min_total.min(total);
    if picked.len() < target {
        let mut chosen: BTreeSet<usize> = picked.into_iter().collect();
        for i in sample(&mut rng, total, total) {
            if chosen.len() >= target {
                break;
            }
            chosen.insert(i);
        }
        picked = chosen.into_iter().collect();
    }
    picked
}

/// Compares `analytic` against central finite differences of `f` around
/// `params` at the given coordinates and returns the worst relative error.
pub fn grad_check<T, F>(
    mut f: F,
    params: &[T],
    analytic: &[T],
    coords: &[usize],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    T: Real,
    F: FnMut(&[T]) -> Result<T>,
{
    if !(1e-6..=1e-3).contains(&opts.epsilon) {
        return Err(Error::config(format!(
            "grad_check epsilon {} outside [1e-6, 1e-3]",
            opts.epsilon
        )));
    }
    if analytic.len() != params.len() {
        return Err(Error::config("grad_check: analytic gradient length differs from params"));
    }
    if let Some(i) = analytic.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            op: format!("grad_check analytic gradient (coordinate {i})"),
        });
    }
    let mut x = params.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
    };
    for &i in coords {
        if i >= x.len() {
            return Err(Error::config(format!("grad_check coordinate {i} out of range")));
        }
        let orig = x[i];
        let h = T::from_f64(opts.epsilon);
        x[i] = orig + h;
        let plus = f(&x)?;
        x[i] = orig - h;
        let minus = f(&x)?;
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                op: format!("grad_check objective (coordinate {i})"),
            });
        }
        // Actual step after rounding, which differs from 2h at 32-bit.
        let width = ((orig + h) - (orig - h)).as_f64();
        let numeric = (plus.as_f64() - minus.as_f64()) / width;
        let a = analytic[i].as_f64();
        let denom = a.abs().max(numeric.abs()).max(opts.denominator_floor);
        let rel = (a - numeric).abs() / denom;
        if rel > report.max_relative_error || report.checked == 0 {
            report.max_relative_error = rel;
            report.worst_index = i;
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact() {
        let x = vec![1.0f64; 10];
        let analytic: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let coords: Vec<usize> = (0..10).collect();
        let r = grad_check(
            |p: &[f64]| Ok(p.iter().map(|v| v * v).sum()),
            &x,
            &analytic,
            &coords,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-6, "{r:?}");
        assert_eq!(r.checked, 10);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let x = vec![0.5f64; 4];
        let analytic = vec![1.0, 1.0, 1.0, 0.0];
        let r = grad_check(
            |p: &[f64]| Ok(p.iter().map(|v| v * v).sum()),
            &x,
            &analytic,
            &[0, 1, 2, 3],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(r.worst_index, 3);
        assert!(r.max_relative_error > 0.99);
    }

    #[test]
    fn epsilon_range_is_enforced() {
        let opts = GradCheckOptions {
            epsilon: 0.1,
            ..Default::default()
        };
        assert!(grad_check(|_: &[f64]| Ok(0.0), &[0.0], &[0.0], &[0], opts).is_err());
    }

    #[test]
    fn non_finite_objective_is_named() {
        let err = grad_check(
            |p: &[f64]| Ok(p[0].ln()),
            &[0.0],
            &[1.0],
            &[0],
            GradCheckOptions::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("grad_check objective"));
    }

    #[test]
    fn coordinate_sampling_covers_segments() {
        let c = sample_coordinates(&[3, 1000, 20], 8, 64, 3);
        assert!(c.len() >= 64);
        assert!(c.iter().filter(|&&i| i < 3).count() == 3);
        assert!(c.iter().any(|&i| i >= 1003));
        assert!(c.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_coordinates(&[5, 5], 8, 64, 0), (0..10).collect::<Vec<_>>());
    }
}
