//! The erasing operation: compress a feature map channel-wise, min-max
//! normalize per sample, threshold, and zero the positions whose normalized
//! saliency exceeds the threshold. The mask is a hard threshold and carries
//! no gradient; only the elementwise application is differentiable.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Binary spatial mask `[N,1,H,W]` with entries in {0,1}, plus the threshold
/// that built it. A 0 marks an erased position.
#[derive(Clone)]
pub struct EraseMask {
    pub values: Tensor,
    pub tau: f64,
}

impl EraseMask {
    /// Fraction of erased (zeroed) spatial positions.
    pub fn erased_fraction(&self) -> f64 {
        let data = self.values.data();
        let zeros = data.iter().filter(|&&v| v == 0.0).count();
        zeros as f64 / data.len() as f64
    }
}

/// A feature map with an erase mask applied to every channel.
pub struct ErasedFeatureMap {
    pub values: Tensor,
    pub mask: EraseMask,
}

/// Mean over the channel axis: `[N,C,H,W]` → `[N,1,H,W]`. Not recorded on
/// any tape; the mask-construction path is non-differentiable by design.
pub fn channel_avg(y: &Tensor) -> Result<Tensor> {
    if y.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "channel_avg expects [N,C,H,W], got {:?}",
            y.shape()
        )));
    }
    Tape::no_grad().mean(y, &[1], true)
}

/// Per-sample min-max normalization of `[N,1,H,W]` maps into [0,1].
/// A constant map (max == min) normalizes to all zeros, so nothing is erased.
pub fn min_max_norm(m: &Tensor) -> Result<Tensor> {
    if m.rank() != 4 || m.shape()[1] != 1 {
        return Err(Error::ShapeMismatch(format!(
            "min_max_norm expects [N,1,H,W], got {:?}",
            m.shape()
        )));
    }
    let per_sample = m.shape()[2] * m.shape()[3];
    let data = m.data();
    let mut out = vec![0.0; data.len()];
    for n in 0..m.shape()[0] {
        let slice = &data[n * per_sample..(n + 1) * per_sample];
        let min = slice.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max > min {
            // true division so the extremes land exactly on 0 and 1
            let range = max - min;
            for (o, &v) in out[n * per_sample..(n + 1) * per_sample]
                .iter_mut()
                .zip(slice)
            {
                *o = (v - min) / range;
            }
        }
        // max == min leaves the sample's slice at zero
    }
    drop(data);
    Ok(Tensor::from_parts(m.shape().to_vec(), out, false))
}

/// Thresholds a normalized saliency map: positions strictly above `tau` get
/// 0 (erased), everything else 1.
pub fn erase_mask(norm: &Tensor, tau: f64) -> Result<EraseMask> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidThreshold(tau));
    }
    if norm.rank() != 4 || norm.shape()[1] != 1 {
        return Err(Error::ShapeMismatch(format!(
            "erase_mask expects [N,1,H,W], got {:?}",
            norm.shape()
        )));
    }
    let values: Vec<f64> = norm
        .data()
        .iter()
        .map(|&v| if v > tau { 0.0 } else { 1.0 })
        .collect();
    Ok(EraseMask {
        values: Tensor::from_parts(norm.shape().to_vec(), values, false),
        tau,
    })
}

/// Multiplies every channel of `y` by the mask. Differentiable with respect
/// to `y`; the mask enters as a constant.
pub fn apply_mask(tape: &Tape, y: &Tensor, mask: &EraseMask) -> Result<ErasedFeatureMap> {
    let (ys, ms) = (y.shape(), mask.values.shape());
    if y.rank() != 4 || ys[0] != ms[0] || ys[2] != ms[2] || ys[3] != ms[3] {
        return Err(Error::ShapeMismatch(format!(
            "apply_mask: feature map {ys:?} vs mask {ms:?}"
        )));
    }
    let values = tape.mul(y, &mask.values)?;
    Ok(ErasedFeatureMap {
        values,
        mask: mask.clone(),
    })
}

/// The full erasing operation: channel average → min-max normalize →
/// threshold at `tau` → mask every channel.
pub fn ero(tape: &Tape, y: &Tensor, tau: f64) -> Result<ErasedFeatureMap> {
    let saliency = min_max_norm(&channel_avg(y)?)?;
    let mask = erase_mask(&saliency, tau)?;
    apply_mask(tape, y, &mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], values: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), values.to_vec(), false).unwrap()
    }

    #[test]
    fn channel_avg_two_channels() {
        let y = t(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let avg = channel_avg(&y).unwrap();
        assert_eq!(avg.shape(), &[1, 1, 2, 2]);
        assert_eq!(avg.to_vec(), vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn channel_avg_single_channel_identity() {
        let y = t(&[1, 1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(channel_avg(&y).unwrap().to_vec(), y.to_vec());
    }

    #[test]
    fn channel_avg_constant() {
        let y = Tensor::filled(vec![2, 3, 2, 2], 0.7);
        let avg = channel_avg(&y).unwrap();
        let vals = avg.to_vec();
        // identical everywhere, equal to the constant up to summation rounding
        assert!(vals.iter().all(|&v| v == vals[0]));
        assert!(vals.iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn min_max_norm_examples() {
        let m = t(&[1, 1, 1, 3], &[2.0, 4.0, 6.0]);
        assert_eq!(min_max_norm(&m).unwrap().to_vec(), vec![0.0, 0.5, 1.0]);

        let constant = Tensor::filled(vec![1, 1, 2, 2], 3.3);
        assert_eq!(min_max_norm(&constant).unwrap().to_vec(), vec![0.0; 4]);
    }

    #[test]
    fn min_max_norm_hits_zero_and_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let vals: Vec<f64> = (0..12).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let m = t(&[1, 1, 3, 4], &vals);
            let n = min_max_norm(&m).unwrap();
            let nd = n.to_vec();
            let min = nd.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = nd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(min, 0.0);
            assert_eq!(max, 1.0);
        }
    }

    #[test]
    fn erase_mask_strict_threshold() {
        let norm = t(&[1, 1, 2, 2], &[0.9, 0.5, 0.3, 1.0]);
        let mask = erase_mask(&norm, 0.8).unwrap();
        assert_eq!(mask.values.to_vec(), vec![0.0, 1.0, 1.0, 0.0]);
        // exactly tau is kept (strict inequality)
        let norm = t(&[1, 1, 1, 2], &[0.8, 0.80000001]);
        let mask = erase_mask(&norm, 0.8).unwrap();
        assert_eq!(mask.values.to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn erase_mask_tau_one_keeps_everything() {
        let norm = t(&[1, 1, 1, 3], &[0.0, 0.5, 1.0]);
        let mask = erase_mask(&norm, 1.0).unwrap();
        assert_eq!(mask.values.to_vec(), vec![1.0; 3]);
    }

    #[test]
    fn erase_mask_invalid_threshold() {
        let norm = t(&[1, 1, 1, 1], &[0.5]);
        assert!(matches!(
            erase_mask(&norm, 1.5),
            Err(Error::InvalidThreshold(_))
        ));
        assert!(matches!(
            erase_mask(&norm, -0.1),
            Err(Error::InvalidThreshold(_))
        ));
    }

    #[test]
    fn apply_mask_identity_and_zero() {
        let tape = Tape::no_grad();
        let y = t(&[1, 2, 2, 2], &[1.0, -2.0, 3.0, -4.0, 5.0, -6.0, 7.0, -8.0]);
        let ones = EraseMask {
            values: Tensor::filled(vec![1, 1, 2, 2], 1.0),
            tau: 0.5,
        };
        let out = apply_mask(&tape, &y, &ones).unwrap();
        assert_eq!(out.values.to_vec(), y.to_vec());

        let zeros = EraseMask {
            values: Tensor::zeros(vec![1, 1, 2, 2]),
            tau: 0.5,
        };
        let out = apply_mask(&tape, &y, &zeros).unwrap();
        assert!(out.values.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn apply_mask_gradient_is_mask() {
        let y = t(&[1, 2, 2, 2], &[0.3, -0.7, 1.1, 0.9, -0.2, 0.4, -1.3, 0.8]);
        let mask = EraseMask {
            values: t(&[1, 1, 2, 2], &[1.0, 0.0, 1.0, 1.0]),
            tau: 0.5,
        };
        let err = grad_check(
            |tape, yy| tape.sum_all(&apply_mask(tape, yy, &mask)?.values),
            &y,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "err = {err}");
    }

    #[test]
    fn ero_constant_map_unchanged() {
        let tape = Tape::no_grad();
        let y = Tensor::filled(vec![1, 3, 2, 2], 2.5);
        let out = ero(&tape, &y, 0.8).unwrap();
        assert_eq!(out.values.to_vec(), y.to_vec());
        assert_eq!(out.mask.erased_fraction(), 0.0);
    }

    #[test]
    fn ero_erases_dominant_peak_across_channels() {
        // one dominant spatial peak at (1,1) of a 2x3 map; normalized to 1.0
        let mut vals = vec![0.1; 2 * 2 * 3];
        vals[4] = 5.0; // channel 0, position (1,1)
        vals[6 + 4] = 5.0; // channel 1, position (1,1)
        let y = t(&[1, 2, 2, 3], &vals);
        let out = ero(&Tape::no_grad(), &y, 0.8).unwrap();
        let od = out.values.to_vec();
        assert_eq!(od[4], 0.0);
        assert_eq!(od[10], 0.0);
        for (i, (&o, &v)) in od.iter().zip(&vals).enumerate() {
            if i != 4 && i != 10 {
                assert_eq!(o, v);
            }
        }
    }

    #[test]
    fn ero_erased_fraction_matches_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let vals: Vec<f64> = (0..2 * 3 * 4 * 4)
                .map(|_| rng.gen_range(-2.0..2.0))
                .collect();
            let y = t(&[2, 3, 4, 4], &vals);
            let tau = 0.8;
            let norm = min_max_norm(&channel_avg(&y).unwrap()).unwrap();
            let above: usize = norm.data().iter().filter(|&&v| v > tau).count();
            let out = ero(&Tape::no_grad(), &y, tau).unwrap();
            let frac = out.mask.erased_fraction();
            assert_eq!(frac, above as f64 / (2.0 * 16.0));
        }
    }

    #[test]
    fn ero_monotone_in_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let vals: Vec<f64> = (0..2 * 4 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = t(&[1, 2, 4, 4], &vals);
        let taus = [0.2, 0.5, 0.8, 0.9];
        let masks: Vec<Vec<f64>> = taus
            .iter()
            .map(|&tau| ero(&Tape::no_grad(), &y, tau).unwrap().mask.values.to_vec())
            .collect();
        for w in masks.windows(2) {
            // erased set at the larger tau is a subset of the smaller tau's
            for (lo, hi) in w[0].iter().zip(&w[1]) {
                if *hi == 0.0 {
                    assert_eq!(*lo, 0.0);
                }
            }
        }
    }

    #[test]
    fn no_gradient_through_masked_positions() {
        let mut vals = vec![0.1; 12];
        vals[5] = 5.0; // dominant peak in a [1,1,3,4] map
        let tape = Tape::new();
        let yg = Tensor::new(vec![1, 1, 3, 4], vals.clone(), true).unwrap();
        let out = ero(&tape, &yg, 0.5).unwrap();
        let loss = tape.sum_all(&out.values).unwrap();
        let base = loss.item();
        tape.backward(&loss).unwrap();
        let grad = yg.grad().unwrap();
        assert_eq!(grad[5], 0.0, "masked position must get zero gradient");

        // perturbing the masked position leaves the downstream value unchanged
        let mut vals2 = vals.clone();
        vals2[5] = 6.0;
        let y2 = t(&[1, 1, 3, 4], &vals2);
        let out2 = ero(&Tape::no_grad(), &y2, 0.5).unwrap();
        let loss2: f64 = out2.values.to_vec().iter().sum();
        assert_eq!(base, loss2);
    }
}
