//! Label refinement: per-sample losses, two-component GMM certainty,
//! prediction-exchange soft labels and the adaptive memory update.

use serde::{Deserialize, Serialize};

use crate::cluster::MemoryBank;
use crate::error::{Error, Result};
use crate::linalg::{l2_normalize, log_softmax_temp, softmax_temp};

pub const GMM_MAX_ITER: usize = 100;
pub const GMM_TOL: f64 = 1e-6;
pub const GMM_VAR_FLOOR: f64 = 1e-8;

/// `-log P(y_i | x_i)` against the shared bank, one value per sample.
pub fn per_sample_losses(features: &[Vec<f64>], bank: &MemoryBank, labels: &[usize], sigma: f64) -> Result<Vec<f64>> {
    if features.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: features.len(),
            right: labels.len(),
        });
    }
    features
        .iter()
        .zip(labels)
        .map(|(f, &y)| {
            let row = bank.row_of(y).ok_or(Error::UnknownLabel(y))?;
            Ok(-log_softmax_temp(&bank.scores(f), sigma)[row])
        })
        .collect()
}

/// Fitted two-component 1-D mixture. Component 0 has the lower mean at
/// initialisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gmm2 {
    pub means: [f64; 2],
    pub vars: [f64; 2],
    pub weights: [f64; 2],
    pub iterations: usize,
    pub log_likelihood: f64,
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean).powi(2) / var)
}

impl Gmm2 {
    /// Per-component log joint `log w_k + log N(x; mu_k, var_k)`.
    fn log_joint(&self, x: f64) -> [f64; 2] {
        [0, 1].map(|k| self.weights[k].ln() + log_normal(x, self.means[k], self.vars[k]))
    }

    fn low(&self) -> usize {
        if self.means[1] < self.means[0] {
            1
        } else {
            0
        }
    }

    /// Posterior of the lower-mean component.
    pub fn posterior_low(&self, x: f64) -> f64 {
        let lj = self.log_joint(x);
        let low = self.low();
        let m = lj[0].max(lj[1]);
        let e = [(lj[0] - m).exp(), (lj[1] - m).exp()];
        e[low] / (e[0] + e[1])
    }

    fn total_log_likelihood(&self, xs: &[f64]) -> f64 {
        xs.iter()
            .map(|&x| {
                let lj = self.log_joint(x);
                let m = lj[0].max(lj[1]);
                m + ((lj[0] - m).exp() + (lj[1] - m).exp()).ln()
            })
            .sum()
    }
}

/// EM fit. Means start at min and max, both variances at the sample
/// variance, weights at one half.
pub fn fit_gmm2(xs: &[f64]) -> Result<Gmm2> {
    let n = xs.len();
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    let nf = n as f64;
    let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = xs.iter().sum::<f64>() / nf;
    let var = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nf).max(GMM_VAR_FLOOR);
    let mut g = Gmm2 {
        means: [min, max],
        vars: [var, var],
        weights: [0.5, 0.5],
        iterations: 0,
        log_likelihood: 0.0,
    };
    g.log_likelihood = g.total_log_likelihood(xs);
    let mut resp = vec![[0.0; 2]; n];
    for it in 1..=GMM_MAX_ITER {
        for (r, &x) in resp.iter_mut().zip(xs) {
            let lj = g.log_joint(x);
            let m = lj[0].max(lj[1]);
            let e = [(lj[0] - m).exp(), (lj[1] - m).exp()];
            let s = e[0] + e[1];
            *r = [e[0] / s, e[1] / s];
        }
        for k in 0..2 {
            let nk: f64 = resp.iter().map(|r| r[k]).sum();
            if nk <= 0.0 {
                continue;
            }
            let mu = resp.iter().zip(xs).map(|(r, x)| r[k] * x).sum::<f64>() / nk;
            let v = resp.iter().zip(xs).map(|(r, x)| r[k] * (x - mu).powi(2)).sum::<f64>() / nk;
            g.means[k] = mu;
            g.vars[k] = v.max(GMM_VAR_FLOOR);
            g.weights[k] = nk / nf;
        }
        g.iterations = it;
        let ll = g.total_log_likelihood(xs);
        let improvement = ll - g.log_likelihood;
        g.log_likelihood = ll;
        if improvement < GMM_TOL {
            break;
        }
    }
    Ok(g)
}

/// Certainty per sample: posterior of the low-loss component. When the
/// losses span less than 1e-6 every sample is fully certain.
pub fn gmm_certainty(losses: &[f64]) -> Result<Vec<f64>> {
    if losses.len() < 2 {
        return Err(Error::TooFewSamples(losses.len()));
    }
    let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let max = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max - min < 1e-6 {
        return Ok(vec![1.0; losses.len()]);
    }
    let g = fit_gmm2(losses)?;
    Ok(losses.iter().map(|&x| g.posterior_low(x)).collect())
}

/// Soft labels for an image and its augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedLabel {
    pub probs: Vec<f64>,
    pub probs_aug: Vec<f64>,
}

/// `y~ = w y + (1 - w) p(x_aug)` and `y~_aug = w y + (1 - w) p(x)`.
pub fn refine_labels(y: &[f64], w: f64, pred_x: &[f64], pred_xa: &[f64]) -> Result<RefinedLabel> {
    if y.len() != pred_x.len() || y.len() != pred_xa.len() {
        return Err(Error::LabelSpaceMismatch(format!(
            "label {} vs predictions {} / {}",
            y.len(),
            pred_x.len(),
            pred_xa.len()
        )));
    }
    let mix = |p: &[f64]| -> Vec<f64> { y.iter().zip(p).map(|(a, b)| w * a + (1.0 - w) * b).collect() };
    Ok(RefinedLabel {
        probs: mix(pred_xa),
        probs_aug: mix(pred_x),
    })
}

pub fn one_hot(k: usize, row: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[row] = 1.0;
    v
}

/// `P(Y | x)` through the shared memory.
pub fn predict_shared(f: &[f64], bank: &MemoryBank, sigma: f64) -> Result<Vec<f64>> {
    if bank.is_empty() {
        return Err(Error::EmptyBank);
    }
    Ok(softmax_temp(&bank.scores(f), sigma))
}

/// `eta / max(conf, eta)`: 1 (frozen) at or below the threshold.
pub fn adaptive_coefficient(conf: f64, eta: f64) -> f64 {
    eta / conf.max(eta)
}

/// `m_y <- normalize(c m_y + (1 - c) f)` with the adaptive coefficient `c`.
/// Returns the coefficient used.
pub fn update_memory(bank: &mut MemoryBank, f: &[f64], label: usize, refined_conf: f64, eta: f64) -> Result<f64> {
    let row = bank.row_of(label).ok_or(Error::UnknownLabel(label))?;
    let c = adaptive_coefficient(refined_conf, eta);
    if c >= 1.0 {
        return Ok(1.0);
    }
    let m = bank.centroid(row);
    let mixed: Vec<f64> = m.iter().zip(f).map(|(a, b)| c * a + (1.0 - c) * b).collect();
    match l2_normalize(&mixed) {
        Ok(v) => bank.centroid_mut(row).copy_from_slice(&v),
        // antipodal cancellation leaves the centroid as it was
        Err(Error::ZeroVector(_)) => {}
        Err(e) => return Err(e),
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dot;
    use proptest::prelude::*;

    #[test]
    fn per_sample_examples() {
        let e = std::f64::consts::E;
        let bank = MemoryBank::dense(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let l = per_sample_losses(&[vec![1.0, 0.0], vec![0.6, 0.8]], &bank, &[0, 1], 1.0).unwrap();
        assert!((l[0] + (e / (e + 1.0)).ln()).abs() < 1e-14);
        let want = -((0.8f64).exp() / ((0.6f64).exp() + (0.8f64).exp())).ln();
        assert!((l[1] - want).abs() < 1e-14);
        let l = per_sample_losses(&[vec![0.0, 0.0, 1.0]], &MemoryBank::dense(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap(), &[1], 0.05).unwrap();
        assert!((l[0] - 2f64.ln()).abs() < 1e-14);
        assert_eq!(per_sample_losses(&[vec![1.0, 0.0]], &bank, &[4], 1.0), Err(Error::UnknownLabel(4)));
    }

    #[test]
    fn gmm_two_deltas() {
        let mut xs = vec![0.01; 50];
        xs.extend(vec![5.0; 50]);
        let g = fit_gmm2(&xs).unwrap();
        assert!(g.iterations < GMM_MAX_ITER);
        let w = gmm_certainty(&xs).unwrap();
        assert!(w[..50].iter().all(|&v| v > 0.999));
        assert!(w[50..].iter().all(|&v| v < 0.001));
    }

    #[test]
    fn gmm_degenerate_and_small() {
        assert_eq!(gmm_certainty(&[0.3; 7]).unwrap(), vec![1.0; 7]);
        assert_eq!(gmm_certainty(&[0.3]), Err(Error::TooFewSamples(1)));
    }

    #[test]
    fn gmm_outlier() {
        let mut xs: Vec<f64> = (0..40).map(|i| 1.0 + 0.01 * ((i * 7 % 13) as f64 - 6.0)).collect();
        xs.push(9.0);
        let w = gmm_certainty(&xs).unwrap();
        assert!(w[40] < 0.5);
        assert!(w[..40].iter().all(|&v| v > 0.5));
    }

    #[test]
    fn refine_examples() {
        let y = [1.0, 0.0];
        let r = refine_labels(&y, 1.0, &[0.3, 0.7], &[0.1, 0.9]).unwrap();
        assert_eq!(r.probs, y.to_vec());
        assert_eq!(r.probs_aug, y.to_vec());
        let r = refine_labels(&y, 0.0, &[0.3, 0.7], &[0.1, 0.9]).unwrap();
        assert_eq!(r.probs, vec![0.1, 0.9]);
        assert_eq!(r.probs_aug, vec![0.3, 0.7]);
        let r = refine_labels(&y, 0.6, &[0.3, 0.7], &[0.5, 0.5]).unwrap();
        assert!((r.probs[0] - 0.8).abs() < 1e-15 && (r.probs[1] - 0.2).abs() < 1e-15);
        assert!(matches!(refine_labels(&y, 0.5, &[1.0], &[0.5, 0.5]), Err(Error::LabelSpaceMismatch(_))));
    }

    #[test]
    fn predict_examples() {
        let one = MemoryBank::dense(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(predict_shared(&[1.0, 0.0], &one, 0.05).unwrap(), vec![1.0]);
        let bank = MemoryBank::dense(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(predict_shared(&[1.0, 0.0, 0.0], &bank, 0.05).unwrap(), vec![0.5, 0.5]);
        let empty = MemoryBank::new(vec![], &[]).unwrap();
        assert_eq!(predict_shared(&[1.0], &empty, 0.05), Err(Error::EmptyBank));
    }

    #[test]
    fn memory_update_examples() {
        let m0 = vec![1.0, 0.0];
        let f = vec![0.0, 1.0];
        for conf in [0.0, 0.1, 0.2] {
            let mut bank = MemoryBank::dense(&[m0.clone()]).unwrap();
            assert_eq!(update_memory(&mut bank, &f, 0, conf, 0.2).unwrap(), 1.0);
            assert_eq!(bank.centroid(0), m0.as_slice());
        }
        let cases = [(0.8, 0.25), (1.0, 0.2), (0.5, 0.4)];
        for (conf, coef) in cases {
            let mut bank = MemoryBank::dense(&[m0.clone()]).unwrap();
            let c = update_memory(&mut bank, &f, 0, conf, 0.2).unwrap();
            assert!((c - coef).abs() < 1e-15);
            let want = l2_normalize(&[coef, 1.0 - coef]).unwrap();
            assert!((bank.centroid(0)[0] - want[0]).abs() < 1e-15);
            assert!((bank.centroid(0)[1] - want[1]).abs() < 1e-15);
        }
        let mut bank = MemoryBank::dense(&[m0]).unwrap();
        assert_eq!(update_memory(&mut bank, &f, 3, 1.0, 0.2), Err(Error::UnknownLabel(3)));
    }

    proptest! {
        #[test]
        fn gmm_permutation_invariant(xs in prop::collection::vec(0.0f64..10.0, 2..40), rot in 0usize..40) {
            let w = gmm_certainty(&xs).unwrap();
            let k = rot % xs.len();
            let mut ys = xs.clone();
            ys.rotate_left(k);
            let mut v = gmm_certainty(&ys).unwrap();
            v.rotate_right(k);
            for (a, b) in w.iter().zip(&v) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn gmm_monotone_in_loss(xs in prop::collection::vec(0.0f64..10.0, 4..40)) {
            let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
            let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assume!(max - min > 1e-3);
            let g = fit_gmm2(&xs).unwrap();
            // monotone between the two means; tails of unequal-variance fits may turn
            let (lo, hi) = if g.means[0] < g.means[1] { (g.means[0], g.means[1]) } else { (g.means[1], g.means[0]) };
            let grid: Vec<f64> = (0..=50).map(|i| lo + (hi - lo) * i as f64 / 50.0).collect();
            for p in grid.windows(2) {
                prop_assert!(g.posterior_low(p[1]) <= g.posterior_low(p[0]) + 1e-12);
            }
        }

        #[test]
        fn refined_is_distribution(
            raw in prop::collection::vec(0.01f64..1.0, 2..8),
            raw2 in prop::collection::vec(0.01f64..1.0, 8),
            w in 0.0f64..=1.0,
            pick in 0usize..8,
        ) {
            let k = raw.len();
            let norm = |v: &[f64]| { let s: f64 = v.iter().sum(); v.iter().map(|x| x / s).collect::<Vec<_>>() };
            let px = norm(&raw);
            let pxa = norm(&raw2[..k]);
            let y = one_hot(k, pick % k);
            let r = refine_labels(&y, w, &px, &pxa).unwrap();
            for v in [&r.probs, &r.probs_aug] {
                prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                prop_assert!(v.iter().all(|&x| x >= 0.0));
            }
        }

        #[test]
        fn low_confidence_update_is_noop(a in -1.0f64..1.0, b in -1.0f64..1.0, conf in 0.0f64..=0.2) {
            prop_assume!(a.abs() + b.abs() > 1e-3);
            let m = l2_normalize(&[a, b]).unwrap();
            let mut bank = MemoryBank::dense(&[m.clone()]).unwrap();
            update_memory(&mut bank, &[0.0, 1.0], 0, conf, 0.2).unwrap();
            prop_assert!((dot(bank.centroid(0), &m) - 1.0).abs() < 1e-12);
        }
    }
}
