//! Loss terms of the training objective and their gradients with respect to
//! the (unit-norm) features.
//!
//! Memories, priors and soft targets are constants here; gradients flow only
//! into the features passed in.

use serde::{Deserialize, Serialize};

use crate::cluster::MemoryBank;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, log_softmax_temp, softmax_temp, sq_dist};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cai: f64,
    pub lambda_fa: f64,
    pub sigma: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cai: 0.5,
            lambda_fa: 1.0,
            sigma: 0.05,
            margin: 0.3,
        }
    }
}

/// Weighted centroid sum `sum_k w_k m_k`.
fn mix_centroids(bank: &MemoryBank, weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; bank.dim()];
    for (k, w) in weights.iter().enumerate() {
        if *w != 0.0 {
            axpy(*w, bank.centroid(k), &mut out);
        }
    }
    out
}

/// Cluster-contrast cross-entropy `-log softmax(<f, m> / sigma)[label]` and
/// its gradient `(sum_k p_k m_k - m_label) / sigma`.
pub fn id_loss_grad(f: &[f64], bank: &MemoryBank, label: usize, sigma: f64) -> Result<(f64, Vec<f64>)> {
    let row = bank.row_of(label).ok_or(Error::UnknownLabel(label))?;
    let scores = bank.scores(f);
    let logp = log_softmax_temp(&scores, sigma);
    let p = softmax_temp(&scores, sigma);
    let mut g = mix_centroids(bank, &p);
    axpy(-1.0, bank.centroid(row), &mut g);
    for v in &mut g {
        *v /= sigma;
    }
    Ok((-logp[row], g))
}

pub fn id_loss(f: &[f64], bank: &MemoryBank, label: usize, sigma: f64) -> Result<f64> {
    Ok(id_loss_grad(f, bank, label, sigma)?.0)
}

/// Soft-target cross-entropy `-sum_k t_k log softmax(<f, m> / sigma)_k`,
/// `target` indexed by bank row.
pub fn soft_ce_grad(f: &[f64], bank: &MemoryBank, target: &[f64], sigma: f64) -> Result<(f64, Vec<f64>)> {
    if target.len() != bank.len() {
        return Err(Error::LabelSpaceMismatch(format!(
            "target has {} entries, bank has {} rows",
            target.len(),
            bank.len()
        )));
    }
    let scores = bank.scores(f);
    let logp = log_softmax_temp(&scores, sigma);
    let p = softmax_temp(&scores, sigma);
    let mut loss = 0.0;
    let mut mass = 0.0;
    for (t, lp) in target.iter().zip(&logp) {
        if *t != 0.0 {
            loss -= t * lp;
        }
        mass += t;
    }
    let mut g = mix_centroids(bank, &p);
    for v in &mut g {
        *v *= mass;
    }
    let tm = mix_centroids(bank, target);
    axpy(-1.0, &tm, &mut g);
    for v in &mut g {
        *v /= sigma;
    }
    Ok((loss, g))
}

fn check_backdoor_banks(banks: [&MemoryBank; 2]) -> Result<()> {
    if banks[0].labels() != banks[1].labels() {
        return Err(Error::LabelSpaceMismatch(
            "visible and infrared memories must share one label space".into(),
        ));
    }
    if banks[0].is_empty() {
        return Err(Error::EmptyBank);
    }
    Ok(())
}

/// Interventional prediction `P(Y | do(X = x)) = sum_c P(Y | x, c) P(c)`,
/// where `P(Y | x, c)` is the softmax over modality `c`'s memory.
pub fn backdoor_probs(f: &[f64], banks: [&MemoryBank; 2], priors: [f64; 2], sigma: f64) -> Result<Vec<f64>> {
    check_backdoor_banks(banks)?;
    let mut out = vec![0.0; banks[0].len()];
    for (bank, prior) in banks.iter().zip(priors) {
        let p = softmax_temp(&bank.scores(f), sigma);
        for (o, pk) in out.iter_mut().zip(&p) {
            *o += prior * pk;
        }
    }
    Ok(out)
}

/// The same mixture with per-sample modality weights `q(c | x)` in place of
/// the priors, i.e. the observational likelihood decomposition.
pub fn mixture_probs(f: &[f64], banks: [&MemoryBank; 2], weights: [f64; 2], sigma: f64) -> Result<Vec<f64>> {
    backdoor_probs(f, banks, weights, sigma)
}

/// `-sum_k t_k log P(k | do(x))` for one image, with gradient.
pub fn backdoor_ce_grad(
    f: &[f64],
    banks: [&MemoryBank; 2],
    priors: [f64; 2],
    target: &[f64],
    sigma: f64,
) -> Result<(f64, Vec<f64>)> {
    check_backdoor_banks(banks)?;
    if target.len() != banks[0].len() {
        return Err(Error::LabelSpaceMismatch(format!(
            "target has {} entries, memories have {} rows",
            target.len(),
            banks[0].len()
        )));
    }
    let per_bank: Vec<Vec<f64>> = banks
        .iter()
        .map(|b| softmax_temp(&b.scores(f), sigma))
        .collect();
    let k = target.len();
    let mut mix = vec![0.0; k];
    for (p, prior) in per_bank.iter().zip(priors) {
        for j in 0..k {
            mix[j] += prior * p[j];
        }
    }
    let mut loss = 0.0;
    // r_j = dL / dP_j
    let mut r = vec![0.0; k];
    for j in 0..k {
        if target[j] != 0.0 {
            loss -= target[j] * mix[j].ln();
            r[j] = -target[j] / mix[j];
        }
    }
    // dP_j / df = sum_c prior_c p^c_j (m^c_j - mbar^c) / sigma
    let mut g = vec![0.0; f.len()];
    for ((bank, p), prior) in banks.iter().zip(&per_bank).zip(priors) {
        if prior == 0.0 {
            continue;
        }
        let rp: Vec<f64> = (0..k).map(|j| r[j] * p[j]).collect();
        let rp_sum: f64 = rp.iter().sum();
        let weighted = mix_centroids(bank, &rp);
        let mbar = mix_centroids(bank, p);
        for i in 0..f.len() {
            g[i] += prior * (weighted[i] - rp_sum * mbar[i]) / sigma;
        }
    }
    Ok((loss, g))
}

/// Soft-label backdoor loss for an image and its augmentation:
/// `-sum_k y[k] log P(k | do(x)) - sum_k y_aug[k] log P(k | do(x_aug))`.
/// Returns the loss and gradients for `f` and `f_aug`.
pub fn cai_loss_soft_grad(
    f: &[f64],
    f_aug: &[f64],
    banks: [&MemoryBank; 2],
    priors: [f64; 2],
    refined: (&[f64], &[f64]),
    sigma: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (l1, g1) = backdoor_ce_grad(f, banks, priors, refined.0, sigma)?;
    let (l2, g2) = backdoor_ce_grad(f_aug, banks, priors, refined.1, sigma)?;
    Ok((l1 + l2, g1, g2))
}

pub fn cai_loss_soft(
    f: &[f64],
    f_aug: &[f64],
    banks: [&MemoryBank; 2],
    priors: [f64; 2],
    refined: (&[f64], &[f64]),
    sigma: f64,
) -> Result<f64> {
    Ok(cai_loss_soft_grad(f, f_aug, banks, priors, refined, sigma)?.0)
}

/// Kernel bandwidth rule for the MMD terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Bandwidth {
    /// `h^2` = median squared distance over all distinct pairs of the pooled
    /// sample, floored at 1e-6.
    Median,
    Fixed(f64),
}

pub const BANDWIDTH_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Mmd {
    pub value: f64,
    pub h2: f64,
    pub grad_x: Vec<Vec<f64>>,
    pub grad_y: Vec<Vec<f64>>,
}

/// Biased (V-statistic) squared MMD between two samples under the Gaussian
/// kernel, with gradients for every point. Sizes may differ.
///
/// With the median rule the bandwidth is itself a function of the points and
/// is differentiated through the selected median pair(s).
pub fn mmd2_grad(x: &[Vec<f64>], y: &[Vec<f64>], bw: Bandwidth) -> Result<Mmd> {
    let (n, m) = (x.len(), y.len());
    if n == 0 || m == 0 {
        return Err(Error::CountMismatch(n, m));
    }
    let pts: Vec<&[f64]> = x.iter().chain(y).map(|v| v.as_slice()).collect();
    let total = n + m;
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(total * (total - 1) / 2);
    for p in 0..total {
        for q in p + 1..total {
            pairs.push((sq_dist(pts[p], pts[q]), p, q));
        }
    }

    // median pair(s) and their share of d(h^2)
    let mut median_pairs: Vec<(usize, usize, f64)> = Vec::new();
    let h2 = match bw {
        Bandwidth::Fixed(h) => h * h,
        Bandwidth::Median => {
            let mut sorted = pairs.clone();
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let len = sorted.len();
            let med = if len % 2 == 1 {
                let s = sorted[len / 2];
                median_pairs.push((s.1, s.2, 1.0));
                s.0
            } else {
                let (a, b) = (sorted[len / 2 - 1], sorted[len / 2]);
                median_pairs.push((a.1, a.2, 0.5));
                median_pairs.push((b.1, b.2, 0.5));
                (a.0 + b.0) / 2.0
            };
            if med < BANDWIDTH_FLOOR {
                median_pairs.clear();
                BANDWIDTH_FLOOR
            } else {
                med
            }
        }
    };

    let (nf, mf) = (n as f64, m as f64);
    let weight = |p: usize, q: usize| -> f64 {
        match (p < n, q < n) {
            (true, true) => 2.0 / (nf * nf),
            (false, false) => 2.0 / (mf * mf),
            _ => -2.0 / (nf * mf),
        }
    };
    // self-pairs contribute k = 1
    let mut value = 1.0 / nf + 1.0 / mf;
    let mut grads = vec![vec![0.0; pts[0].len()]; total];
    let mut d_h2 = 0.0;
    for &(d2, p, q) in &pairs {
        let w = weight(p, q);
        let k = (-d2 / (2.0 * h2)).exp();
        value += w * k;
        // d/dd2 of w k
        let c = -w * k / (2.0 * h2);
        for i in 0..pts[p].len() {
            let diff = pts[p][i] - pts[q][i];
            grads[p][i] += 2.0 * c * diff;
            grads[q][i] -= 2.0 * c * diff;
        }
        d_h2 += w * k * d2 / (2.0 * h2 * h2);
    }
    for &(p, q, share) in &median_pairs {
        let c = d_h2 * share;
        for i in 0..pts[p].len() {
            let diff = pts[p][i] - pts[q][i];
            grads[p][i] += 2.0 * c * diff;
            grads[q][i] -= 2.0 * c * diff;
        }
    }
    let grad_y = grads.split_off(n);
    Ok(Mmd {
        value,
        h2,
        grad_x: grads,
        grad_y,
    })
}

pub fn mmd2(x: &[Vec<f64>], y: &[Vec<f64>], bw: Bandwidth) -> Result<f64> {
    Ok(mmd2_grad(x, y, bw)?.value)
}

/// Feature alignment: sum over modalities of MMD^2 between original and
/// augmented features. Each pair must hold equally many index-aligned rows;
/// modalities with no rows are skipped.
pub fn fa_loss(per_modality: &[(&[Vec<f64>], &[Vec<f64>])], bw: Bandwidth) -> Result<f64> {
    let mut total = 0.0;
    for (orig, aug) in per_modality {
        if orig.len() != aug.len() {
            return Err(Error::CountMismatch(orig.len(), aug.len()));
        }
        if orig.is_empty() {
            continue;
        }
        total += mmd2(orig, aug, bw)?;
    }
    Ok(total)
}

/// Hardest positive (least similar, same label, not the anchor) and hardest
/// negative (most similar, other label) for each anchor. Ties go to the
/// smallest index.
pub fn hardest_pairs(feats: &[Vec<f64>], labels: &[usize]) -> Vec<Option<(usize, usize, f64, f64)>> {
    let n = feats.len();
    (0..n)
        .map(|a| {
            let mut pos: Option<(usize, f64)> = None;
            let mut neg: Option<(usize, f64)> = None;
            for j in 0..n {
                if j == a {
                    continue;
                }
                let s = dot(&feats[a], &feats[j]);
                if labels[j] == labels[a] {
                    if pos.is_none_or(|(_, b)| s < b) {
                        pos = Some((j, s));
                    }
                } else if neg.is_none_or(|(_, b)| s > b) {
                    neg = Some((j, s));
                }
            }
            match (pos, neg) {
                (Some((p, sp)), Some((q, sn))) => Some((p, q, sp, sn)),
                _ => None,
            }
        })
        .collect()
}

/// Batch-hard triplet hinge on cosine similarity, averaged over anchors that
/// have both a positive and a negative.
pub fn triplet_loss_grad(feats: &[Vec<f64>], labels: &[usize], margin: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    if feats.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: feats.len(),
            right: labels.len(),
        });
    }
    let hard = hardest_pairs(feats, labels);
    let valid = hard.iter().flatten().count();
    if valid == 0 {
        return Err(Error::DegenerateBatch);
    }
    let scale = 1.0 / valid as f64;
    let d = feats.first().map_or(0, |f| f.len());
    let mut grads = vec![vec![0.0; d]; feats.len()];
    let mut loss = 0.0;
    for (a, h) in hard.iter().enumerate() {
        let Some((p, q, sp, sn)) = *h else { continue };
        let l = margin - (sp - sn);
        if l > 0.0 {
            loss += l * scale;
            for i in 0..d {
                grads[a][i] += scale * (feats[q][i] - feats[p][i]);
                grads[p][i] -= scale * feats[a][i];
                grads[q][i] += scale * feats[a][i];
            }
        }
    }
    Ok((loss, grads))
}

pub fn triplet_loss(feats: &[Vec<f64>], labels: &[usize], margin: f64) -> Result<f64> {
    Ok(triplet_loss_grad(feats, labels, margin)?.0)
}

/// Step schedule for the triplet weight. Thresholds sit at 15, 25 and 35 of
/// a 50-epoch stage and scale with `stage_len`.
pub fn lambda_tri(epoch: usize, stage_len: usize) -> f64 {
    let e = epoch as f64;
    let scale = stage_len as f64 / 50.0;
    let (t1, t2, t3) = (15.0 * scale, 25.0 * scale, 35.0 * scale);
    if e <= t1 {
        0.0
    } else if e <= t2 {
        0.25
    } else if e <= t3 {
        0.5
    } else {
        1.0
    }
}

/// Sub-losses of one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub id_v: f64,
    pub id_i: f64,
    pub cai: f64,
    pub fa: f64,
    pub tri: f64,
}

/// `id_v + id_i + lambda_cai cai + lambda_fa fa + lambda_tri tri`
pub fn total_loss(terms: &LossTerms, weights: &LossWeights, lambda_tri: f64) -> f64 {
    terms.id_v + terms.id_i + weights.lambda_cai * terms.cai + weights.lambda_fa * terms.fa + lambda_tri * terms.tri
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::l2_normalize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        l2_normalize(&(0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap()
    }

    fn rand_bank(rng: &mut ChaCha8Rng, k: usize, d: usize) -> MemoryBank {
        MemoryBank::dense(&(0..k).map(|_| rand_unit(rng, d)).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn id_loss_examples() {
        let e = std::f64::consts::E;
        let bank = MemoryBank::dense(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let l = id_loss(&[1.0, 0.0], &bank, 0, 1.0).unwrap();
        assert!((l - (-(e / (e + 1.0)).ln())).abs() < 1e-14);

        let bank = MemoryBank::dense(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.0, -1.0, 0.0]]).unwrap();
        // f orthogonal to every centroid: all scores equal
        let l = id_loss(&[1.0, 0.0, 0.0], &bank, 2, 0.05).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-14);

        assert_eq!(id_loss(&[1.0, 0.0, 0.0], &bank, 7, 0.05), Err(Error::UnknownLabel(7)));
    }

    #[test]
    fn id_loss_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let bank = rand_bank(&mut rng, 6, 5);
            let f = rand_unit(&mut rng, 5);
            let y = rng.random_range(0..6);
            let sigma = rng.random_range(0.05..1.0);
            let num = (dot(&f, bank.centroid(y)) / sigma).exp();
            let den: f64 = (0..6).map(|k| (dot(&f, bank.centroid(k)) / sigma).exp()).sum();
            let want = -(num / den).ln();
            assert!((id_loss(&f, &bank, y, sigma).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn backdoor_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bank = rand_bank(&mut rng, 4, 3);
        let f = rand_unit(&mut rng, 3);
        let single = softmax_temp(&bank.scores(&f), 0.1);
        for priors in [[0.3, 0.7], [1.0, 0.0], [0.5, 0.5]] {
            let p = backdoor_probs(&f, [&bank, &bank], priors, 0.1).unwrap();
            for (a, b) in p.iter().zip(&single) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        let other = rand_bank(&mut rng, 4, 3);
        let p = backdoor_probs(&f, [&bank, &other], [1.0, 0.0], 0.1).unwrap();
        assert_eq!(p, single);

        let mv = MemoryBank::dense(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let mi = MemoryBank::dense(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let p = backdoor_probs(&[1.0, 0.0], [&mv, &mi], [0.5, 0.5], 1.0).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn backdoor_label_space_mismatch() {
        let a = MemoryBank::new(vec![0, 1], &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = MemoryBank::new(vec![0, 2], &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            backdoor_probs(&[1.0, 0.0], [&a, &b], [0.5, 0.5], 1.0),
            Err(Error::LabelSpaceMismatch(_))
        ));
        assert!(matches!(
            cai_loss_soft(&[1.0, 0.0], &[1.0, 0.0], [&a, &a], [0.5, 0.5], (&[1.0], &[1.0]), 1.0),
            Err(Error::LabelSpaceMismatch(_))
        ));
    }

    #[test]
    fn cai_collapses_to_shared_soft_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let bank = rand_bank(&mut rng, 5, 4);
            let f = rand_unit(&mut rng, 4);
            let fa = rand_unit(&mut rng, 4);
            let t: Vec<f64> = softmax_temp(&(0..5).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>(), 1.0);
            let ta: Vec<f64> = softmax_temp(&(0..5).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>(), 1.0);
            let pv = rng.random_range(0.0..1.0);
            let cai = cai_loss_soft(&f, &fa, [&bank, &bank], [pv, 1.0 - pv], (&t, &ta), 0.05).unwrap();
            let ce = soft_ce_grad(&f, &bank, &t, 0.05).unwrap().0 + soft_ce_grad(&fa, &bank, &ta, 0.05).unwrap().0;
            assert!((cai - ce).abs() < 1e-9);
        }
    }

    #[test]
    fn backdoor_replaces_posterior_with_prior() {
        // sum_c P(Y|x,c) q(c|x) evaluated at q = priors is the backdoor value
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mv = rand_bank(&mut rng, 3, 4);
        let mi = rand_bank(&mut rng, 3, 4);
        let f = rand_unit(&mut rng, 4);
        let priors = [0.65, 0.35];
        let by_hand: Vec<f64> = {
            let pv = softmax_temp(&mv.scores(&f), 0.2);
            let pi = softmax_temp(&mi.scores(&f), 0.2);
            (0..3).map(|k| pv[k] * priors[0] + pi[k] * priors[1]).collect()
        };
        assert_eq!(backdoor_probs(&f, [&mv, &mi], priors, 0.2).unwrap(), by_hand);
        assert_eq!(mixture_probs(&f, [&mv, &mi], priors, 0.2).unwrap(), by_hand);
        let posterior = mixture_probs(&f, [&mv, &mi], [0.9, 0.1], 0.2).unwrap();
        assert!(posterior.iter().zip(&by_hand).any(|(a, b)| (a - b).abs() > 1e-6));
    }

    #[test]
    fn mmd_identical_sets_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<Vec<f64>> = (0..7).map(|_| rand_unit(&mut rng, 4)).collect();
        let v = fa_loss(&[(&x, &x)], Bandwidth::Median).unwrap();
        assert!(v.abs() < 1e-9, "{v}");
    }

    #[test]
    fn mmd_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x: Vec<Vec<f64>> = (0..5).map(|_| rand_unit(&mut rng, 3)).collect();
        let y: Vec<Vec<f64>> = (0..5).map(|_| rand_unit(&mut rng, 3)).collect();
        let a = mmd2(&x, &y, Bandwidth::Median).unwrap();
        let b = mmd2(&y, &x, Bandwidth::Median).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn mmd_two_point_expansion() {
        // n = 2: the nine distinct kernel terms written out
        let x = vec![vec![1.0, 0.0], vec![0.6, 0.8]];
        let y = vec![vec![0.0, 1.0], vec![-0.8, 0.6]];
        let h = 0.7;
        let k = |a: &[f64], b: &[f64]| (-sq_dist(a, b) / (2.0 * h * h)).exp();
        let want = (k(&x[0], &x[0]) + 2.0 * k(&x[0], &x[1]) + k(&x[1], &x[1])) / 4.0
            + (k(&y[0], &y[0]) + 2.0 * k(&y[0], &y[1]) + k(&y[1], &y[1])) / 4.0
            - 2.0 * (k(&x[0], &y[0]) + k(&x[0], &y[1]) + k(&x[1], &y[0]) + k(&x[1], &y[1])) / 4.0;
        let got = mmd2(&x, &y, Bandwidth::Fixed(h)).unwrap();
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn fa_count_mismatch() {
        let x = vec![vec![1.0, 0.0]];
        let y = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(fa_loss(&[(&x, &y)], Bandwidth::Median), Err(Error::CountMismatch(1, 2)));
    }

    #[test]
    fn median_bandwidth_floor() {
        let x = vec![vec![1.0, 0.0]; 3];
        let m = mmd2_grad(&x, &x, Bandwidth::Median).unwrap();
        assert_eq!(m.h2, BANDWIDTH_FLOOR);
        assert!(m.value.abs() < 1e-12);
    }

    #[test]
    fn triplet_examples() {
        // positives coincide, negatives antipodal
        let feats = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![-1.0, 0.0], vec![-1.0, 0.0]];
        assert_eq!(triplet_loss(&feats, &[0, 0, 1, 1], 0.3).unwrap(), 0.0);

        // every pair at the same similarity
        let feats = vec![vec![1.0, 0.0]; 4];
        assert!((triplet_loss(&feats, &[0, 0, 1, 1], 0.3).unwrap() - 0.3).abs() < 1e-15);

        let feats = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(triplet_loss(&feats, &[0, 1], 0.3), Err(Error::DegenerateBatch));
    }

    #[test]
    fn lambda_tri_schedule() {
        assert_eq!(lambda_tri(10, 50), 0.0);
        assert_eq!(lambda_tri(15, 50), 0.0);
        assert_eq!(lambda_tri(16, 50), 0.25);
        assert_eq!(lambda_tri(20, 50), 0.25);
        assert_eq!(lambda_tri(30, 50), 0.5);
        assert_eq!(lambda_tri(35, 50), 0.5);
        assert_eq!(lambda_tri(40, 50), 1.0);
        // 20-epoch stage: thresholds 6, 10, 14
        assert_eq!(lambda_tri(6, 20), 0.0);
        assert_eq!(lambda_tri(7, 20), 0.25);
        assert_eq!(lambda_tri(11, 20), 0.5);
        assert_eq!(lambda_tri(15, 20), 1.0);
    }

    #[test]
    fn total_loss_weights() {
        let t = LossTerms {
            id_v: 1.0,
            id_i: 1.0,
            cai: 1.0,
            fa: 1.0,
            tri: 1.0,
        };
        let zero = LossWeights {
            lambda_cai: 0.0,
            lambda_fa: 0.0,
            ..LossWeights::default()
        };
        assert_eq!(total_loss(&t, &zero, 0.0), 2.0);
        let w = LossWeights::default();
        for lt in [0.0, 0.25, 0.5, 1.0] {
            assert_eq!(total_loss(&t, &w, lt), 2.0 + 0.5 + 1.0 + lt);
        }
        let t = LossTerms {
            id_v: 0.3,
            id_i: 1.7,
            cai: 2.2,
            fa: 0.04,
            tri: 0.9,
        };
        assert_eq!(total_loss(&t, &w, 0.25), 0.3 + 1.7 + 0.5 * 2.2 + 1.0 * 0.04 + 0.25 * 0.9);
    }
}
