//! Library routines against independent brute-force reimplementations on
//! random instances.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xmd_core::cluster::{dbscan, MemoryBank};
use xmd_core::encoder::{EncoderConfig, ParamSet};
use xmd_core::eval::{cmc, mean_ap, minp, RankList};
use xmd_core::linalg::Matrix;
use xmd_core::losses::{hardest_pairs, triplet_loss};
use xmd_core::matching::{adjusted_rand, homogeneity, imca_match, MatchMode};
use xmd_core::optim::{adam_step, AdamConfig, AdamState};
use xmd_core::refine::{fit_gmm2, gmm_certainty};

const INSTANCES: u64 = 60;

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Points scattered around a few random centres.
fn blobs(rng: &mut ChaCha8Rng, n: usize, d: usize, centres: usize, spread: f64) -> Vec<Vec<f64>> {
    let cs: Vec<Vec<f64>> = (0..centres).map(|_| unit(rng, d)).collect();
    (0..n)
        .map(|_| {
            let c = &cs[rng.random_range(0..centres)];
            let v: Vec<f64> = c.iter().map(|x| x + rng.random_range(-spread..spread)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn cos_dist(a: &[f64], b: &[f64]) -> f64 {
    1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
}

/// DBSCAN by graph components: core points joined when within eps, clusters
/// numbered by their smallest core index, borders to the lowest-numbered
/// adjacent cluster.
fn dbscan_oracle(x: &[Vec<f64>], eps: f64, min_pts: usize) -> (Vec<Option<usize>>, usize) {
    let n = x.len();
    let adj: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| cos_dist(&x[i], &x[j]) <= eps).collect()).collect();
    let core: Vec<bool> = adj.iter().map(|r| r.iter().filter(|&&b| b).count() >= min_pts).collect();
    let mut comp = vec![usize::MAX; n];
    let mut next = 0;
    for s in 0..n {
        if !core[s] || comp[s] != usize::MAX {
            continue;
        }
        let mut stack = vec![s];
        comp[s] = next;
        while let Some(u) = stack.pop() {
            for v in 0..n {
                if core[v] && adj[u][v] && comp[v] == usize::MAX {
                    comp[v] = next;
                    stack.push(v);
                }
            }
        }
        next += 1;
    }
    let labels = (0..n)
        .map(|i| {
            if core[i] {
                Some(comp[i])
            } else {
                (0..n).filter(|&j| core[j] && adj[i][j]).map(|j| comp[j]).min()
            }
        })
        .collect();
    (labels, next)
}

/// Whether any pairwise distance sits within `gap` of eps.
fn near_boundary(x: &[Vec<f64>], eps: f64, gap: f64) -> bool {
    (0..x.len()).any(|i| (i + 1..x.len()).any(|j| (cos_dist(&x[i], &x[j]) - eps).abs() < gap))
}

#[test]
pub fn dbscan_matches_component_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    let (mut multi, mut noisy) = (0, 0);
    while checked < INSTANCES {
        let n = rng.random_range(5..=200);
        let d = rng.random_range(2..=6);
        let centres = rng.random_range(1..=6);
        let spread = rng.random_range(0.05..0.5);
        let x = blobs(&mut rng, n, d, centres, spread);
        let eps = rng.random_range(0.02..0.3);
        let min_pts = rng.random_range(2..=8);
        if near_boundary(&x, eps, 1e-9) {
            continue;
        }
        let got = dbscan(&Matrix::from_rows(&x).unwrap(), eps, min_pts);
        let (labels, k) = dbscan_oracle(&x, eps, min_pts);
        assert_eq!(got.labels, labels, "instance {checked}");
        assert_eq!(got.num_clusters, k);
        multi += usize::from(k > 1);
        noisy += usize::from(got.noise_count() > 0);
        checked += 1;
    }
    assert!(multi > 10 && noisy > 5, "{multi} multi-cluster and {noisy} noisy instances");
}

#[test]
pub fn imca_matches_argmax_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..INSTANCES {
        let d = rng.random_range(2..=8);
        let a: Vec<Vec<f64>> = (0..rng.random_range(1..=20)).map(|_| unit(&mut rng, d)).collect();
        let b: Vec<Vec<f64>> = (0..rng.random_range(1..=20)).map(|_| unit(&mut rng, d)).collect();
        let (ba, bb) = (MemoryBank::dense(&a).unwrap(), MemoryBank::dense(&b).unwrap());
        let sim = |i: usize, j: usize| ba.centroid(i).iter().zip(bb.centroid(j)).map(|(x, y)| x * y).sum::<f64>();
        let first_max = |len: usize, f: &dyn Fn(usize) -> f64| {
            let mut best = 0;
            for k in 1..len {
                if f(k) > f(best) {
                    best = k;
                }
            }
            best
        };
        let rows: Vec<usize> = (0..a.len()).map(|i| first_max(b.len(), &|j| sim(i, j))).collect();
        let cols: Vec<usize> = (0..b.len()).map(|j| first_max(a.len(), &|i| sim(i, j))).collect();
        assert_eq!(imca_match(&ba, &bb, MatchMode::Row).unwrap().assignment, rows);
        assert_eq!(imca_match(&ba, &bb, MatchMode::Col).unwrap().assignment, cols);
    }
}

#[test]
pub fn triplet_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut checked = 0;
    while checked < INSTANCES {
        let n = rng.random_range(3..=40);
        let d = rng.random_range(2..=6);
        let feats: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut rng, d)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let margin = rng.random_range(0.0..0.6);
        let s = |i: usize, j: usize| feats[i].iter().zip(&feats[j]).map(|(x, y)| x * y).sum::<f64>();
        let mut total = 0.0;
        let mut valid = 0;
        for a in 0..n {
            let pos: Vec<usize> = (0..n).filter(|&j| j != a && labels[j] == labels[a]).collect();
            let neg: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[a]).collect();
            if pos.is_empty() || neg.is_empty() {
                assert_eq!(hardest_pairs(&feats, &labels)[a], None);
                continue;
            }
            // worst over every (positive, negative) pair
            let mut worst = f64::NEG_INFINITY;
            for &p in &pos {
                for &q in &neg {
                    worst = worst.max(margin - s(a, p) + s(a, q));
                }
            }
            total += worst.max(0.0);
            valid += 1;
        }
        if valid == 0 {
            assert!(triplet_loss(&feats, &labels, margin).is_err());
            continue;
        }
        let got = triplet_loss(&feats, &labels, margin).unwrap();
        assert!((got - total / valid as f64).abs() < 1e-12, "{got} vs {}", total / valid as f64);
        checked += 1;
    }
}

struct Ranked {
    scores: Vec<f64>,
    relevant: Vec<bool>,
}

/// 1-based rank of gallery item `g`: items scoring higher, or equal with a
/// smaller index, come first.
fn rank_of(r: &Ranked, g: usize) -> usize {
    1 + (0..r.scores.len())
        .filter(|&j| r.scores[j] > r.scores[g] || (r.scores[j] == r.scores[g] && j < g))
        .count()
}

fn metric_oracles(qs: &[Ranked], k: usize) -> (f64, f64, f64) {
    let (mut hit, mut ap, mut inp, mut used) = (0.0, 0.0, 0.0, 0.0);
    for q in qs {
        let mut ranks: Vec<usize> = (0..q.scores.len()).filter(|&g| q.relevant[g]).map(|g| rank_of(q, g)).collect();
        if ranks.is_empty() {
            continue;
        }
        ranks.sort();
        used += 1.0;
        if ranks[0] <= k {
            hit += 1.0;
        }
        // precision at each relevant position
        let mut sum = 0.0;
        for (i, &r) in ranks.iter().enumerate() {
            let relevant_above = (0..q.scores.len()).filter(|&g| q.relevant[g] && rank_of(q, g) <= r).count();
            assert_eq!(relevant_above, i + 1);
            sum += relevant_above as f64 / r as f64;
        }
        ap += sum / ranks.len() as f64;
        inp += ranks.len() as f64 / *ranks.last().unwrap() as f64;
    }
    (hit / used, ap / used, inp / used)
}

#[test]
pub fn retrieval_metrics_match_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..100 {
        let g = rng.random_range(1..=20);
        let qs: Vec<Ranked> = (0..rng.random_range(1..=10))
            .map(|_| Ranked {
                // coarse scores so ties happen
                scores: (0..g).map(|_| rng.random_range(0..6) as f64 / 5.0).collect(),
                relevant: (0..g).map(|_| rng.random_bool(0.3)).collect(),
            })
            .collect();
        let lists: Vec<RankList> = qs.iter().map(|q| RankList::from_scores(&q.scores, q.relevant.clone())).collect();
        let k = rng.random_range(1..=g);
        if qs.iter().all(|q| !q.relevant.contains(&true)) {
            assert!(cmc(&lists, k).is_err());
            continue;
        }
        let (c, ap, inp) = metric_oracles(&qs, k);
        assert!((cmc(&lists, k).unwrap() - c).abs() < 1e-12);
        assert!((mean_ap(&lists).unwrap() - ap).abs() < 1e-12);
        assert!((minp(&lists).unwrap() - inp).abs() < 1e-12);
        assert!(cmc(&lists, k).unwrap() <= cmc(&lists, g).unwrap());
    }
}

/// ARI from explicit pair enumeration.
fn ari_oracle(pred: &[usize], truth: &[usize]) -> f64 {
    let n = pred.len();
    let (mut a, mut b, mut c, mut d) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            match (pred[i] == pred[j], truth[i] == truth[j]) {
                (true, true) => a += 1.0,
                (true, false) => b += 1.0,
                (false, true) => c += 1.0,
                (false, false) => d += 1.0,
            }
        }
    }
    let den = (a + b) * (b + d) + (a + c) * (c + d);
    if den == 0.0 {
        1.0
    } else {
        2.0 * (a * d - b * c) / den
    }
}

/// Homogeneity as one minus the cluster-weighted class entropy over the
/// class entropy.
fn homogeneity_oracle(pred: &[usize], truth: &[usize]) -> f64 {
    let n = pred.len() as f64;
    let ent = |items: &[usize]| {
        let mut m: HashMap<usize, f64> = HashMap::new();
        for &t in items {
            *m.entry(t).or_default() += 1.0;
        }
        let total = items.len() as f64;
        -m.values().map(|&c| c / total * (c / total).ln()).sum::<f64>()
    };
    let h = ent(truth);
    if h == 0.0 {
        return 1.0;
    }
    let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
    for (&p, &t) in pred.iter().zip(truth) {
        groups.entry(p).or_default().push(t);
    }
    let cond: f64 = groups.values().map(|g| g.len() as f64 / n * ent(g)).sum();
    1.0 - cond / h
}

#[test]
pub fn label_quality_matches_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..INSTANCES {
        let n = rng.random_range(2..=200);
        let classes = rng.random_range(1..=8);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let pred: Vec<Option<usize>> = (0..n)
            .map(|i| if rng.random_bool(0.1) { None } else if rng.random_bool(0.6) { Some(truth[i]) } else { Some(rng.random_range(0..6)) })
            .collect();
        let (p, t): (Vec<usize>, Vec<usize>) = pred.iter().zip(&truth).filter_map(|(p, t)| p.map(|p| (p, *t))).unzip();
        if p.is_empty() {
            continue;
        }
        let ari = adjusted_rand(&pred, &truth).unwrap();
        assert!((ari - ari_oracle(&p, &t)).abs() < 1e-12, "{ari} vs {}", ari_oracle(&p, &t));
        let h = homogeneity(&pred, &truth).unwrap();
        assert!((h - homogeneity_oracle(&p, &t).clamp(0.0, 1.0)).abs() < 1e-12);
    }
}

/// EM for two 1-d Gaussians in the probability domain.
fn gmm_oracle(xs: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var0 = (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).max(1e-8);
    let mut mu = [xs.iter().cloned().fold(f64::MAX, f64::min), xs.iter().cloned().fold(f64::MIN, f64::max)];
    let mut var = [var0, var0];
    let mut pi = [0.5, 0.5];
    let pdf = |x: f64, m: f64, v: f64| (-(x - m) * (x - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
    let ll = |mu: &[f64; 2], var: &[f64; 2], pi: &[f64; 2]| xs.iter().map(|&x| (pi[0] * pdf(x, mu[0], var[0]) + pi[1] * pdf(x, mu[1], var[1])).ln()).sum::<f64>();
    let mut prev = ll(&mu, &var, &pi);
    for _ in 0..100 {
        let r: Vec<[f64; 2]> = xs
            .iter()
            .map(|&x| {
                let a = pi[0] * pdf(x, mu[0], var[0]);
                let b = pi[1] * pdf(x, mu[1], var[1]);
                [a / (a + b), b / (a + b)]
            })
            .collect();
        for k in 0..2 {
            let nk: f64 = r.iter().map(|r| r[k]).sum();
            mu[k] = r.iter().zip(xs).map(|(r, x)| r[k] * x).sum::<f64>() / nk;
            var[k] = (r.iter().zip(xs).map(|(r, x)| r[k] * (x - mu[k]) * (x - mu[k])).sum::<f64>() / nk).max(1e-8);
            pi[k] = nk / n;
        }
        let cur = ll(&mu, &var, &pi);
        let done = cur - prev < 1e-6;
        prev = cur;
        if done {
            break;
        }
    }
    let low = if mu[0] <= mu[1] { 0 } else { 1 };
    xs.iter()
        .map(|&x| {
            let p = [pi[0] * pdf(x, mu[0], var[0]), pi[1] * pdf(x, mu[1], var[1])];
            p[low] / (p[0] + p[1])
        })
        .collect()
}

#[test]
pub fn gmm_matches_probability_domain_em() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..INSTANCES {
        let n = rng.random_range(10..=200);
        let split = rng.random_range(0.2..0.8);
        let xs: Vec<f64> = (0..n)
            .map(|_| if rng.random_bool(split) { rng.random_range(0.0..1.0) } else { rng.random_range(2.0..4.0) })
            .collect();
        let got = gmm_certainty(&xs).unwrap();
        let want = gmm_oracle(&xs);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-6, "{g} vs {w}");
        }
        assert!(fit_gmm2(&xs).unwrap().iterations <= 100);
    }
}

#[test]
pub fn adam_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..INSTANCES {
        let cfg = AdamConfig::with_lr(rng.random_range(1e-4..1e-1));
        let mut p = ParamSet::zeros(EncoderConfig {
            input_dim: 1,
            feature_dim: 1,
            hidden_dim: 1,
            depth: 1,
            bias: false,
        })
        .unwrap();
        let x0 = rng.random_range(-1.0..1.0);
        p.tensors[0].data[0] = x0;
        let mut state = AdamState::new(&p);
        let (mut x, mut m, mut v) = (x0, 0.0f64, 0.0f64);
        for t in 1..=5 {
            let g = rng.random_range(-2.0..2.0);
            let mut grad = p.zeros_like();
            grad.tensors[0].data[0] = g;
            adam_step(&mut p, &grad, &mut state, cfg);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= cfg.lr * mh / (vh.sqrt() + 1e-8);
            assert!((p.tensors[0].data[0] - x).abs() < 1e-12);
        }
    }
}
