//! Composite losses over encoder parameters: exact gradients via the
//! per-term feature gradients and the encoder's backward pass, plus a
//! central finite-difference validator.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cluster::MemoryBank;
use crate::data::Modality;
use crate::encoder::{Forward, ParamSet};
use crate::error::{Error, Result};
use crate::losses::{
    cai_loss_soft_grad, id_loss_grad, mmd2_grad, soft_ce_grad, triplet_loss_grad, Bandwidth, LossTerms,
    LossWeights,
};
use crate::refine::RefinedLabel;

/// Registered differentiable terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    /// `sum_i |raw(x_i)|^2`, the squared pre-normalization output.
    SquaredNorm,
    /// No parameter dependence.
    Constant,
    IdV,
    IdI,
    Cai,
    SharedSoftCe,
    Fa,
    Cfa,
    /// Batch-hard triplet on unified labels.
    Triplet,
    /// Batch-hard triplet within each modality on single-modality labels,
    /// averaged over the modalities present.
    TripletModal,
}

impl Term {
    pub const ALL: [Term; 10] = [
        Term::SquaredNorm,
        Term::Constant,
        Term::IdV,
        Term::IdI,
        Term::Cai,
        Term::SharedSoftCe,
        Term::Fa,
        Term::Cfa,
        Term::Triplet,
        Term::TripletModal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::SquaredNorm => "sqnorm",
            Term::Constant => "const",
            Term::IdV => "id_v",
            Term::IdI => "id_i",
            Term::Cai => "cai",
            Term::SharedSoftCe => "soft_ce",
            Term::Fa => "fa",
            Term::Cfa => "cfa",
            Term::Triplet => "tri",
            Term::TripletModal => "tri_modal",
        }
    }

    fn needs_aug(self) -> bool {
        matches!(self, Term::Cai | Term::SharedSoftCe | Term::Fa)
    }
}

impl FromStr for Term {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Term::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::UnregisteredPrimitive(s.to_string()))
    }
}

/// Weighted sum of registered terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub terms: Vec<(f64, Term)>,
}

impl LossSpec {
    pub fn single(term: Term) -> Self {
        Self {
            terms: vec![(1.0, term)],
        }
    }

    /// Parses `"id_v + id_i + 0.5*cai + fa + 0.25*tri"`. A bare number is a
    /// constant term.
    pub fn parse(s: &str) -> Result<Self> {
        let mut terms = Vec::new();
        for part in s.split('+') {
            let part = part.trim();
            if part.is_empty() {
                return Err(Error::UnregisteredPrimitive(s.to_string()));
            }
            let (coef, name) = match part.split_once('*') {
                Some((c, n)) => {
                    let c: f64 = c
                        .trim()
                        .parse()
                        .map_err(|_| Error::UnregisteredPrimitive(part.to_string()))?;
                    (c, n.trim())
                }
                None => match part.parse::<f64>() {
                    Ok(c) => (c, Term::Constant.name()),
                    Err(_) => (1.0, part),
                },
            };
            terms.push((coef, name.parse()?));
        }
        Ok(Self { terms })
    }

    /// The stage-2 objective for the given switches.
    pub fn objective(weights: &LossWeights, lambda_tri: f64, use_cai: bool, use_fa: bool, use_cfa: bool) -> Self {
        let mut terms = vec![(1.0, Term::IdV), (1.0, Term::IdI)];
        terms.push((weights.lambda_cai, if use_cai { Term::Cai } else { Term::SharedSoftCe }));
        if use_cfa {
            terms.push((weights.lambda_fa, Term::Cfa));
        } else if use_fa {
            terms.push((weights.lambda_fa, Term::Fa));
        }
        terms.push((lambda_tri, Term::Triplet));
        Self { terms }
    }

    /// The single-modality stage objective.
    pub fn stage1(lambda_tri: f64) -> Self {
        Self {
            terms: vec![(1.0, Term::IdV), (1.0, Term::IdI), (lambda_tri, Term::TripletModal)],
        }
    }

    fn needs_aug(&self) -> bool {
        self.terms.iter().any(|(_, t)| t.needs_aug())
    }
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (c, t)) in self.terms.iter().enumerate() {
            if i > 0 {
                write!(f, " + ")?;
            }
            write!(f, "{c}*{}", t.name())?;
        }
        Ok(())
    }
}

/// One batch of encoder inputs with per-sample supervision.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradBatch {
    pub inputs: Vec<Vec<f64>>,
    /// Index-aligned augmented inputs, when any term needs them.
    pub aug_inputs: Option<Vec<Vec<f64>>>,
    pub modality: Vec<Modality>,
    /// Labels in the sample's own modality bank; `None` skips the id terms.
    pub single_labels: Vec<Option<usize>>,
    /// Labels for the triplet term; `None` excludes the sample.
    pub unified_labels: Vec<Option<usize>>,
    /// Soft targets over the rows of the backdoor banks (or the soft-CE bank);
    /// `None` contributes zero.
    pub targets: Vec<Option<RefinedLabel>>,
}

impl GradBatch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let n = self.inputs.len();
        for len in [
            self.modality.len(),
            self.single_labels.len(),
            self.unified_labels.len(),
            self.targets.len(),
        ] {
            if len != n {
                return Err(Error::LengthMismatch { left: n, right: len });
            }
        }
        if let Some(aug) = &self.aug_inputs {
            if aug.len() != n {
                return Err(Error::LengthMismatch { left: n, right: aug.len() });
            }
        }
        Ok(())
    }
}

/// Memories and constants the terms read.
#[derive(Debug, Clone, Copy)]
pub struct LossContext<'a> {
    pub bank_v: Option<&'a MemoryBank>,
    pub bank_i: Option<&'a MemoryBank>,
    /// Visible and infrared memories over one shared label space.
    pub cai_banks: Option<[&'a MemoryBank; 2]>,
    pub priors: [f64; 2],
    pub soft_bank: Option<&'a MemoryBank>,
    pub sigma: f64,
    pub margin: f64,
    pub bandwidth: Bandwidth,
    /// Value of [`Term::Constant`] per unit coefficient.
    pub constant: f64,
}

impl Default for LossContext<'_> {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            bank_v: None,
            bank_i: None,
            cai_banks: None,
            priors: [0.5, 0.5],
            soft_bank: None,
            sigma: w.sigma,
            margin: w.margin,
            bandwidth: Bandwidth::Median,
            constant: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradResult {
    pub loss: f64,
    pub grads: ParamSet,
    /// Unweighted sub-losses, for reporting.
    pub terms: LossTerms,
    /// Features of the original inputs at these parameters.
    pub features: Vec<Vec<f64>>,
}

/// Loss and feature-space gradients for one batch.
struct FeatureGrads {
    loss: f64,
    terms: LossTerms,
    g: Vec<Vec<f64>>,
    g_aug: Vec<Vec<f64>>,
    g_raw: Vec<Vec<f64>>,
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

fn missing(modality: Modality) -> Error {
    match modality {
        Modality::Visible => Error::MissingContext("bank_v"),
        Modality::Infrared => Error::MissingContext("bank_i"),
    }
}

/// Evaluates the weighted terms on forward results. `fwd_aug` is empty when
/// no term needs augmented inputs.
fn feature_grads(spec: &LossSpec, batch: &GradBatch, ctx: &LossContext, fwd: &[Forward], fwd_aug: &[Forward]) -> Result<FeatureGrads> {
    let n = batch.len();
    let d = fwd.first().map_or(0, |f| f.feature.len());
    let mut out = FeatureGrads {
        loss: 0.0,
        terms: LossTerms::default(),
        g: vec![vec![0.0; d]; n],
        g_aug: vec![vec![0.0; d]; fwd_aug.len()],
        g_raw: vec![vec![0.0; d]; n],
    };
    for &(coef, term) in &spec.terms {
        let value = match term {
            Term::Constant => ctx.constant,
            Term::SquaredNorm => {
                let mut v = 0.0;
                for (i, f) in fwd.iter().enumerate() {
                    v += f.raw.iter().map(|r| r * r).sum::<f64>();
                    add_into(&mut out.g_raw[i], &f.raw, 2.0 * coef);
                }
                v
            }
            Term::IdV | Term::IdI => {
                let modality = if term == Term::IdV { Modality::Visible } else { Modality::Infrared };
                let idx: Vec<usize> = (0..n)
                    .filter(|&i| batch.modality[i] == modality && batch.single_labels[i].is_some())
                    .collect();
                let mut v = 0.0;
                if !idx.is_empty() {
                    let bank = match modality {
                        Modality::Visible => ctx.bank_v,
                        Modality::Infrared => ctx.bank_i,
                    }
                    .ok_or_else(|| missing(modality))?;
                    let scale = 1.0 / idx.len() as f64;
                    for i in idx {
                        let label = batch.single_labels[i].expect("filtered");
                        let (l, g) = id_loss_grad(&fwd[i].feature, bank, label, ctx.sigma)?;
                        v += scale * l;
                        add_into(&mut out.g[i], &g, coef * scale);
                    }
                }
                if term == Term::IdV {
                    out.terms.id_v = v;
                } else {
                    out.terms.id_i = v;
                }
                v
            }
            Term::Cai | Term::SharedSoftCe => {
                let scale = 1.0 / n.max(1) as f64;
                let mut v = 0.0;
                for i in 0..n {
                    let Some(t) = &batch.targets[i] else { continue };
                    let (l, g, ga) = if term == Term::Cai {
                        let banks = ctx.cai_banks.ok_or(Error::MissingContext("cai_banks"))?;
                        cai_loss_soft_grad(&fwd[i].feature, &fwd_aug[i].feature, banks, ctx.priors, (&t.probs, &t.probs_aug), ctx.sigma)?
                    } else {
                        let bank = ctx.soft_bank.ok_or(Error::MissingContext("soft_bank"))?;
                        let (l1, g1) = soft_ce_grad(&fwd[i].feature, bank, &t.probs, ctx.sigma)?;
                        let (l2, g2) = soft_ce_grad(&fwd_aug[i].feature, bank, &t.probs_aug, ctx.sigma)?;
                        (l1 + l2, g1, g2)
                    };
                    v += scale * l;
                    add_into(&mut out.g[i], &g, coef * scale);
                    add_into(&mut out.g_aug[i], &ga, coef * scale);
                }
                out.terms.cai = v;
                v
            }
            Term::Fa => {
                let mut v = 0.0;
                for modality in Modality::ALL {
                    let idx: Vec<usize> = (0..n).filter(|&i| batch.modality[i] == modality).collect();
                    if idx.is_empty() {
                        continue;
                    }
                    let x: Vec<Vec<f64>> = idx.iter().map(|&i| fwd[i].feature.clone()).collect();
                    let y: Vec<Vec<f64>> = idx.iter().map(|&i| fwd_aug[i].feature.clone()).collect();
                    let m = mmd2_grad(&x, &y, ctx.bandwidth)?;
                    v += m.value;
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut out.g[i], &m.grad_x[k], coef);
                        add_into(&mut out.g_aug[i], &m.grad_y[k], coef);
                    }
                }
                out.terms.fa = v;
                v
            }
            Term::Cfa => {
                let vis: Vec<usize> = (0..n).filter(|&i| batch.modality[i] == Modality::Visible).collect();
                let ir: Vec<usize> = (0..n).filter(|&i| batch.modality[i] == Modality::Infrared).collect();
                let mut v = 0.0;
                if !vis.is_empty() && !ir.is_empty() {
                    let x: Vec<Vec<f64>> = vis.iter().map(|&i| fwd[i].feature.clone()).collect();
                    let y: Vec<Vec<f64>> = ir.iter().map(|&i| fwd[i].feature.clone()).collect();
                    let m = mmd2_grad(&x, &y, ctx.bandwidth)?;
                    v = m.value;
                    for (k, &i) in vis.iter().enumerate() {
                        add_into(&mut out.g[i], &m.grad_x[k], coef);
                    }
                    for (k, &i) in ir.iter().enumerate() {
                        add_into(&mut out.g[i], &m.grad_y[k], coef);
                    }
                }
                out.terms.fa = v;
                v
            }
            Term::Triplet | Term::TripletModal => {
                let groups: Vec<Vec<usize>> = if term == Term::Triplet {
                    vec![(0..n).filter(|&i| batch.unified_labels[i].is_some()).collect()]
                } else {
                    Modality::ALL
                        .iter()
                        .map(|&m| (0..n).filter(|&i| batch.modality[i] == m && batch.single_labels[i].is_some()).collect())
                        .collect()
                };
                let mut parts = Vec::new();
                for idx in &groups {
                    let labels: Vec<usize> = idx
                        .iter()
                        .map(|&i| {
                            if term == Term::Triplet {
                                batch.unified_labels[i].expect("filtered")
                            } else {
                                batch.single_labels[i].expect("filtered")
                            }
                        })
                        .collect();
                    let feats: Vec<Vec<f64>> = idx.iter().map(|&i| fwd[i].feature.clone()).collect();
                    // a batch without any valid anchor contributes nothing
                    match triplet_loss_grad(&feats, &labels, ctx.margin) {
                        Ok(r) => parts.push((idx, r)),
                        Err(Error::DegenerateBatch) => {}
                        Err(e) => return Err(e),
                    }
                }
                let mut v = 0.0;
                if !parts.is_empty() {
                    let scale = 1.0 / parts.len() as f64;
                    for (idx, (l, g)) in parts {
                        v += scale * l;
                        for (k, &i) in idx.iter().enumerate() {
                            add_into(&mut out.g[i], &g[k], coef * scale);
                        }
                    }
                }
                out.terms.tri = v;
                v
            }
        };
        out.loss += coef * value;
    }
    if !out.loss.is_finite() {
        return Err(Error::NonFiniteLoss(out.loss));
    }
    Ok(out)
}

fn forward_all(params: &ParamSet, inputs: &[Vec<f64>]) -> Result<Vec<Forward>> {
    inputs.iter().map(|x| params.forward(x)).collect()
}

fn forwards(spec: &LossSpec, params: &ParamSet, batch: &GradBatch) -> Result<(Vec<Forward>, Vec<Forward>)> {
    batch.validate()?;
    let fwd = forward_all(params, &batch.inputs)?;
    let fwd_aug = if spec.needs_aug() {
        let aug = batch.aug_inputs.as_ref().ok_or(Error::MissingContext("aug_inputs"))?;
        forward_all(params, aug)?
    } else {
        Vec::new()
    };
    Ok((fwd, fwd_aug))
}

/// Loss value only.
pub fn evaluate(spec: &LossSpec, params: &ParamSet, batch: &GradBatch, ctx: &LossContext) -> Result<f64> {
    let (fwd, fwd_aug) = forwards(spec, params, batch)?;
    Ok(feature_grads(spec, batch, ctx, &fwd, &fwd_aug)?.loss)
}

/// Loss value and its exact gradient for every parameter tensor.
pub fn evaluate_with_grad(spec: &LossSpec, params: &ParamSet, batch: &GradBatch, ctx: &LossContext) -> Result<GradResult> {
    let (fwd, fwd_aug) = forwards(spec, params, batch)?;
    let fg = feature_grads(spec, batch, ctx, &fwd, &fwd_aug)?;
    let mut grads = params.zeros_like();
    for (i, f) in fwd.iter().enumerate() {
        params.backward(&batch.inputs[i], f, Some(&fg.g[i]), Some(&fg.g_raw[i]), &mut grads);
    }
    if let Some(aug) = &batch.aug_inputs {
        for (i, f) in fwd_aug.iter().enumerate() {
            params.backward(&aug[i], f, Some(&fg.g_aug[i]), None, &mut grads);
        }
    }
    if !grads.is_finite() {
        return Err(Error::NonFiniteLoss(fg.loss));
    }
    Ok(GradResult {
        loss: fg.loss,
        grads,
        terms: fg.terms,
        features: fwd.into_iter().map(|f| f.feature).collect(),
    })
}

/// Central differences over every scalar parameter. Returns the largest
/// relative error `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check(spec: &LossSpec, params: &ParamSet, batch: &GradBatch, ctx: &LossContext, step: f64) -> Result<f64> {
    let analytic = evaluate_with_grad(spec, params, batch, ctx)?.grads;
    let mut p = params.clone();
    let mut worst = 0.0f64;
    for k in 0..p.num_scalars() {
        let orig = p.scalar(k);
        *p.scalar_mut(k) = orig + step;
        let plus = evaluate(spec, &p, batch, ctx)?;
        *p.scalar_mut(k) = orig - step;
        let minus = evaluate(spec, &p, batch, ctx)?;
        *p.scalar_mut(k) = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.scalar(k);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Name, worst relative error over the sampled points, and point count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub term: String,
    pub max_rel_error: f64,
    pub points: usize,
}

/// A random problem small enough for exhaustive finite differences: eight
/// samples, two identities per modality, three-row memories.
pub fn random_problem(seed: u64) -> Result<(ParamSet, GradBatch, [MemoryBank; 4])> {
    use crate::encoder::EncoderConfig;
    use crate::linalg::l2_normalize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EncoderConfig {
        input_dim: 6,
        feature_dim: 4,
        hidden_dim: 5,
        depth: 1 + (seed % 2) as usize,
        bias: true,
    };
    let params = ParamSet::init(cfg, &mut rng)?;
    let unit = |rng: &mut ChaCha8Rng| l2_normalize(&(0..4).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>());
    let mut banks = Vec::new();
    for _ in 0..4 {
        let rows = (0..3).map(|_| unit(&mut rng)).collect::<Result<Vec<_>>>()?;
        banks.push(MemoryBank::dense(&rows)?);
    }
    let n = 8;
    let sample = |rng: &mut ChaCha8Rng| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let inputs: Vec<Vec<f64>> = (0..n).map(|_| sample(&mut rng)).collect();
    let aug_inputs: Vec<Vec<f64>> = inputs
        .iter()
        .map(|x| x.iter().map(|v| v + rng.random_range(-0.3..0.3)).collect())
        .collect();
    let modality = (0..n).map(|i| if i < n / 2 { Modality::Visible } else { Modality::Infrared }).collect();
    let single_labels = (0..n).map(|i| Some((i / 2) % 3)).collect();
    let unified_labels = (0..n).map(|i| Some(i % 2)).collect();
    let dist = |rng: &mut ChaCha8Rng| {
        let raw: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect::<Vec<f64>>()
    };
    let targets = (0..n)
        .map(|_| {
            Some(RefinedLabel {
                probs: dist(&mut rng),
                probs_aug: dist(&mut rng),
            })
        })
        .collect();
    let batch = GradBatch {
        inputs,
        aug_inputs: Some(aug_inputs),
        modality,
        single_labels,
        unified_labels,
        targets,
    };
    let banks: [MemoryBank; 4] = banks.try_into().expect("four banks");
    Ok((params, batch, banks))
}

/// Minimum separation from a kink required of suite points.
pub const GENERIC_GAP: f64 = 1e-3;

fn median_gap(points: &[Vec<f64>]) -> f64 {
    use crate::linalg::sq_dist;
    let mut d: Vec<f64> = Vec::new();
    for p in 0..points.len() {
        for q in p + 1..points.len() {
            d.push(sq_dist(&points[p], &points[q]));
        }
    }
    d.sort_by(f64::total_cmp);
    let len = d.len();
    let (lo, hi) = if len % 2 == 1 { (len / 2, len / 2) } else { (len / 2 - 1, len / 2) };
    let below = if lo > 0 { d[lo] - d[lo - 1] } else { f64::INFINITY };
    let above = if hi + 1 < len { d[hi + 1] - d[hi] } else { f64::INFINITY };
    below.min(above)
}

fn triplet_gap(feats: &[Vec<f64>], labels: &[usize], margin: f64) -> f64 {
    use crate::linalg::dot;
    let mut gap = f64::INFINITY;
    for a in 0..feats.len() {
        let mut pos: Vec<f64> = Vec::new();
        let mut neg: Vec<f64> = Vec::new();
        for j in 0..feats.len() {
            if j == a {
                continue;
            }
            let s = dot(&feats[a], &feats[j]);
            if labels[j] == labels[a] {
                pos.push(s);
            } else {
                neg.push(s);
            }
        }
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        pos.sort_by(f64::total_cmp);
        neg.sort_by(|x, y| y.total_cmp(x));
        if pos.len() > 1 {
            gap = gap.min(pos[1] - pos[0]);
        }
        if neg.len() > 1 {
            gap = gap.min(neg[0] - neg[1]);
        }
        gap = gap.min((margin - (pos[0] - neg[0])).abs());
    }
    gap
}

/// True when the point sits at least `gap` away from the non-smooth set of
/// the median bandwidth and the batch-hard hinge, so central differences see
/// a smooth function.
pub fn is_generic(params: &ParamSet, batch: &GradBatch, margin: f64, gap: f64) -> Result<bool> {
    let fwd: Vec<Vec<f64>> = forward_all(params, &batch.inputs)?.into_iter().map(|f| f.feature).collect();
    if let Some(aug) = &batch.aug_inputs {
        let fa: Vec<Vec<f64>> = forward_all(params, aug)?.into_iter().map(|f| f.feature).collect();
        for m in Modality::ALL {
            let idx: Vec<usize> = (0..batch.len()).filter(|&i| batch.modality[i] == m).collect();
            let pooled: Vec<Vec<f64>> = idx.iter().map(|&i| fwd[i].clone()).chain(idx.iter().map(|&i| fa[i].clone())).collect();
            if pooled.len() > 2 && median_gap(&pooled) < gap {
                return Ok(false);
            }
        }
    }
    if fwd.len() > 2 && median_gap(&fwd) < gap {
        return Ok(false);
    }
    let idx: Vec<usize> = (0..batch.len()).filter(|&i| batch.unified_labels[i].is_some()).collect();
    let feats: Vec<Vec<f64>> = idx.iter().map(|&i| fwd[i].clone()).collect();
    let labels: Vec<usize> = idx.iter().map(|&i| batch.unified_labels[i].expect("filtered")).collect();
    Ok(triplet_gap(&feats, &labels, margin) >= gap)
}

/// Finite-difference check of every objective term and the full composite
/// at `points` random problems.
pub fn gradient_suite(points: usize, seed: u64, step: f64) -> Result<Vec<SuiteResult>> {
    let w = LossWeights::default();
    let specs: Vec<(&str, LossSpec)> = vec![
        ("id", LossSpec::parse("id_v + id_i")?),
        ("cai", LossSpec::single(Term::Cai)),
        ("soft_ce", LossSpec::single(Term::SharedSoftCe)),
        ("fa", LossSpec::single(Term::Fa)),
        ("cfa", LossSpec::single(Term::Cfa)),
        ("tri", LossSpec::single(Term::Triplet)),
        ("composite", LossSpec::objective(&w, 0.5, true, true, false)),
    ];
    let mut out: Vec<SuiteResult> = specs
        .iter()
        .map(|(name, _)| SuiteResult {
            term: name.to_string(),
            max_rel_error: 0.0,
            points,
        })
        .collect();
    let mut next = seed;
    for _ in 0..points {
        let (params, batch, banks) = loop {
            let problem = random_problem(next)?;
            next = next.wrapping_add(1);
            if is_generic(&problem.0, &problem.1, w.margin, GENERIC_GAP)? {
                break problem;
            }
        };
        let ctx = LossContext {
            bank_v: Some(&banks[0]),
            bank_i: Some(&banks[1]),
            cai_banks: Some([&banks[2], &banks[3]]),
            priors: [0.5, 0.5],
            soft_bank: Some(&banks[2]),
            sigma: w.sigma,
            margin: w.margin,
            ..LossContext::default()
        };
        for ((_, spec), r) in specs.iter().zip(out.iter_mut()) {
            let e = finite_diff_check(spec, &params, &batch, &ctx, step)?;
            r.max_rel_error = r.max_rel_error.max(e);
        }
    }
    Ok(out)
}
