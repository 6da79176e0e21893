//! Two-stage training: single-modality clustering epochs, then cross-modality
//! epochs with cluster matching, backdoor classification and bias-free
//! training, switchable per ablation variant.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use log::{info, warn};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_modality, default_colormaps, standard_augment, Colormap};
use crate::cluster::{build_memory, build_memory_from_labels, camera_embedding, dbscan, MemoryBank, PseudoLabeling};
use crate::data::{modality_priors, Dataset, Modality, SynthImage};
use crate::encoder::{EncoderConfig, ParamSet};
use crate::error::{Error, Result};
use crate::eval::{embed_all, evaluate, palette_confusion, Direction, PaletteConfusion, RetrievalMetrics};
use crate::grad::{evaluate_with_grad, GradBatch, LossContext, LossSpec};
use crate::linalg::Matrix;
use crate::losses::{lambda_tri, Bandwidth, LossTerms, LossWeights};
use crate::matching::{adjusted_rand, alternate_mode, homogeneity, imca_match, unify, MatchMode};
use crate::optim::{adam_step, step_decay_lr, AdamConfig, AdamState};
use crate::refine::{gmm_certainty, one_hot, per_sample_losses, predict_shared, refine_labels, update_memory};

/// Which labels supervise the per-modality id terms in the second stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IdLabels {
    /// Each modality's own cluster labels against its cluster memory.
    Single,
    /// Matched labels against per-modality memories over the matched space.
    Unified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Identities per modality in a batch.
    pub p: usize,
    /// Instances per identity.
    pub k: usize,
    pub lr: f64,
    pub lr_decay_every: usize,
    pub sigma: f64,
    pub lambda_cai: f64,
    pub lambda_fa: f64,
    pub eta: f64,
    pub margin: f64,
    pub eps: f64,
    pub min_pts: usize,
    pub use_cai: bool,
    pub use_aug: bool,
    pub use_label_refine: bool,
    pub use_fa: bool,
    pub use_camera: bool,
    pub use_cfa_ablation: bool,
    pub stage2_id_labels: IdLabels,
    /// Evaluate every this many epochs; 0 evaluates only at the end.
    pub eval_interval: usize,
    pub encoder: EncoderConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 10,
            stage2_epochs: 20,
            p: 4,
            k: 4,
            lr: 3.5e-4,
            lr_decay_every: 20,
            sigma: 0.05,
            lambda_cai: 0.5,
            lambda_fa: 1.0,
            eta: 0.2,
            margin: 0.3,
            eps: 0.06,
            min_pts: 4,
            use_cai: true,
            use_aug: true,
            use_label_refine: true,
            use_fa: true,
            use_camera: false,
            use_cfa_ablation: false,
            stage2_id_labels: IdLabels::Single,
            eval_interval: 0,
            encoder: EncoderConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.p == 0 || self.k < 2 {
            return bad("p must be >= 1 and k >= 2");
        }
        if self.min_pts == 0 {
            return bad("min_pts must be >= 1");
        }
        if !(self.sigma > 0.0) {
            return bad("sigma must be positive");
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad("eta must lie in (0, 1]");
        }
        if !(self.eps > 0.0) || !(self.lr > 0.0) {
            return bad("eps and lr must be positive");
        }
        if self.lambda_cai < 0.0 || self.lambda_fa < 0.0 || self.margin < 0.0 {
            return bad("loss weights and margin must be non-negative");
        }
        if self.lr_decay_every == 0 {
            return bad("lr_decay_every must be >= 1");
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_cai: self.lambda_cai,
            lambda_fa: self.lambda_fa,
            sigma: self.sigma,
            margin: self.margin,
        }
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        v.apply(&mut self);
        self
    }
}

/// Ablation rows: which of the backdoor loss and the three bias-free
/// training parts are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    Baseline,
    Cai,
    CaiAug,
    CaiAugLabel,
    CaiAugFa,
    CbtOnly,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Baseline,
        Variant::Cai,
        Variant::CaiAug,
        Variant::CaiAugLabel,
        Variant::CaiAugFa,
        Variant::CbtOnly,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Cai => "cai",
            Variant::CaiAug => "cai+aug",
            Variant::CaiAugLabel => "cai+aug+label",
            Variant::CaiAugFa => "cai+aug+fa",
            Variant::CbtOnly => "cbt-only",
            Variant::Full => "full",
        }
    }

    /// `(use_cai, use_aug, use_label_refine, use_fa)`
    pub fn flags(self) -> (bool, bool, bool, bool) {
        match self {
            Variant::Baseline => (false, false, false, false),
            Variant::Cai => (true, false, false, false),
            Variant::CaiAug => (true, true, false, false),
            Variant::CaiAugLabel => (true, true, true, false),
            Variant::CaiAugFa => (true, true, false, true),
            Variant::CbtOnly => (false, true, true, true),
            Variant::Full => (true, true, true, true),
        }
    }

    pub fn apply(self, cfg: &mut TrainConfig) {
        let (cai, aug, label, fa) = self.flags();
        cfg.use_cai = cai;
        cfg.use_aug = aug;
        cfg.use_label_refine = label;
        cfg.use_fa = fa;
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub stage: u8,
    pub loss_id_v: f64,
    pub loss_id_i: f64,
    pub loss_cai: f64,
    pub loss_fa: f64,
    pub loss_tri: f64,
    pub clusters_v: usize,
    pub clusters_i: usize,
    pub imca_mode: Option<MatchMode>,
    pub homogeneity: f64,
    pub ari: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rank1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub map: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub minp: Option<f64>,
    /// No training happened because a modality produced no clusters.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub skipped: bool,
    /// Every cluster matched onto the same target.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub match_collapse: bool,
}

impl EpochReport {
    /// A report with zeroed metrics for the given epoch and stage.
    pub fn empty(epoch: usize, stage: u8) -> Self {
        Self {
            epoch,
            stage,
            loss_id_v: 0.0,
            loss_id_i: 0.0,
            loss_cai: 0.0,
            loss_fa: 0.0,
            loss_tri: 0.0,
            clusters_v: 0,
            clusters_i: 0,
            imca_mode: None,
            homogeneity: 0.0,
            ari: 0.0,
            rank1: None,
            map: None,
            minp: None,
            skipped: false,
            match_collapse: false,
        }
    }

    fn set_losses(&mut self, t: &LossTerms) {
        self.loss_id_v = t.id_v;
        self.loss_id_i = t.id_i;
        self.loss_cai = t.cai;
        self.loss_fa = t.fa;
        self.loss_tri = t.tri;
    }
}

/// Final evaluation of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub i2v: RetrievalMetrics,
    pub v2i: RetrievalMetrics,
    pub palette_i2v: PaletteConfusion,
    pub final_homogeneity: f64,
    pub final_ari: f64,
    /// Mean homogeneity over the last five cross-modality epochs.
    pub tail_homogeneity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub reports: Vec<EpochReport>,
    pub summary: RunSummary,
    pub params: ParamSet,
}

/// Per-modality view of the training split.
struct ModalData<'a> {
    images: Vec<&'a SynthImage>,
    cameras: Vec<usize>,
    identities: Vec<usize>,
}

/// Clustering outcome of one modality for one epoch.
struct ModalClusters {
    features: Matrix,
    labeling: PseudoLabeling,
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    dataset: &'a Dataset,
    palette_count: usize,
    params: ParamSet,
    adam: AdamState,
    rng: ChaCha8Rng,
    eps: [f64; 2],
    modal: [ModalData<'a>; 2],
    priors: [f64; 2],
    maps: Vec<Colormap>,
    epoch: usize,
}

fn running_mean(acc: &mut LossTerms, t: &LossTerms, n: usize) {
    let k = 1.0 / n as f64;
    acc.id_v += t.id_v * k;
    acc.id_i += t.id_i * k;
    acc.cai += t.cai * k;
    acc.fa += t.fa * k;
    acc.tri += t.tri * k;
}

/// `k` draws from `pool`: without replacement when it is large enough.
fn draw<R: Rng>(rng: &mut R, pool: &[usize], k: usize) -> Vec<usize> {
    if pool.len() >= k {
        sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
    } else {
        (0..k).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}

fn present(labels: &[Option<usize>]) -> BTreeSet<usize> {
    labels.iter().flatten().copied().collect()
}

fn keep_in(labels: &[Option<usize>], space: &BTreeSet<usize>) -> Vec<Option<usize>> {
    labels.iter().map(|l| l.filter(|k| space.contains(k))).collect()
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, dataset: &'a Dataset, palette_count: usize) -> Result<Self> {
        cfg.validate()?;
        let modal = Modality::ALL.map(|m| {
            let images: Vec<&SynthImage> = dataset.train_indices(m).into_iter().map(|i| &dataset.images[i]).collect();
            ModalData {
                cameras: images.iter().map(|i| i.camera).collect(),
                identities: images.iter().map(|i| i.identity).collect(),
                images,
            }
        });
        if modal.iter().any(|m| m.images.is_empty()) {
            return Err(Error::EmptySplit("train"));
        }
        let input_dim = modal[0].images[0].pixels.len();
        if cfg.encoder.input_dim != input_dim {
            return Err(Error::Config(format!(
                "encoder.input_dim is {} but images flatten to {input_dim}",
                cfg.encoder.input_dim
            )));
        }
        let (pv, pi) = modality_priors(dataset)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = ParamSet::init(cfg.encoder, &mut rng)?;
        let adam = AdamState::new(&params);
        Ok(Self {
            eps: [cfg.eps; 2],
            cfg,
            dataset,
            palette_count,
            params,
            adam,
            rng,
            modal,
            priors: [pv, pi],
            maps: default_colormaps(),
            epoch: 0,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    fn lr(&self) -> f64 {
        step_decay_lr(self.cfg.lr, self.epoch, self.cfg.lr_decay_every)
    }

    fn extract(&self, m: Modality) -> Result<Matrix> {
        let f = embed_all(&self.params, &self.modal[m.index()].images)?;
        Matrix::from_rows(&f)
    }

    fn cluster(&self, m: Modality) -> Result<ModalClusters> {
        let features = self.extract(m)?;
        let eps = self.eps[m.index()];
        let labeling = if self.cfg.use_camera {
            let emb = camera_embedding(&features, &self.modal[m.index()].cameras, eps, self.cfg.min_pts, self.cfg.sigma)?;
            dbscan(&emb.normalized()?, eps, self.cfg.min_pts)
        } else {
            dbscan(&features, eps, self.cfg.min_pts)
        };
        Ok(ModalClusters { features, labeling })
    }

    /// Clusters both modalities; relaxes eps and reports the modality that
    /// came up empty.
    fn cluster_both(&mut self) -> Result<std::result::Result<[ModalClusters; 2], Error>> {
        let v = self.cluster(Modality::Visible)?;
        let i = self.cluster(Modality::Infrared)?;
        let mut failed = None;
        for (m, c) in [(Modality::Visible, &v), (Modality::Infrared, &i)] {
            if c.labeling.num_clusters == 0 {
                self.eps[m.index()] *= 1.1;
                failed.get_or_insert(Error::NoClustersInModality(m.name()));
            }
        }
        Ok(match failed {
            Some(e) => Err(e),
            None => Ok([v, i]),
        })
    }

    fn input(&mut self, img: &SynthImage) -> (SynthImage, Vec<f64>) {
        let x = standard_augment(img, &mut self.rng);
        let flat = x.flatten();
        (x, flat)
    }

    fn labels_of(c: &ModalClusters) -> &[Option<usize>] {
        &c.labeling.labels
    }

    fn label_quality(&self, v: &[Option<usize>], i: &[Option<usize>]) -> Result<(f64, f64)> {
        let pred: Vec<Option<usize>> = v.iter().chain(i).copied().collect();
        let truth: Vec<usize> = self.modal[0].identities.iter().chain(&self.modal[1].identities).copied().collect();
        Ok((homogeneity(&pred, &truth)?, adjusted_rand(&pred, &truth)?))
    }

    fn iterations(&self) -> usize {
        let n = self.modal[0].images.len() + self.modal[1].images.len();
        n.div_ceil(2 * self.cfg.p * self.cfg.k)
    }

    fn step(&mut self, spec: &LossSpec, batch: &GradBatch, ctx: &LossContext) -> Result<(LossTerms, Vec<Vec<f64>>)> {
        let r = evaluate_with_grad(spec, &self.params, batch, ctx)?;
        let lr = self.lr();
        adam_step(&mut self.params, &r.grads, &mut self.adam, AdamConfig::with_lr(lr));
        if !self.params.is_finite() {
            return Err(Error::NonFiniteLoss(r.loss));
        }
        Ok((r.terms, r.features))
    }

    /// Single-modality epoch `e` of the first stage.
    pub fn stage1_epoch(&mut self, e: usize) -> Result<EpochReport> {
        let mut report = EpochReport::empty(self.epoch, 1);
        let clusters = match self.cluster_both()? {
            Ok(c) => c,
            Err(err) => {
                warn!("epoch {}: {err}; skipped", self.epoch);
                report.skipped = true;
                return Ok(report);
            }
        };
        report.clusters_v = clusters[0].labeling.num_clusters;
        report.clusters_i = clusters[1].labeling.num_clusters;
        let mut banks = [build_memory(&clusters[0].features, &clusters[0].labeling)?, build_memory(&clusters[1].features, &clusters[1].labeling)?];
        let members: [Vec<Vec<usize>>; 2] = [clusters[0].labeling.members(), clusters[1].labeling.members()];

        let spec = LossSpec::stage1(lambda_tri(e, self.cfg.stage1_epochs));
        let iters = self.iterations();
        let mut acc = LossTerms::default();
        for _ in 0..iters {
            let mut batch = GradBatch::default();
            for m in Modality::ALL {
                let groups = &members[m.index()];
                let all: Vec<usize> = (0..groups.len()).collect();
                for c in draw(&mut self.rng, &all, self.cfg.p.min(groups.len())) {
                    for s in draw(&mut self.rng, &groups[c], self.cfg.k) {
                        let img = self.modal[m.index()].images[s];
                        let (_, flat) = self.input(img);
                        batch.inputs.push(flat);
                        batch.modality.push(m);
                        batch.single_labels.push(Some(c));
                        batch.unified_labels.push(None);
                        batch.targets.push(None);
                    }
                }
            }
            let ctx = LossContext {
                bank_v: Some(&banks[0]),
                bank_i: Some(&banks[1]),
                sigma: self.cfg.sigma,
                margin: self.cfg.margin,
                ..LossContext::default()
            };
            let (terms, feats) = self.step(&spec, &batch, &ctx)?;
            running_mean(&mut acc, &terms, iters);
            for (j, f) in feats.iter().enumerate() {
                let label = batch.single_labels[j].expect("labelled");
                update_memory(&mut banks[batch.modality[j].index()], f, label, 1.0, self.cfg.eta)?;
            }
        }
        report.set_losses(&acc);
        let (h, a) = self.label_quality(Self::labels_of(&clusters[0]), &offset(Self::labels_of(&clusters[1]), report.clusters_v))?;
        report.homogeneity = h;
        report.ari = a;
        Ok(report)
    }

    /// Cross-modality epoch `e` of the second stage.
    pub fn stage2_epoch(&mut self, e: usize) -> Result<EpochReport> {
        let cfg = self.cfg.clone();
        let mut report = EpochReport::empty(self.epoch, 2);
        let clusters = match self.cluster_both()? {
            Ok(c) => c,
            Err(err) => {
                warn!("epoch {}: {err}; skipped", self.epoch);
                report.skipped = true;
                return Ok(report);
            }
        };
        report.clusters_v = clusters[0].labeling.num_clusters;
        report.clusters_i = clusters[1].labeling.num_clusters;
        let cluster_banks = [build_memory(&clusters[0].features, &clusters[0].labeling)?, build_memory(&clusters[1].features, &clusters[1].labeling)?];

        let mode = alternate_mode(e);
        report.imca_mode = Some(mode);
        let matched = imca_match(&cluster_banks[0], &cluster_banks[1], mode)?;
        if matched.collapsed() {
            warn!("epoch {}: every cluster matched onto one target", self.epoch);
            report.match_collapse = true;
        }
        let unified = unify(&matched, Self::labels_of(&clusters[0]), Self::labels_of(&clusters[1]));
        let uni = [unified.first, unified.second];

        // shared memory over both modalities
        let all_feats = Matrix::from_rows(&clusters[0].features.iter_rows().chain(clusters[1].features.iter_rows()).collect::<Vec<_>>())?;
        let all_labels: Vec<Option<usize>> = uni[0].iter().chain(&uni[1]).copied().collect();
        let mut shared = build_memory_from_labels(&all_feats, &all_labels)?;

        // labels with members in both modalities
        let both: BTreeSet<usize> = present(&uni[0]).intersection(&present(&uni[1])).copied().collect();
        let mut cai_banks: Option<[MemoryBank; 2]> = None;
        let mut soft_bank: Option<MemoryBank> = None;
        if !both.is_empty() {
            cai_banks = Some([
                build_memory_from_labels(&clusters[0].features, &keep_in(&uni[0], &both))?,
                build_memory_from_labels(&clusters[1].features, &keep_in(&uni[1], &both))?,
            ]);
            soft_bank = Some(shared.restrict(&both.iter().copied().collect::<Vec<_>>())?);
        }

        let (mut id_banks, id_labels): ([MemoryBank; 2], [Vec<Option<usize>>; 2]) = match cfg.stage2_id_labels {
            IdLabels::Single => (cluster_banks, [clusters[0].labeling.labels.clone(), clusters[1].labeling.labels.clone()]),
            IdLabels::Unified => (
                [build_memory_from_labels(&clusters[0].features, &uni[0])?, build_memory_from_labels(&clusters[1].features, &uni[1])?],
                uni.clone(),
            ),
        };

        // certainty per training sample
        let mut certainty: [Vec<f64>; 2] = [vec![1.0; uni[0].len()], vec![1.0; uni[1].len()]];
        if cfg.use_label_refine {
            let mut feats = Vec::new();
            let mut labels = Vec::new();
            let mut slots = Vec::new();
            for m in 0..2 {
                for (j, l) in uni[m].iter().enumerate() {
                    if let Some(l) = l {
                        feats.push(clusters[m].features.row(j).to_vec());
                        labels.push(*l);
                        slots.push((m, j));
                    }
                }
            }
            if feats.len() >= 2 {
                let losses = per_sample_losses(&feats, &shared, &labels, cfg.sigma)?;
                let w = gmm_certainty(&losses)?;
                for ((m, j), w) in slots.into_iter().zip(w) {
                    certainty[m][j] = w;
                }
            }
        }

        // batch sampling pools: matched labels, members per modality
        let mut pools: BTreeMap<usize, [Vec<usize>; 2]> = BTreeMap::new();
        for m in 0..2 {
            for (j, l) in uni[m].iter().enumerate() {
                if let Some(l) = l {
                    pools.entry(*l).or_default()[m].push(j);
                }
            }
        }
        let candidates: Vec<usize> = if both.len() >= 2 { both.iter().copied().collect() } else { pools.keys().copied().collect() };

        let spec = LossSpec::objective(&cfg.weights(), lambda_tri(e, cfg.stage2_epochs), cfg.use_cai, cfg.use_fa, cfg.use_cfa_ablation);
        let iters = self.iterations();
        let mut acc = LossTerms::default();
        for _ in 0..iters {
            let mut batch = GradBatch {
                aug_inputs: Some(Vec::new()),
                ..GradBatch::default()
            };
            let mut slots = Vec::new();
            let mut aug_feats = Vec::new();
            let picked = draw(&mut self.rng, &candidates, (2 * cfg.p).min(candidates.len()));
            for l in picked {
                let pool = &pools[&l];
                let half = cfg.k / 2;
                let take = match (pool[0].is_empty(), pool[1].is_empty()) {
                    (false, false) => [half, cfg.k - half],
                    (true, _) => [0, cfg.k],
                    (_, true) => [cfg.k, 0],
                };
                for (m, n) in Modality::ALL.into_iter().zip(take) {
                    if n == 0 {
                        continue;
                    }
                    for j in draw(&mut self.rng, &pool[m.index()], n) {
                        let img = self.modal[m.index()].images[j];
                        let (x, flat) = self.input(img);
                        let xa = if cfg.use_aug { augment_modality(&x, &self.maps, &mut self.rng)?.flatten() } else { flat.clone() };
                        aug_feats.push(self.params.embed(&xa)?);
                        let fx = self.params.embed(&flat)?;
                        let target = match (&soft_bank, both.contains(&l)) {
                            (Some(bank), true) => {
                                let row = bank.row_of(l).expect("label in space");
                                let px = predict_shared(&fx, bank, cfg.sigma)?;
                                let pxa = predict_shared(aug_feats.last().expect("pushed"), bank, cfg.sigma)?;
                                Some(refine_labels(&one_hot(bank.len(), row), certainty[m.index()][j], &px, &pxa)?)
                            }
                            _ => None,
                        };
                        batch.inputs.push(flat);
                        batch.aug_inputs.as_mut().expect("set").push(xa);
                        batch.modality.push(m);
                        batch.single_labels.push(id_labels[m.index()][j]);
                        batch.unified_labels.push(Some(l));
                        batch.targets.push(target);
                        slots.push((m, j));
                    }
                }
            }
            let ctx = LossContext {
                bank_v: Some(&id_banks[0]),
                bank_i: Some(&id_banks[1]),
                cai_banks: cai_banks.as_ref().map(|b| [&b[0], &b[1]]),
                priors: self.priors,
                soft_bank: soft_bank.as_ref(),
                sigma: cfg.sigma,
                margin: cfg.margin,
                bandwidth: Bandwidth::Median,
                constant: 0.0,
            };
            let (terms, feats) = self.step(&spec, &batch, &ctx)?;
            running_mean(&mut acc, &terms, iters);

            for (b, (m, j)) in slots.into_iter().enumerate() {
                let l = batch.unified_labels[b].expect("labelled");
                let w = certainty[m.index()][j];
                let row = shared.row_of(l).expect("shared holds every matched label");
                let conf = w + (1.0 - w) * predict_shared(&aug_feats[b], &shared, cfg.sigma)?[row];
                let f = &feats[b];
                update_memory(&mut shared, f, l, conf, cfg.eta)?;
                if both.contains(&l) {
                    if let Some(bank) = soft_bank.as_mut() {
                        update_memory(bank, f, l, conf, cfg.eta)?;
                    }
                    if let Some(banks) = cai_banks.as_mut() {
                        update_memory(&mut banks[m.index()], f, l, conf, cfg.eta)?;
                    }
                }
                if let Some(s) = batch.single_labels[b] {
                    update_memory(&mut id_banks[m.index()], f, s, conf, cfg.eta)?;
                }
            }
        }
        report.set_losses(&acc);
        let (h, a) = self.label_quality(&uni[0], &uni[1])?;
        report.homogeneity = h;
        report.ari = a;
        Ok(report)
    }

    fn maybe_eval(&self, report: &mut EpochReport, last: bool) -> Result<()> {
        let every = self.cfg.eval_interval;
        if last || (every > 0 && (report.epoch + 1) % every == 0) {
            let m = evaluate(&self.params, self.dataset, Direction::InfraredToVisible)?;
            report.rank1 = Some(m.rank1);
            report.map = Some(m.map);
            report.minp = Some(m.minp);
        }
        Ok(())
    }

    /// Runs both stages, calling `on_epoch` after every epoch.
    pub fn run(mut self, mut on_epoch: impl FnMut(&EpochReport) -> Result<()>) -> Result<RunOutput> {
        let total = self.cfg.stage1_epochs + self.cfg.stage2_epochs;
        let mut reports = Vec::with_capacity(total);
        for s in 0..2 {
            let len = if s == 0 { self.cfg.stage1_epochs } else { self.cfg.stage2_epochs };
            for e in 0..len {
                let mut r = if s == 0 { self.stage1_epoch(e)? } else { self.stage2_epoch(e)? };
                self.maybe_eval(&mut r, self.epoch + 1 == total)?;
                info!(
                    "epoch {} stage {} id_v {:.4} id_i {:.4} cai {:.4} fa {:.4} tri {:.4} clusters {}/{} hom {:.3}",
                    r.epoch, r.stage, r.loss_id_v, r.loss_id_i, r.loss_cai, r.loss_fa, r.loss_tri, r.clusters_v, r.clusters_i, r.homogeneity
                );
                on_epoch(&r)?;
                reports.push(r);
                self.epoch += 1;
            }
        }
        let stage2: Vec<&EpochReport> = reports.iter().filter(|r| r.stage == 2 && !r.skipped).collect();
        let tail: Vec<f64> = stage2.iter().rev().take(5).map(|r| r.homogeneity).collect();
        let last = reports.iter().rev().find(|r| !r.skipped);
        let palette_count = self.palette_count.max(1);
        let summary = RunSummary {
            i2v: evaluate(&self.params, self.dataset, Direction::InfraredToVisible)?,
            v2i: evaluate(&self.params, self.dataset, Direction::VisibleToInfrared)?,
            palette_i2v: palette_confusion(&self.params, self.dataset, Direction::InfraredToVisible, |id| id % palette_count)?,
            final_homogeneity: last.map_or(0.0, |r| r.homogeneity),
            final_ari: last.map_or(0.0, |r| r.ari),
            tail_homogeneity: if tail.is_empty() { 0.0 } else { tail.iter().sum::<f64>() / tail.len() as f64 },
        };
        Ok(RunOutput {
            reports,
            summary,
            params: self.params,
        })
    }
}

fn offset(labels: &[Option<usize>], by: usize) -> Vec<Option<usize>> {
    labels.iter().map(|l| l.map(|k| k + by)).collect()
}

/// Worker pool honouring `XMD_THREADS` (unset or 0 means automatic).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let n = match std::env::var("XMD_THREADS") {
        Ok(v) => v.trim().parse::<usize>().map_err(|_| Error::Config(format!("XMD_THREADS must be a number, got `{v}`")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Config(e.to_string()))
}

/// Trains one configuration end to end inside a [`thread_pool`].
pub fn run(cfg: &TrainConfig, dataset: &Dataset, palette_count: usize, on_epoch: impl FnMut(&EpochReport) -> Result<()> + Send) -> Result<RunOutput> {
    let pool = thread_pool()?;
    pool.install(|| Trainer::new(cfg.clone(), dataset, palette_count)?.run(on_epoch))
}
