//! Multi-seed comparison of ablation variants with per-variant medians.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::trainer::{run, RunSummary, TrainConfig, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub summary: RunSummary,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantMedians {
    pub rank1_i2v: f64,
    pub map_i2v: f64,
    pub minp_i2v: f64,
    pub rank1_v2i: f64,
    pub final_homogeneity: f64,
    pub tail_homogeneity: f64,
    pub palette_errors: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub name: String,
    pub median: VariantMedians,
    pub runs: Vec<SeedRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantResult>,
}

impl AblationReport {
    pub fn get(&self, v: Variant) -> Option<&VariantResult> {
        self.variants.iter().find(|r| r.variant == v)
    }
}

/// Median, averaging the two middle values for even counts.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::TooFewSamples(0));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    Ok(if s.len() % 2 == 1 { s[m] } else { 0.5 * (s[m - 1] + s[m]) })
}

fn medians(runs: &[SeedRun]) -> Result<VariantMedians> {
    let of = |f: &dyn Fn(&RunSummary) -> f64| median(&runs.iter().map(|r| f(&r.summary)).collect::<Vec<_>>());
    Ok(VariantMedians {
        rank1_i2v: of(&|s| s.i2v.rank1)?,
        map_i2v: of(&|s| s.i2v.map)?,
        minp_i2v: of(&|s| s.i2v.minp)?,
        rank1_v2i: of(&|s| s.v2i.rank1)?,
        final_homogeneity: of(&|s| s.final_homogeneity)?,
        tail_homogeneity: of(&|s| s.tail_homogeneity)?,
        palette_errors: of(&|s| s.palette_i2v.palette_errors as f64)?,
    })
}

/// Trains every variant with every seed on top of `base`. `on_run` sees each
/// finished run.
pub fn ablate(
    base: &TrainConfig,
    dataset: &Dataset,
    palette_count: usize,
    variants: &[Variant],
    seeds: &[u64],
    mut on_run: impl FnMut(Variant, &SeedRun),
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut out = Vec::with_capacity(variants.len());
    for &v in variants {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = TrainConfig { seed, ..base.clone() }.with_variant(v);
            let t = Instant::now();
            let summary = run(&cfg, dataset, palette_count, |_| Ok(()))?.summary;
            let r = SeedRun {
                seed,
                summary,
                seconds: t.elapsed().as_secs_f64(),
            };
            on_run(v, &r);
            runs.push(r);
        }
        out.push(VariantResult {
            variant: v,
            name: v.name().to_string(),
            median: medians(&runs)?,
            runs,
        });
    }
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        variants: out,
    })
}
