//! DBSCAN pseudo-labels, centroid memories and camera-aware similarity
//! embeddings.

use std::collections::VecDeque;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, l2_normalize, softmax_temp, Matrix};

/// Per-sample cluster ids; `None` marks DBSCAN noise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabeling {
    pub labels: Vec<Option<usize>>,
    pub num_clusters: usize,
}

impl PseudoLabeling {
    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }

    /// Members of each cluster, in sample order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_clusters];
        for (i, l) in self.labels.iter().enumerate() {
            if let Some(k) = l {
                out[*k].push(i);
            }
        }
        out
    }
}

/// Unit-norm centroids indexed by an ascending label space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    centroids: Matrix,
    labels: Vec<usize>,
}

impl MemoryBank {
    /// `labels` must be strictly increasing; rows are re-normalized.
    pub fn new(labels: Vec<usize>, rows: &[Vec<f64>]) -> Result<Self> {
        if labels.len() != rows.len() {
            return Err(Error::LengthMismatch {
                left: labels.len(),
                right: rows.len(),
            });
        }
        if labels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::LabelSpaceMismatch("bank labels must be strictly increasing".into()));
        }
        let rows = rows.iter().map(|r| l2_normalize(r)).collect::<Result<Vec<_>>>()?;
        let centroids = if rows.is_empty() {
            Matrix::zeros(0, 0)
        } else {
            Matrix::from_rows(&rows)?
        };
        Ok(Self { centroids, labels })
    }

    /// Bank over labels `0..rows.len()`.
    pub fn dense(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new((0..rows.len()).collect(), rows)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn centroids(&self) -> &Matrix {
        &self.centroids
    }

    pub fn row_of(&self, label: usize) -> Option<usize> {
        self.labels.binary_search(&label).ok()
    }

    pub fn centroid(&self, row: usize) -> &[f64] {
        self.centroids.row(row)
    }

    pub fn centroid_mut(&mut self, row: usize) -> &mut [f64] {
        self.centroids.row_mut(row)
    }

    /// `<f, m_k>` for every row.
    pub fn scores(&self, f: &[f64]) -> Vec<f64> {
        self.centroids.iter_rows().map(|m| dot(f, m)).collect()
    }

    /// Keeps only rows whose label is in `keep` (which must be ascending).
    pub fn restrict(&self, keep: &[usize]) -> Result<Self> {
        if keep.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::LabelSpaceMismatch("bank labels must be strictly increasing".into()));
        }
        let mut data = Vec::with_capacity(keep.len() * self.dim());
        for &l in keep {
            let r = self.row_of(l).ok_or(Error::UnknownLabel(l))?;
            data.extend_from_slice(self.centroid(r));
        }
        let centroids = if keep.is_empty() {
            Matrix::zeros(0, 0)
        } else {
            Matrix::from_vec(keep.len(), self.dim(), data)?
        };
        Ok(Self {
            centroids,
            labels: keep.to_vec(),
        })
    }
}

fn neighbors(features: &Matrix, i: usize, eps: f64) -> Vec<usize> {
    let fi = features.row(i);
    (0..features.rows())
        .filter(|&j| 1.0 - dot(fi, features.row(j)) <= eps)
        .collect()
}

/// DBSCAN under cosine distance `1 - <a, b>`. A point's neighbourhood includes
/// itself. Clusters are numbered in scan order and border points stay with
/// the first cluster that reaches them.
pub fn dbscan(features: &Matrix, eps: f64, min_pts: usize) -> PseudoLabeling {
    let n = features.rows();
    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    let mut num_clusters = 0;
    for i in 0..n {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        let nb = neighbors(features, i, eps);
        if nb.len() < min_pts {
            continue;
        }
        let c = num_clusters;
        num_clusters += 1;
        labels[i] = Some(c);
        let mut queue: VecDeque<usize> = nb.into_iter().collect();
        while let Some(q) = queue.pop_front() {
            if labels[q].is_none() {
                labels[q] = Some(c);
            }
            if visited[q] {
                continue;
            }
            visited[q] = true;
            let qn = neighbors(features, q, eps);
            if qn.len() >= min_pts {
                queue.extend(qn);
            }
        }
    }
    PseudoLabeling {
        labels,
        num_clusters,
    }
}

/// Normalized mean of each label's members; `None` samples are skipped. The
/// bank's label space is the set of labels that occur.
pub fn build_memory_from_labels(features: &Matrix, labels: &[Option<usize>]) -> Result<MemoryBank> {
    if labels.len() != features.rows() {
        return Err(Error::LengthMismatch {
            left: features.rows(),
            right: labels.len(),
        });
    }
    let mut present: Vec<usize> = labels.iter().flatten().copied().collect();
    present.sort_unstable();
    present.dedup();
    if present.is_empty() {
        return Err(Error::NoClusters);
    }
    let d = features.cols();
    let mut sums = vec![vec![0.0; d]; present.len()];
    for (i, l) in labels.iter().enumerate() {
        if let Some(l) = l {
            let r = present.binary_search(l).expect("label collected above");
            for (s, v) in sums[r].iter_mut().zip(features.row(i)) {
                *s += v;
            }
        }
    }
    // normalization makes dividing by the member count unnecessary
    MemoryBank::new(present, &sums)
}

pub fn build_memory(features: &Matrix, labeling: &PseudoLabeling) -> Result<MemoryBank> {
    if labeling.num_clusters == 0 {
        return Err(Error::NoClusters);
    }
    build_memory_from_labels(features, &labeling.labels)
}

/// Concatenated per-camera softmax similarity blocks for every sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraEmbedding {
    pub per_sample: Vec<Vec<f64>>,
    /// `(camera, block length)` in concatenation order.
    pub blocks: Vec<(usize, usize)>,
}

impl CameraEmbedding {
    /// Rows L2-normalized, ready for clustering.
    pub fn normalized(&self) -> Result<Matrix> {
        let rows = self
            .per_sample
            .iter()
            .map(|r| l2_normalize(r))
            .collect::<Result<Vec<_>>>()?;
        Matrix::from_rows(&rows)
    }
}

/// Clusters each camera's samples separately, then describes every sample by
/// its softmax similarity to each camera's centroids. Cameras that yield no
/// cluster are skipped; it is an error only if all of them do.
pub fn camera_embedding(
    features: &Matrix,
    camera_ids: &[usize],
    eps: f64,
    min_pts: usize,
    sigma: f64,
) -> Result<CameraEmbedding> {
    if camera_ids.len() != features.rows() {
        return Err(Error::LengthMismatch {
            left: features.rows(),
            right: camera_ids.len(),
        });
    }
    let mut cameras: Vec<usize> = camera_ids.to_vec();
    cameras.sort_unstable();
    cameras.dedup();

    let mut banks = Vec::new();
    for &cam in &cameras {
        let idx: Vec<usize> = (0..camera_ids.len()).filter(|&i| camera_ids[i] == cam).collect();
        let rows: Vec<&[f64]> = idx.iter().map(|&i| features.row(i)).collect();
        let sub = Matrix::from_rows(&rows)?;
        let labeling = dbscan(&sub, eps, min_pts);
        if labeling.num_clusters == 0 {
            warn!("{}", Error::CameraTooSmall(cam));
            continue;
        }
        banks.push((cam, build_memory(&sub, &labeling)?));
    }
    if banks.is_empty() {
        return Err(Error::CameraTooSmall(cameras.first().copied().unwrap_or(0)));
    }
    let per_sample = features
        .iter_rows()
        .map(|f| {
            let mut e = Vec::new();
            for (_, bank) in &banks {
                e.extend(softmax_temp(&bank.scores(f), sigma));
            }
            e
        })
        .collect();
    Ok(CameraEmbedding {
        per_sample,
        blocks: banks.iter().map(|(c, b)| (*c, b.len())).collect(),
    })
}
