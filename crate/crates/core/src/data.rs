//! Deterministic synthetic two-modality dataset.
//!
//! Every identity owns a random grey pattern. Visible images tint that pattern
//! with one of a few shared colour palettes, so colour separates some
//! identities inside the visible modality but carries nothing an infrared image
//! can reproduce. Infrared images are the pattern through a fixed tone curve,
//! replicated over three channels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;
pub const INFRARED_GAMMA: f64 = 0.7;
pub const CAMERA_TINT: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    Visible,
    Infrared,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Visible, Modality::Infrared];

    pub fn index(self) -> usize {
        match self {
            Modality::Visible => 0,
            Modality::Infrared => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Modality::Visible),
            1 => Some(Modality::Infrared),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Visible => "visible",
            Modality::Infrared => "infrared",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn index(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Query => 1,
            Split::Gallery => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Split::Train),
            1 => Some(Split::Query),
            2 => Some(Split::Gallery),
            _ => None,
        }
    }
}

/// A `[3, H, W]` image with pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthImage {
    pub pixels: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub modality: Modality,
    pub camera: usize,
    /// Ground truth; only evaluation and label-quality metrics may read it.
    pub identity: usize,
    pub split: Split,
}

impl SynthImage {
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.pixels[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.pixels[c * n..(c + 1) * n]
    }

    pub fn is_grayscale(&self) -> bool {
        self.channel(0) == self.channel(1) && self.channel(1) == self.channel(2)
    }

    /// Encoder input: pixels shifted by -0.5, channel-major.
    pub fn flatten(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64 - 0.5).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    /// Training identities.
    pub num_identities: usize,
    /// Held-out identities forming the query and gallery splits.
    pub test_identities: usize,
    pub images_per_identity_per_modality: usize,
    pub height: usize,
    pub width: usize,
    /// Cameras per modality.
    pub num_cameras: usize,
    pub palette_count: usize,
    /// Side of the coarse random grid behind each identity pattern; equal to
    /// `height` and `width` gives independent pixels.
    pub pattern_cells: usize,
    /// HSV saturation of the palettes; 0 makes every palette neutral grey.
    pub palette_saturation: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_identities: 30,
            test_identities: 10,
            images_per_identity_per_modality: 20,
            height: 8,
            width: 8,
            num_cameras: 2,
            palette_count: 5,
            pattern_cells: 3,
            palette_saturation: 0.7,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_identities", self.num_identities),
            ("test_identities", self.test_identities),
            ("images_per_identity_per_modality", self.images_per_identity_per_modality),
            ("height", self.height),
            ("width", self.width),
            ("num_cameras", self.num_cameras),
            ("palette_count", self.palette_count),
            ("pattern_cells", self.pattern_cells),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidSpec(format!("{name} must be at least 1")));
            }
        }
        if self.palette_count >= self.num_identities {
            return Err(Error::InvalidSpec(format!(
                "palette_count ({}) must be below num_identities ({}) so palettes are shared",
                self.palette_count, self.num_identities
            )));
        }
        if !(0.0..=1.0).contains(&self.palette_saturation) {
            return Err(Error::InvalidSpec("palette_saturation must lie in [0, 1]".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidSpec("noise_std must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn total_identities(&self) -> usize {
        self.num_identities + self.test_identities
    }

    pub fn input_dim(&self) -> usize {
        CHANNELS * self.height * self.width
    }

    /// Palettes are dealt round-robin, so identity `i` wears palette `i % palette_count`.
    pub fn palette_of(&self, identity: usize) -> usize {
        identity % self.palette_count
    }

    /// Per-channel multipliers: evenly spaced hues at fixed saturation, full value.
    pub fn palette(&self, p: usize) -> [f64; 3] {
        hsv_to_rgb(p as f64 / self.palette_count as f64, self.palette_saturation, 1.0)
    }
}

/// Camera brightness offset: even cameras darken, odd cameras brighten.
pub fn camera_tint(camera: usize) -> f64 {
    if camera % 2 == 0 {
        -CAMERA_TINT
    } else {
        CAMERA_TINT
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub images: Vec<SynthImage>,
}

impl Dataset {
    pub fn indices_where(&self, pred: impl Fn(&SynthImage) -> bool) -> Vec<usize> {
        self.images
            .iter()
            .enumerate()
            .filter(|(_, im)| pred(im))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn train_indices(&self, modality: Modality) -> Vec<usize> {
        self.indices_where(|im| im.split == Split::Train && im.modality == modality)
    }

    pub fn test_indices(&self, modality: Modality) -> Vec<usize> {
        self.indices_where(|im| im.split != Split::Train && im.modality == modality)
    }
}

/// Coarse `cells`×`cells` uniform grid upsampled bilinearly to `h`×`w`.
fn smooth_pattern<R: Rng>(rng: &mut R, h: usize, w: usize, cells: usize) -> Vec<f64> {
    let grid: Vec<f64> = (0..cells * cells).map(|_| rng.random::<f64>()).collect();
    let axis = |i: usize, n: usize| {
        let f = ((i as f64 + 0.5) / n as f64 * cells as f64 - 0.5).clamp(0.0, (cells - 1) as f64);
        let lo = f.floor() as usize;
        (lo, (lo + 1).min(cells - 1), f - lo as f64)
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let (y0, y1, ty) = axis(y, h);
        for x in 0..w {
            let (x0, x1, tx) = axis(x, w);
            let top = grid[y0 * cells + x0] * (1.0 - tx) + grid[y0 * cells + x1] * tx;
            let bottom = grid[y1 * cells + x0] * (1.0 - tx) + grid[y1 * cells + x1] * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let plane = spec.height * spec.width;
    let noise = if spec.noise_std > 0.0 {
        Some(Normal::new(0.0, spec.noise_std).map_err(|e| Error::InvalidSpec(e.to_string()))?)
    } else {
        None
    };

    let patterns: Vec<Vec<f64>> = (0..spec.total_identities())
        .map(|_| smooth_pattern(&mut rng, spec.height, spec.width, spec.pattern_cells))
        .collect();

    let mut images = Vec::new();
    for (identity, pattern) in patterns.iter().enumerate() {
        let is_train = identity < spec.num_identities;
        let palette = spec.palette(spec.palette_of(identity));
        for modality in Modality::ALL {
            let split = match (is_train, modality) {
                (true, _) => Split::Train,
                (false, Modality::Infrared) => Split::Query,
                (false, Modality::Visible) => Split::Gallery,
            };
            for k in 0..spec.images_per_identity_per_modality {
                let camera = k % spec.num_cameras;
                let tint = camera_tint(camera);
                let mut pixels = Vec::with_capacity(CHANNELS * plane);
                match modality {
                    Modality::Visible => {
                        for gain in palette {
                            for &p in pattern {
                                let n = noise.map_or(0.0, |d| d.sample(&mut rng));
                                pixels.push((gain * p + tint + n).clamp(0.0, 1.0) as f32);
                            }
                        }
                    }
                    Modality::Infrared => {
                        let grey: Vec<f32> = pattern
                            .iter()
                            .map(|&p| {
                                let n = noise.map_or(0.0, |d| d.sample(&mut rng));
                                (p.powf(INFRARED_GAMMA) + tint + n).clamp(0.0, 1.0) as f32
                            })
                            .collect();
                        for _ in 0..CHANNELS {
                            pixels.extend_from_slice(&grey);
                        }
                    }
                }
                images.push(SynthImage {
                    pixels,
                    height: spec.height,
                    width: spec.width,
                    modality,
                    camera,
                    identity,
                    split,
                });
            }
        }
    }
    Ok(Dataset {
        height: spec.height,
        width: spec.width,
        images,
    })
}

/// Empirical `(P(C=V), P(C=I))` over the training split.
pub fn modality_priors(dataset: &Dataset) -> Result<(f64, f64)> {
    let mut counts = [0usize; 2];
    for im in dataset.images.iter().filter(|im| im.split == Split::Train) {
        counts[im.modality.index()] += 1;
    }
    let total = counts[0] + counts[1];
    if total == 0 {
        return Err(Error::EmptySplit("train"));
    }
    Ok((counts[0] as f64 / total as f64, counts[1] as f64 / total as f64))
}
