//! Modality-specific augmentation and the usual geometric augmentations.
//!
//! Infrared: the grey channel goes through several pseudo-colour maps and each
//! output channel is drawn from an independently chosen map. Visible: output
//! channels are drawn from the input channels (channel multiplexing), with a
//! one-in-four chance of a single replicated channel instead.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Modality, SynthImage, CHANNELS};
use crate::error::{Error, Result};

/// One tone curve `clamp(gain * g^gamma, 0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToneCurve {
    pub gain: f64,
    pub gamma: f64,
}

impl ToneCurve {
    pub fn apply(&self, g: f32) -> f32 {
        (self.gain * (g as f64).powf(self.gamma)).clamp(0.0, 1.0) as f32
    }
}

/// Pseudo-colour map: one tone curve per output channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Colormap {
    pub channels: [ToneCurve; 3],
}

impl Colormap {
    pub const fn new(curves: [(f64, f64); 3]) -> Self {
        Self {
            channels: [
                ToneCurve {
                    gain: curves[0].0,
                    gamma: curves[0].1,
                },
                ToneCurve {
                    gain: curves[1].0,
                    gamma: curves[1].1,
                },
                ToneCurve {
                    gain: curves[2].0,
                    gamma: curves[2].1,
                },
            ],
        }
    }

    pub const IDENTITY: Colormap = Colormap::new([(1.0, 1.0), (1.0, 1.0), (1.0, 1.0)]);

    pub fn channel(&self, c: usize, grey: &[f32]) -> Vec<f32> {
        grey.iter().map(|&g| self.channels[c].apply(g)).collect()
    }
}

pub fn default_colormaps() -> Vec<Colormap> {
    vec![
        Colormap::new([(1.0, 0.5), (0.8, 1.0), (0.6, 2.0)]),
        Colormap::new([(0.8, 1.0), (1.0, 0.5), (0.9, 1.5)]),
        Colormap::new([(0.6, 2.0), (0.9, 1.5), (1.0, 0.5)]),
    ]
}

/// Builds a pseudo-colour image where output channel `c` comes from
/// `maps[picks[c]]`.
pub fn apply_colormaps(img: &SynthImage, maps: &[Colormap], picks: [usize; 3]) -> Result<SynthImage> {
    if img.modality != Modality::Infrared || !img.is_grayscale() {
        return Err(Error::NotInfrared);
    }
    let grey = img.channel(0).to_vec();
    let mut out = img.clone();
    for (c, &j) in picks.iter().enumerate() {
        let ch = maps[j].channel(c, &grey);
        out.channel_mut(c).copy_from_slice(&ch);
    }
    Ok(out)
}

pub fn augment_infrared<R: Rng>(img: &SynthImage, maps: &[Colormap], rng: &mut R) -> Result<SynthImage> {
    if maps.is_empty() {
        return Err(Error::Config("at least one colormap is required".into()));
    }
    let picks = [
        rng.random_range(0..maps.len()),
        rng.random_range(0..maps.len()),
        rng.random_range(0..maps.len()),
    ];
    apply_colormaps(img, maps, picks)
}

/// Output channel `k` is input channel `sources[k]`.
pub fn multiplex_channels(img: &SynthImage, sources: [usize; 3]) -> Result<SynthImage> {
    if img.modality != Modality::Visible {
        return Err(Error::NotVisible);
    }
    let mut out = img.clone();
    for (k, &s) in sources.iter().enumerate() {
        out.channel_mut(k).copy_from_slice(img.channel(s));
    }
    Ok(out)
}

pub fn augment_visible<R: Rng>(img: &SynthImage, rng: &mut R) -> Result<SynthImage> {
    if img.modality != Modality::Visible {
        return Err(Error::NotVisible);
    }
    let sources = if rng.random_bool(0.25) {
        let c = rng.random_range(0..CHANNELS);
        [c, c, c]
    } else {
        [
            rng.random_range(0..CHANNELS),
            rng.random_range(0..CHANNELS),
            rng.random_range(0..CHANNELS),
        ]
    };
    multiplex_channels(img, sources)
}

/// Dispatches on the image's modality.
pub fn augment_modality<R: Rng>(img: &SynthImage, maps: &[Colormap], rng: &mut R) -> Result<SynthImage> {
    match img.modality {
        Modality::Visible => augment_visible(img, rng),
        Modality::Infrared => augment_infrared(img, maps, rng),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Sampled geometric augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeometricAug {
    pub flip: bool,
    /// Crop offset after padding by one pixel, in `-1..=1` per axis.
    pub shift: (i32, i32),
    pub erase: Option<Rect>,
}

pub const ERASE_VALUE: f32 = 0.5;

impl GeometricAug {
    pub const NONE: GeometricAug = GeometricAug {
        flip: false,
        shift: (0, 0),
        erase: None,
    };

    pub fn sample<R: Rng>(rng: &mut R, height: usize, width: usize) -> Self {
        let flip = rng.random_bool(0.5);
        let shift = (rng.random_range(-1..=1), rng.random_range(-1..=1));
        let erase = if rng.random_bool(0.5) {
            let area = rng.random_range(0.10..=0.25) * (height * width) as f64;
            let aspect: f64 = rng.random_range(0.5..=2.0);
            let h = ((area * aspect).sqrt().round() as usize).clamp(1, height);
            let w = ((area / aspect).sqrt().round() as usize).clamp(1, width);
            Some(Rect {
                top: rng.random_range(0..=height - h),
                left: rng.random_range(0..=width - w),
                height: h,
                width: w,
            })
        } else {
            None
        };
        Self { flip, shift, erase }
    }

    pub fn apply(&self, img: &SynthImage) -> SynthImage {
        let (h, w) = (img.height, img.width);
        let mut out = img.clone();
        for c in 0..CHANNELS {
            let src = img.channel(c);
            let dst = out.channel_mut(c);
            for y in 0..h {
                for x in 0..w {
                    // output (y, x) reads padded input at (y + 1 + dy, x + 1 + dx)
                    let sy = y as i32 + self.shift.0;
                    let sx0 = x as i32 + self.shift.1;
                    let v = if sy < 0 || sy >= h as i32 || sx0 < 0 || sx0 >= w as i32 {
                        0.0
                    } else {
                        let sx = if self.flip { w - 1 - sx0 as usize } else { sx0 as usize };
                        src[sy as usize * w + sx]
                    };
                    dst[y * w + x] = v;
                }
            }
            if let Some(r) = self.erase {
                for y in r.top..r.top + r.height {
                    for x in r.left..r.left + r.width {
                        dst[y * w + x] = ERASE_VALUE;
                    }
                }
            }
        }
        out
    }
}

pub fn standard_augment<R: Rng>(img: &SynthImage, rng: &mut R) -> SynthImage {
    GeometricAug::sample(rng, img.height, img.width).apply(img)
}
