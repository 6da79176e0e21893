//! Binary tensor container, dataset and checkpoint files, metrics logs and
//! run configs.
//!
//! Container layout: `XMD1`, a little-endian `u32` header length, a UTF-8
//! JSON header listing `{name, dtype, shape, byte_offset}` per entry, then the
//! payload of little-endian arrays. Offsets are relative to the payload start.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetSpec, Modality, Split, SynthImage, CHANNELS};
use crate::encoder::{EncoderConfig, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::trainer::{EpochReport, RunSummary, TrainConfig};

pub const MAGIC: [u8; 4] = *b"XMD1";

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I32(Vec<i32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::I32(_) => "i32",
            TensorData::U8(_) => "u8",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn byte_len(&self) -> usize {
        self.len() * dtype_size(self.dtype()).expect("known dtype")
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
    }

    fn read_le(dtype: &str, bytes: &[u8]) -> Result<Self> {
        Ok(match dtype {
            "f32" => TensorData::F32(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()),
            "i32" => TensorData::I32(bytes.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()),
            "u8" => TensorData::U8(bytes.to_vec()),
            other => return Err(Error::BadHeader(format!("unknown dtype `{other}`"))),
        })
    }
}

fn dtype_size(dtype: &str) -> Option<usize> {
    match dtype {
        "f32" | "i32" => Some(4),
        "u8" => Some(1),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    byte_offset: usize,
}

/// Named tensors in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub entries: Vec<Entry>,
}

impl Container {
    pub fn push(&mut self, name: &str, shape: &[usize], data: TensorData) -> Result<()> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::BadHeader(format!(
                "entry `{name}`: shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        if self.get(name).is_some() {
            return Err(Error::BadHeader(format!("duplicate entry `{name}`")));
        }
        self.entries.push(Entry {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    fn require(&self, name: &str) -> Result<&Entry> {
        self.get(name).ok_or_else(|| Error::BadHeader(format!("missing entry `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let header: Vec<HeaderEntry> = self
            .entries
            .iter()
            .map(|e| {
                let h = HeaderEntry {
                    name: e.name.clone(),
                    dtype: e.data.dtype().to_string(),
                    shape: e.shape.clone(),
                    byte_offset: offset,
                };
                offset += e.data.byte_len();
                h
            })
            .collect();
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for e in &self.entries {
            e.data.write_le(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::BadHeader(format!("file is {} bytes, too short for magic", bytes.len())));
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        if bytes.len() < 8 {
            return Err(Error::BadHeader("missing header length".into()));
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let payload_start = 8usize
            .checked_add(hlen)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::BadHeader(format!("header length {hlen} exceeds file size")))?;
        let header: Vec<HeaderEntry> =
            serde_json::from_slice(&bytes[8..payload_start]).map_err(|e| Error::BadHeader(e.to_string()))?;
        let payload = &bytes[payload_start..];

        let mut spans = Vec::with_capacity(header.len());
        let mut out = Container::default();
        for h in header {
            let size = dtype_size(&h.dtype).ok_or_else(|| Error::BadHeader(format!("unknown dtype `{}`", h.dtype)))?;
            let count = h
                .shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::BadHeader(format!("entry `{}`: shape overflows", h.name)))?;
            let end = count
                .checked_mul(size)
                .and_then(|n| n.checked_add(h.byte_offset))
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| {
                    Error::BadHeader(format!(
                        "entry `{}`: shape {:?} at offset {} runs past the {}-byte payload",
                        h.name,
                        h.shape,
                        h.byte_offset,
                        payload.len()
                    ))
                })?;
            spans.push((h.byte_offset, end, h.name.clone()));
            let data = TensorData::read_le(&h.dtype, &payload[h.byte_offset..end])?;
            out.push(&h.name, &h.shape, data)?;
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::BadHeader(format!("entries `{}` and `{}` overlap", w[0].2, w[1].2)));
            }
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn split_code(s: Split) -> u8 {
    match s {
        Split::Train => 0,
        Split::Query => 1,
        Split::Gallery => 2,
    }
}

fn split_from(c: u8) -> Result<Split> {
    match c {
        0 => Ok(Split::Train),
        1 => Ok(Split::Query),
        2 => Ok(Split::Gallery),
        _ => Err(Error::BadHeader(format!("unknown split code {c}"))),
    }
}

fn modality_from(c: u8) -> Result<Modality> {
    match c {
        0 => Ok(Modality::Visible),
        1 => Ok(Modality::Infrared),
        _ => Err(Error::BadHeader(format!("unknown modality code {c}"))),
    }
}

fn json_entry<T: Serialize>(c: &mut Container, name: &str, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec(value).map_err(|e| Error::Config(e.to_string()))?;
    c.push(name, &[bytes.len()], TensorData::U8(bytes))
}

fn json_from_entry<T: for<'de> Deserialize<'de>>(c: &Container, name: &str) -> Result<T> {
    match &c.require(name)?.data {
        TensorData::U8(b) => serde_json::from_slice(b).map_err(|e| Error::BadHeader(format!("entry `{name}`: {e}"))),
        other => Err(Error::BadHeader(format!("entry `{name}` should be u8, found {}", other.dtype()))),
    }
}

fn to_i32(v: usize) -> Result<i32> {
    i32::try_from(v).map_err(|_| Error::BadHeader(format!("value {v} does not fit in i32")))
}

/// Packs a dataset, plus the spec that generated it when known.
pub fn dataset_to_container(ds: &Dataset, spec: Option<&DatasetSpec>) -> Result<Container> {
    let n = ds.images.len();
    let mut pixels = Vec::with_capacity(n * CHANNELS * ds.height * ds.width);
    let (mut identity, mut camera) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let (mut modality, mut split) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for img in &ds.images {
        if img.height != ds.height || img.width != ds.width {
            return Err(Error::DimMismatch(format!(
                "image is {}x{}, dataset is {}x{}",
                img.height, img.width, ds.height, ds.width
            )));
        }
        pixels.extend_from_slice(&img.pixels);
        identity.push(to_i32(img.identity)?);
        camera.push(to_i32(img.camera)?);
        modality.push(img.modality.index() as u8);
        split.push(split_code(img.split));
    }
    let mut c = Container::default();
    c.push("images", &[n, CHANNELS, ds.height, ds.width], TensorData::F32(pixels))?;
    c.push("identity", &[n], TensorData::I32(identity))?;
    c.push("modality", &[n], TensorData::U8(modality))?;
    c.push("camera", &[n], TensorData::I32(camera))?;
    c.push("split", &[n], TensorData::U8(split))?;
    if let Some(spec) = spec {
        json_entry(&mut c, "spec", spec)?;
    }
    Ok(c)
}

/// Unpacks a dataset and its spec, if one was stored.
pub fn dataset_from_container(c: &Container) -> Result<(Dataset, Option<DatasetSpec>)> {
    let images = c.require("images")?;
    let [n, ch, h, w] = images.shape[..] else {
        return Err(Error::BadHeader(format!("images must be rank 4, got shape {:?}", images.shape)));
    };
    if ch != CHANNELS {
        return Err(Error::BadHeader(format!("images must have {CHANNELS} channels, got {ch}")));
    }
    let TensorData::F32(pixels) = &images.data else {
        return Err(Error::BadHeader("images must be f32".into()));
    };
    let ints = |name: &str| -> Result<&Vec<i32>> {
        let e = c.require(name)?;
        match &e.data {
            TensorData::I32(v) if e.shape == [n] => Ok(v),
            _ => Err(Error::BadHeader(format!("`{name}` must be i32 of shape [{n}]"))),
        }
    };
    let bytes = |name: &str| -> Result<&Vec<u8>> {
        let e = c.require(name)?;
        match &e.data {
            TensorData::U8(v) if e.shape == [n] => Ok(v),
            _ => Err(Error::BadHeader(format!("`{name}` must be u8 of shape [{n}]"))),
        }
    };
    let (identity, camera) = (ints("identity")?, ints("camera")?);
    let (modality, split) = (bytes("modality")?, bytes("split")?);
    let plane = ch * h * w;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let id = usize::try_from(identity[i]).map_err(|_| Error::BadHeader(format!("negative identity at {i}")))?;
        let cam = usize::try_from(camera[i]).map_err(|_| Error::BadHeader(format!("negative camera at {i}")))?;
        out.push(SynthImage {
            pixels: pixels[i * plane..(i + 1) * plane].to_vec(),
            height: h,
            width: w,
            modality: modality_from(modality[i])?,
            camera: cam,
            identity: id,
            split: split_from(split[i])?,
        });
    }
    let spec = if c.get("spec").is_some() { Some(json_from_entry(c, "spec")?) } else { None };
    Ok((
        Dataset {
            height: h,
            width: w,
            images: out,
        },
        spec,
    ))
}

pub fn save_dataset(path: &Path, ds: &Dataset, spec: Option<&DatasetSpec>) -> Result<()> {
    dataset_to_container(ds, spec)?.write(path)
}

pub fn load_dataset(path: &Path) -> Result<(Dataset, Option<DatasetSpec>)> {
    dataset_from_container(&Container::read(path)?)
}

/// Encoder tensors as `param.<name>` in f32 plus the training config echo.
pub fn checkpoint_to_container(params: &ParamSet, cfg: &TrainConfig) -> Result<Container> {
    let mut c = Container::default();
    for t in &params.tensors {
        c.push(&format!("param.{}", t.name), &t.shape, TensorData::F32(t.data.iter().map(|&v| v as f32).collect()))?;
    }
    json_entry(&mut c, "encoder", &params.config)?;
    json_entry(&mut c, "config", cfg)?;
    Ok(c)
}

pub fn checkpoint_from_container(c: &Container) -> Result<(ParamSet, TrainConfig)> {
    let enc: EncoderConfig = json_from_entry(c, "encoder")?;
    let cfg: TrainConfig = json_from_entry(c, "config")?;
    let mut params = ParamSet::zeros(enc)?;
    for t in &mut params.tensors {
        let e = c.require(&format!("param.{}", t.name))?;
        let TensorData::F32(v) = &e.data else {
            return Err(Error::BadHeader(format!("`param.{}` must be f32", t.name)));
        };
        if e.shape != t.shape {
            return Err(Error::BadHeader(format!(
                "`param.{}` has shape {:?}, encoder expects {:?}",
                t.name, e.shape, t.shape
            )));
        }
        *t = Tensor {
            name: t.name.clone(),
            shape: t.shape.clone(),
            data: v.iter().map(|&x| x as f64).collect(),
        };
    }
    Ok((params, cfg))
}

pub fn save_checkpoint(path: &Path, params: &ParamSet, cfg: &TrainConfig) -> Result<()> {
    checkpoint_to_container(params, cfg)?.write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, TrainConfig)> {
    checkpoint_from_container(&Container::read(path)?)
}

/// Appends one JSON line per epoch report.
pub struct MetricsWriter<W: Write> {
    out: W,
    last_epoch: Option<usize>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out, last_epoch: None }
    }

    pub fn write(&mut self, report: &EpochReport) -> Result<()> {
        if self.last_epoch.is_some_and(|e| report.epoch <= e) {
            return Err(Error::Config(format!(
                "epoch {} written after epoch {}",
                report.epoch,
                self.last_epoch.expect("checked")
            )));
        }
        serde_json::to_writer(&mut self.out, report).map_err(|e| Error::Io(e.to_string()))?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        self.last_epoch = Some(report.epoch);
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

pub fn read_metrics(text: &str) -> Result<Vec<EpochReport>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::BadHeader(format!("metrics line {}: {e}", i + 1))))
        .collect()
}

pub fn write_summary(path: &Path, summary: &RunSummary) -> Result<()> {
    let text = serde_json::to_string_pretty(summary).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// A JSON run config: dataset spec and training hyperparameters. Missing
/// fields take defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DatasetSpec,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.data.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate;

    fn tiny_spec() -> DatasetSpec {
        DatasetSpec {
            num_identities: 4,
            test_identities: 2,
            images_per_identity_per_modality: 2,
            palette_count: 2,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn every_dtype_round_trips() {
        let mut c = Container::default();
        c.push("a", &[2, 2], TensorData::F32(vec![1.5, -0.0, f32::MIN_POSITIVE, 3.0e38])).unwrap();
        c.push("b", &[3], TensorData::I32(vec![i32::MIN, 0, i32::MAX])).unwrap();
        c.push("c", &[0], TensorData::U8(vec![])).unwrap();
        c.push("d", &[2], TensorData::U8(vec![0, 255])).unwrap();
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn layout_is_little_endian() {
        let mut c = Container::default();
        c.push("x", &[1], TensorData::I32(vec![0x0102_0304])).unwrap();
        let b = c.to_bytes();
        assert_eq!(&b[..4], b"XMD1");
        let hlen = u32::from_le_bytes(b[4..8].try_into().unwrap()) as usize;
        assert_eq!(&b[8 + hlen..], &[4, 3, 2, 1]);
    }

    #[test]
    fn bad_magic() {
        let mut b = Container::default().to_bytes();
        b[0] = b'Y';
        assert_eq!(Container::from_bytes(&b), Err(Error::BadMagic(*b"YMD1")));
    }

    #[test]
    fn shape_past_payload() {
        let mut c = Container::default();
        c.push("x", &[2], TensorData::F32(vec![1.0, 2.0])).unwrap();
        let mut b = c.to_bytes();
        b.truncate(b.len() - 4);
        assert!(matches!(Container::from_bytes(&b), Err(Error::BadHeader(_))));
    }

    #[test]
    fn overlapping_entries() {
        let header = br#"[{"name":"a","dtype":"u8","shape":[2],"byte_offset":0},{"name":"b","dtype":"u8","shape":[2],"byte_offset":1}]"#;
        let mut b = MAGIC.to_vec();
        b.extend_from_slice(&(header.len() as u32).to_le_bytes());
        b.extend_from_slice(header);
        b.extend_from_slice(&[1, 2, 3]);
        let err = Container::from_bytes(&b).unwrap_err();
        assert!(matches!(err, Error::BadHeader(ref m) if m.contains("overlap")), "{err}");
    }

    #[test]
    fn header_length_past_end() {
        let mut b = MAGIC.to_vec();
        b.extend_from_slice(&1000u32.to_le_bytes());
        assert!(matches!(Container::from_bytes(&b), Err(Error::BadHeader(_))));
    }

    #[test]
    fn dataset_round_trip() {
        let spec = tiny_spec();
        let ds = generate(&spec).unwrap();
        let c = dataset_to_container(&ds, Some(&spec)).unwrap();
        let (back, back_spec) = dataset_from_container(&Container::from_bytes(&c.to_bytes()).unwrap()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back_spec, Some(spec));
    }

    #[test]
    fn checkpoint_round_trip_is_f32_exact() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let enc = EncoderConfig {
            input_dim: 6,
            feature_dim: 3,
            hidden_dim: 4,
            depth: 2,
            bias: true,
        };
        let mut p = ParamSet::init(enc, &mut rng).unwrap();
        for t in &mut p.tensors {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
        }
        let cfg = TrainConfig {
            seed: 9,
            encoder: enc,
            ..TrainConfig::default()
        };
        let c = checkpoint_to_container(&p, &cfg).unwrap();
        let (back, back_cfg) = checkpoint_from_container(&Container::from_bytes(&c.to_bytes()).unwrap()).unwrap();
        assert_eq!(back, p);
        assert_eq!(back_cfg, cfg);
    }

    #[test]
    fn metrics_epochs_must_increase() {
        let mut w = MetricsWriter::new(Vec::new());
        let r = EpochReport::empty(0, 1);
        w.write(&r).unwrap();
        assert!(w.write(&r).is_err());
        let mut r2 = r.clone();
        r2.epoch = 1;
        w.write(&r2).unwrap();
        let text = String::from_utf8(w.into_inner()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(read_metrics(&text).unwrap(), vec![r, r2]);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
        let cfg = RunConfig::from_json(r#"{"train": {"seed": 3}, "data": {"noise_std": 0.1}}"#).unwrap();
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.data.noise_std, 0.1);
        assert!(matches!(RunConfig::from_json(r#"{"train": {"sede": 3}}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"extra": 1}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"train": {"sigma": 0}}"#), Err(Error::Config(_))));
    }
}
