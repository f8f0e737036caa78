//! Binary persistence: environment datasets (manifest + fixed-size records),
//! model checkpoints, label maps, and raw image batches. All multi-byte
//! values are little-endian; floats are stored as 32-bit, so values kept on
//! the f32 grid round-trip bit-exactly.
//!
//! Formats:
//! - label map: `LMAP` magic, h/w/z as u32 (16-byte header), then h·w class
//!   bytes.
//! - dataset record: label map block, then f32s (bs_pos ×3, cu_pos ×3, d_r,
//!   j_po ×Z, descriptor, H real/imag interleaved row-major), then an FNV-1a
//!   checksum over the record bytes.
//! - checkpoint: `CKPT` magic, version u32, step u64, tensor count u32, per
//!   tensor (name_len u32, name, trainable u8, has_moments u8, rank u32,
//!   dims u32×rank, values f32×n [, moments m then v]), FNV-1a trailer.
//! - image batch: `IMGB` magic, count/h/w/channels u32, then 8-bit pixels
//!   row-major per image.

use crate::envsense::LabelMap;
use crate::error::{Error, Result};
use crate::tensorkit::{Param, ParameterSet};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const DATASET_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;
const LMAP_MAGIC: &[u8; 4] = b"LMAP";
const CKPT_MAGIC: &[u8; 4] = b"CKPT";
const IMGB_MAGIC: &[u8; 4] = b"IMGB";

/// One generated environment sample: poses, sensed features, and the
/// ray-traced channel (K×M row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSample {
    pub index: u32,
    pub bs_pos: [f64; 3],
    pub cu_pos: [f64; 3],
    pub label_map: LabelMap,
    pub d_r: f64,
    pub j_po: Vec<f64>,
    pub descriptor: Vec<f64>,
    pub h: Vec<Complex64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub n: u32,
    pub z: u32,
    pub m: u32,
    pub k: u32,
    pub resolution: u32,
    pub desc_len: u32,
    /// Channel normalization constant (std of train-split re/im entries).
    pub c_h: f64,
    pub seed: u64,
    /// World extent in meters, for location-feature scaling at train time.
    #[serde(default = "default_extent")]
    pub extent: [f64; 3],
}

fn default_extent() -> [f64; 3] {
    [400.0, 400.0, 60.0]
}

fn fnv1a(bytes: &[u8]) -> u32 {
    let mut h: u32 = 0x811c9dc5;
    for &b in bytes {
        h ^= b as u32;
        h = h.wrapping_mul(0x01000193);
    }
    h
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Reader<'a> {
        Reader { buf, pos: 0 }
    }
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(format!(
                "truncated input reading {what} at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(4 * n, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

// ---- label maps -------------------------------------------------------

pub fn encode_label_map(map: &LabelMap, z: u32, out: &mut Vec<u8>) {
    out.extend_from_slice(LMAP_MAGIC);
    out.extend_from_slice(&(map.h as u32).to_le_bytes());
    out.extend_from_slice(&(map.w as u32).to_le_bytes());
    out.extend_from_slice(&z.to_le_bytes());
    out.extend_from_slice(&map.labels);
}

/// Decode one label map block; returns the map and the bytes consumed.
pub fn decode_label_map(buf: &[u8]) -> Result<(LabelMap, usize)> {
    let mut r = Reader::new(buf);
    let magic = r.take(4, "label map magic")?;
    if magic != LMAP_MAGIC {
        return Err(Error::format("bad label map magic"));
    }
    let h = r.u32("label map height")? as usize;
    let w = r.u32("label map width")? as usize;
    let z = r.u32("label map class count")?;
    if h == 0 || w == 0 || h > 1 << 14 || w > 1 << 14 {
        return Err(Error::format(format!("implausible label map size {h}x{w}")));
    }
    if z == 0 || z > 255 {
        return Err(Error::format(format!("implausible class count {z}")));
    }
    let labels = r.take(h * w, "label map pixels")?.to_vec();
    if let Some(&bad) = labels.iter().find(|&&l| l == 0 || l as u32 > z) {
        return Err(Error::format(format!("label {bad} outside 1..={z}")));
    }
    Ok((
        LabelMap {
            h,
            w,
            labels,
            cu_pixel: (h / 2, w / 2),
            depth: None,
        },
        r.pos,
    ))
}

// ---- datasets ---------------------------------------------------------

fn push_f32s(out: &mut Vec<u8>, vals: impl IntoIterator<Item = f64>) {
    for v in vals {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn encode_record(s: &EnvSample, man: &DatasetManifest, out: &mut Vec<u8>) {
    let start = out.len();
    encode_label_map(&s.label_map, man.z, out);
    push_f32s(out, s.bs_pos);
    push_f32s(out, s.cu_pos);
    push_f32s(out, [s.d_r]);
    push_f32s(out, s.j_po.iter().copied());
    push_f32s(out, s.descriptor.iter().copied());
    push_f32s(out, s.h.iter().flat_map(|z| [z.re, z.im]));
    let ck = fnv1a(&out[start..]);
    out.extend_from_slice(&ck.to_le_bytes());
}

fn decode_record(buf: &[u8], index: u32, man: &DatasetManifest) -> Result<(EnvSample, usize)> {
    let (label_map, map_len) = decode_label_map(buf)
        .map_err(|e| Error::format(format!("record {index}: {e}")))?;
    if label_map.h != man.resolution as usize || label_map.w != man.resolution as usize {
        return Err(Error::format(format!(
            "record {index}: label map {}x{} != manifest resolution {}",
            label_map.h, label_map.w, man.resolution
        )));
    }
    let mut r = Reader::new(&buf[map_len..]);
    let wrap = |e: Error| Error::format(format!("record {index}: {e}"));
    let bs = r.f32s(3, "bs position").map_err(wrap)?;
    let cu = r.f32s(3, "cu position").map_err(wrap)?;
    let d_r = r.f32("roi radius").map_err(wrap)? as f64;
    let j_po = r.f32s(man.z as usize, "semantic counts").map_err(wrap)?;
    let descriptor = r.f32s(man.desc_len as usize, "descriptor").map_err(wrap)?;
    let h_raw = r
        .f32s(2 * (man.m * man.k) as usize, "channel matrix")
        .map_err(wrap)?;
    let stored = r.u32("checksum").map_err(wrap)?;
    let total = map_len + r.pos;
    let actual = fnv1a(&buf[..total - 4]);
    if stored != actual {
        return Err(Error::format(format!(
            "record {index}: checksum mismatch (stored {stored:#010x}, computed {actual:#010x})"
        )));
    }
    let h = h_raw
        .chunks_exact(2)
        .map(|c| Complex64::new(c[0], c[1]))
        .collect();
    Ok((
        EnvSample {
            index,
            bs_pos: [bs[0], bs[1], bs[2]],
            cu_pos: [cu[0], cu[1], cu[2]],
            label_map,
            d_r,
            j_po,
            descriptor,
            h,
        },
        total,
    ))
}

pub fn write_dataset(samples: &[EnvSample], manifest: &DatasetManifest, dir: &Path) -> Result<()> {
    if samples.len() != manifest.n as usize {
        return Err(Error::config(format!(
            "manifest N={} but {} samples given",
            manifest.n,
            samples.len()
        )));
    }
    std::fs::create_dir_all(dir)?;
    let text = toml::to_string_pretty(manifest)
        .map_err(|e| Error::format(format!("manifest serialization: {e}")))?;
    std::fs::write(dir.join("manifest.toml"), text)?;
    let mut out = Vec::new();
    for s in samples {
        encode_record(s, manifest, &mut out);
    }
    std::fs::write(dir.join("samples.bin"), out)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(dir.join("manifest.toml"))?;
    let man: DatasetManifest =
        toml::from_str(&text).map_err(|e| Error::format(format!("manifest: {e}")))?;
    if man.version != DATASET_VERSION {
        return Err(Error::format(format!(
            "unsupported dataset version {} (expected {DATASET_VERSION})",
            man.version
        )));
    }
    Ok(man)
}

pub fn read_dataset(dir: &Path) -> Result<(Vec<EnvSample>, DatasetManifest)> {
    let man = read_manifest(dir)?;
    let buf = std::fs::read(dir.join("samples.bin"))?;
    let samples = decode_samples(&buf, &man)?;
    Ok((samples, man))
}

/// Decode all records from a raw sample buffer (separated out for fuzzing).
pub fn decode_samples(buf: &[u8], man: &DatasetManifest) -> Result<Vec<EnvSample>> {
    let mut samples = Vec::with_capacity(man.n as usize);
    let mut off = 0usize;
    for i in 0..man.n {
        let (s, used) = decode_record(&buf[off..], i, man)?;
        off += used;
        samples.push(s);
    }
    if off != buf.len() {
        return Err(Error::format(format!(
            "{} trailing bytes after {} records",
            buf.len() - off,
            man.n
        )));
    }
    Ok(samples)
}

/// Seeded shuffle-and-partition of `0..n` into train/test index sets with
/// `ratio = (train_parts, test_parts)`; train side takes the floor.
pub fn split(n: usize, ratio: (usize, usize), seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if ratio.0 == 0 || ratio.1 == 0 {
        return Err(Error::config("split ratio parts must both be positive"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let train_n = n * ratio.0 / (ratio.0 + ratio.1);
    if train_n == 0 || train_n == n {
        return Err(Error::config(format!(
            "split of {n} samples at {}:{} leaves an empty side",
            ratio.0, ratio.1
        )));
    }
    let test = idx.split_off(train_n);
    Ok((idx, test))
}

// ---- checkpoints ------------------------------------------------------

pub fn encode_checkpoint(ps: &ParameterSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&ps.step.to_le_bytes());
    out.extend_from_slice(&(ps.params.len() as u32).to_le_bytes());
    for (name, p) in &ps.params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(p.trainable as u8);
        out.push(!p.m.is_empty() as u8);
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        push_f32s(&mut out, p.values.iter().copied());
        if !p.m.is_empty() {
            push_f32s(&mut out, p.m.iter().copied());
            push_f32s(&mut out, p.v.iter().copied());
        }
    }
    let ck = fnv1a(&out);
    out.extend_from_slice(&ck.to_le_bytes());
    out
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<ParameterSet> {
    if buf.len() < 4 {
        return Err(Error::format("checkpoint too short"));
    }
    let stored = u32::from_le_bytes(buf[buf.len() - 4..].try_into().unwrap());
    let body = &buf[..buf.len() - 4];
    if fnv1a(body) != stored {
        return Err(Error::format("checkpoint checksum mismatch"));
    }
    let mut r = Reader::new(body);
    if r.take(4, "magic")? != CKPT_MAGIC {
        return Err(Error::format("bad checkpoint magic"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let step = r.u64("step")?;
    let count = r.u32("tensor count")?;
    let mut params = BTreeMap::new();
    for i in 0..count {
        let name_len = r.u32("name length")? as usize;
        if name_len == 0 || name_len > 4096 {
            return Err(Error::format(format!("tensor {i}: implausible name length")));
        }
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
            .map_err(|_| Error::format(format!("tensor {i}: non-utf8 name")))?;
        let trainable = r.take(1, "trainable flag")?[0] != 0;
        let has_mom = r.take(1, "moments flag")?[0] != 0;
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::format(format!("tensor '{name}': rank {rank} > 8")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = r.u32("dim")? as usize;
            numel = numel
                .checked_mul(d)
                .filter(|&n| n <= 1 << 28)
                .ok_or_else(|| Error::format(format!("tensor '{name}': size overflow")))?;
            shape.push(d);
        }
        let values = r.f32s(numel, "values")?;
        let (m, v) = if has_mom {
            (r.f32s(numel, "first moments")?, r.f32s(numel, "second moments")?)
        } else {
            (Vec::new(), Vec::new())
        };
        if params
            .insert(
                name.clone(),
                Param {
                    shape,
                    values,
                    m,
                    v,
                    trainable,
                },
            )
            .is_some()
        {
            return Err(Error::format(format!("duplicate tensor name '{name}'")));
        }
    }
    if r.pos != body.len() {
        return Err(Error::format("trailing bytes in checkpoint"));
    }
    Ok(ParameterSet { params, step })
}

pub fn save_checkpoint(ps: &ParameterSet, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, encode_checkpoint(ps))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterSet> {
    let buf = std::fs::read(path)?;
    decode_checkpoint(&buf)
}

/// Strict schema check: the loaded set must contain exactly the names and
/// shapes of `reference` (a freshly initialized architecture).
pub fn check_schema(loaded: &ParameterSet, reference: &ParameterSet) -> Result<()> {
    let missing: Vec<&String> = reference
        .params
        .keys()
        .filter(|n| !loaded.params.contains_key(*n))
        .collect();
    if !missing.is_empty() {
        return Err(Error::format(format!(
            "checkpoint missing tensors: {missing:?}"
        )));
    }
    let unknown: Vec<&String> = loaded
        .params
        .keys()
        .filter(|n| !reference.params.contains_key(*n))
        .collect();
    if !unknown.is_empty() {
        return Err(Error::format(format!(
            "checkpoint has unknown tensors: {unknown:?}"
        )));
    }
    for (name, p) in &reference.params {
        let l = &loaded.params[name];
        if l.shape != p.shape {
            return Err(Error::format(format!(
                "tensor '{name}' shape {:?} != expected {:?}",
                l.shape, p.shape
            )));
        }
    }
    Ok(())
}

// ---- image batches ----------------------------------------------------

/// Encode images as 8-bit RGB; pixels are [0,1] reals, h·w·channels each.
pub fn encode_image_batch(
    images: &[Vec<f64>],
    h: usize,
    w: usize,
    channels: usize,
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(IMGB_MAGIC);
    out.extend_from_slice(&(images.len() as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(channels as u32).to_le_bytes());
    for (i, img) in images.iter().enumerate() {
        if img.len() != h * w * channels {
            return Err(Error::dimension(format!("image {i}: wrong pixel count")));
        }
        for &p in img {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Domain(format!("image {i}: pixel {p} outside [0,1]")));
            }
            out.push((p * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Decode an image batch to [0,1] pixel vectors.
pub fn decode_image_batch(buf: &[u8]) -> Result<(Vec<Vec<f64>>, usize, usize, usize)> {
    let mut r = Reader::new(buf);
    if r.take(4, "image batch magic")? != IMGB_MAGIC {
        return Err(Error::format("bad image batch magic"));
    }
    let count = r.u32("image count")? as usize;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let c = r.u32("channels")? as usize;
    if count > 1 << 20 || h == 0 || w == 0 || h > 4096 || w > 4096 || !(1..=4).contains(&c) {
        return Err(Error::format("implausible image batch header"));
    }
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let raw = r.take(h * w * c, "pixels")
            .map_err(|e| Error::format(format!("image {i}: {e}")))?;
        images.push(raw.iter().map(|&b| b as f64 / 255.0).collect());
    }
    if r.pos != buf.len() {
        return Err(Error::format("trailing bytes in image batch"));
    }
    Ok((images, h, w, c))
}
