//! Synthetic blob corpus and 16-bit PGM files.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::evalmetrics::BinaryMask;
use crate::kv;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_images: usize,
    pub image_size: usize,
    pub blobs_min: usize,
    pub blobs_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub fg_mean: f64,
    pub bg_mean: f64,
    /// Peak amplitude of the smooth background texture.
    pub texture_amp: f64,
    pub noise_sigma: f64,
    /// Relative amplitude of the boundary wobble.
    pub jitter: f64,
    pub data_seed: u64,
    pub train_frac: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_images: 250,
            image_size: 64,
            blobs_min: 1,
            blobs_max: 3,
            radius_min: 4.0,
            radius_max: 12.0,
            fg_mean: 0.65,
            bg_mean: 0.35,
            texture_amp: 0.1,
            noise_sigma: 0.08,
            jitter: 0.15,
            data_seed: 0,
            train_frac: 0.8,
        }
    }
}

impl SynthConfig {
    pub const KEYS: [&'static str; 13] = [
        "n_images",
        "image_size",
        "blobs_min",
        "blobs_max",
        "radius_min",
        "radius_max",
        "fg_mean",
        "bg_mean",
        "texture_amp",
        "noise_sigma",
        "jitter",
        "data_seed",
        "train_frac",
    ];

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.image_size == 0 || self.image_size % 8 != 0 {
            return bad("image_size must be a positive multiple of 8");
        }
        if self.blobs_min == 0 || self.blobs_min > self.blobs_max {
            return bad("need 1 <= blobs_min <= blobs_max");
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return bad("need 0 < radius_min <= radius_max");
        }
        if self.radius_max * (1.0 + self.jitter) >= self.image_size as f64 / 2.0 {
            return bad("blob radius must stay below image_size / 2");
        }
        if !(self.noise_sigma >= 0.0 && self.texture_amp >= 0.0 && (0.0..1.0).contains(&self.jitter)) {
            return bad("noise_sigma and texture_amp must be >= 0 and jitter in [0, 1)");
        }
        if !(self.train_frac > 0.0 && self.train_frac <= 1.0) {
            return bad("train_frac must be in (0, 1]");
        }
        if !(self.fg_mean.is_finite() && self.bg_mean.is_finite()) {
            return bad("intensity means must be finite");
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "n_images" => self.n_images = kv::value(key, v)?,
            "image_size" => self.image_size = kv::value(key, v)?,
            "blobs_min" => self.blobs_min = kv::value(key, v)?,
            "blobs_max" => self.blobs_max = kv::value(key, v)?,
            "radius_min" => self.radius_min = kv::value(key, v)?,
            "radius_max" => self.radius_max = kv::value(key, v)?,
            "fg_mean" => self.fg_mean = kv::value(key, v)?,
            "bg_mean" => self.bg_mean = kv::value(key, v)?,
            "texture_amp" => self.texture_amp = kv::value(key, v)?,
            "noise_sigma" => self.noise_sigma = kv::value(key, v)?,
            "jitter" => self.jitter = kv::value(key, v)?,
            "data_seed" => self.data_seed = kv::value(key, v)?,
            "train_frac" => self.train_frac = kv::value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_images", self.n_images.to_string()),
            ("image_size", self.image_size.to_string()),
            ("blobs_min", self.blobs_min.to_string()),
            ("blobs_max", self.blobs_max.to_string()),
            ("radius_min", self.radius_min.to_string()),
            ("radius_max", self.radius_max.to_string()),
            ("fg_mean", self.fg_mean.to_string()),
            ("bg_mean", self.bg_mean.to_string()),
            ("texture_amp", self.texture_amp.to_string()),
            ("noise_sigma", self.noise_sigma.to_string()),
            ("jitter", self.jitter.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("train_frac", self.train_frac.to_string()),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[1, H, W]` raw intensities.
    pub image: Tensor<f32>,
    pub mask: BinaryMask,
    pub blobs: usize,
}

/// An ellipse with a wobbly boundary: inside where
/// `ρ < 1 + Σ a_k cos(kθ + φ_k)` in axis-normalized polar coordinates.
struct Blob {
    cy: f64,
    cx: f64,
    ay: f64,
    ax: f64,
    wobble: [(f64, f64); 3],
}

impl Blob {
    fn contains(&self, y: f64, x: f64) -> bool {
        let u = (y - self.cy) / self.ay;
        let v = (x - self.cx) / self.ax;
        let rho = (u * u + v * v).sqrt();
        let theta = u.atan2(v);
        let edge = 1.0
            + self
                .wobble
                .iter()
                .enumerate()
                .map(|(i, (a, ph))| a * ((i + 2) as f64 * theta + ph).cos())
                .sum::<f64>();
        rho < edge
    }
}

fn generate_one(cfg: &SynthConfig, index: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed);
    rng.set_stream(index as u64);
    let s = cfg.image_size;
    let sf = s as f64;
    let n_blobs = rng.gen_range(cfg.blobs_min..=cfg.blobs_max);
    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| {
            let r1 = rng.gen_range(cfg.radius_min..=cfg.radius_max);
            let r2 = rng.gen_range(cfg.radius_min..=cfg.radius_max);
            // axis-aligned ellipse at one of four quarter-turn angles: odd turns swap the axes
            let quarter = rng.gen_range(0..4u32);
            let (ay, ax) = if quarter % 2 == 0 { (r1, r2) } else { (r2, r1) };
            let reach = ay.max(ax) * (1.0 + cfg.jitter);
            let cy = rng.gen_range(reach..=sf - reach);
            let cx = rng.gen_range(reach..=sf - reach);
            let mut wobble = [(0.0, 0.0); 3];
            for w in &mut wobble {
                *w = (rng.gen_range(0.0..=cfg.jitter / 3.0), rng.gen_range(0.0..2.0 * PI));
            }
            Blob { cy, cx, ay, ax, wobble }
        })
        .collect();
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let angle = rng.gen_range(0.0..2.0 * PI);
            let freq = rng.gen_range(1.0..4.0) * 2.0 * PI / sf;
            (
                freq * angle.cos(),
                freq * angle.sin(),
                rng.gen_range(0.0..2.0 * PI),
                cfg.texture_amp / 3.0,
            )
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).expect("finite sigma");
    let mask = BinaryMask::from_fn(s, s, |r, c| {
        let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
        blobs.iter().any(|b| b.contains(y, x))
    });
    let offset = cfg.fg_mean - cfg.bg_mean;
    let mut data = Vec::with_capacity(s * s);
    for r in 0..s {
        for c in 0..s {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            let texture: f64 = waves
                .iter()
                .map(|(ky, kx, ph, a)| a * (ky * y + kx * x + ph).sin())
                .sum();
            let fg = if mask.get(r, c) { offset } else { 0.0 };
            data.push((cfg.bg_mean + texture + fg + noise.sample(&mut rng)) as f32);
        }
    }
    Sample {
        id: format!("s{index:05}"),
        image: Tensor::from_vec(&[1, s, s], data).expect("sized"),
        mask,
        blobs: n_blobs,
    }
}

/// Builds the corpus. Each image has its own random stream, so the result
/// does not depend on how the work is split across threads.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    Ok((0..cfg.n_images)
        .into_par_iter()
        .map(|i| generate_one(cfg, i))
        .collect())
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffled `train_frac` share for training; the rest is halved into validation and test.
pub fn split(n: usize, train_frac: f64, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    idx.shuffle(&mut rng);
    let n_train = ((n as f64 * train_frac).round() as usize).min(n);
    let n_val = (n - n_train) / 2;
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Split { train: idx, val, test }
}

pub const RANGE_TAG: &str = "gerseg-range";

/// Writes a 16-bit binary PGM. Values are mapped affinely from `[lo, hi]`
/// onto `[0, 65535]` and the range is stored in a header comment.
pub fn write_pgm(path: &Path, h: usize, w: usize, values: &[f32], lo: f32, hi: f32) -> Result<()> {
    if values.len() != h * w {
        return Err(Error::Image(format!("{} values for a {h}x{w} image", values.len())));
    }
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Error::Image(format!("bad intensity range [{lo}, {hi}]")));
    }
    let mut out = format!("P5\n# {RANGE_TAG} {lo:e} {hi:e}\n{w} {h}\n65535\n").into_bytes();
    let span = (hi - lo) as f64;
    for &v in values {
        let q = if span > 0.0 {
            (((v - lo) as f64 / span) * 65535.0).round().clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        out.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes an image using its own min and max as the range.
pub fn write_image_pgm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (h, w) = (image.dim(-2), image.dim(-1));
    let lo = image.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = image.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let (lo, hi) = if image.is_empty() { (0.0, 0.0) } else { (lo, hi) };
    write_pgm(path, h, w, image.data(), lo, hi)
}

pub fn write_mask_pgm(path: &Path, mask: &BinaryMask) -> Result<()> {
    let v: Vec<f32> = mask.bits().iter().map(|&b| b as u8 as f32).collect();
    write_pgm(path, mask.height(), mask.width(), &v, 0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pgm {
    pub h: usize,
    pub w: usize,
    pub raw: Vec<u16>,
    pub range: Option<(f32, f32)>,
}

impl Pgm {
    /// Values mapped back through the stored range (or `[0, 1]` without one).
    pub fn values(&self) -> Vec<f32> {
        let (lo, hi) = self.range.unwrap_or((0.0, 1.0));
        let span = (hi - lo) as f64;
        self.raw
            .iter()
            .map(|&q| (lo as f64 + q as f64 / 65535.0 * span) as f32)
            .collect()
    }
}

pub fn read_pgm(path: &Path) -> Result<Pgm> {
    let bytes = fs::read(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    parse_pgm(&bytes).map_err(|e| match e {
        Error::Image(m) => Error::Image(format!("{}: {m}", path.display())),
        e => e,
    })
}

pub fn parse_pgm(bytes: &[u8]) -> Result<Pgm> {
    let bad = |m: &str| Error::Image(m.to_string());
    let mut pos = 0;
    let mut range = None;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        match bytes.get(pos) {
            None => return Err(bad("truncated header")),
            Some(b'#') => {
                let end = bytes[pos..]
                    .iter()
                    .position(|&b| b == b'\n')
                    .map(|e| pos + e)
                    .ok_or_else(|| bad("truncated header"))?;
                let line = String::from_utf8_lossy(&bytes[pos + 1..end]);
                let mut parts = line.split_whitespace();
                if parts.next() == Some(RANGE_TAG) {
                    let lo = parts.next().and_then(|s| s.parse().ok());
                    let hi = parts.next().and_then(|s| s.parse().ok());
                    match (lo, hi) {
                        (Some(lo), Some(hi)) => range = Some((lo, hi)),
                        _ => return Err(bad("malformed range comment")),
                    }
                }
                pos = end + 1;
            }
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            Some(_) => {
                let start = pos;
                while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#') {
                    pos += 1;
                }
                tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
            }
        }
    }
    if tokens[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("malformed header number"));
    let (w, h, maxval) = (num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?);
    if w == 0 || h == 0 {
        return Err(bad("empty image"));
    }
    if maxval != 65535 {
        return Err(bad("only 16-bit PGM (maxval 65535) is supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(bad("truncated header"));
    }
    pos += 1;
    let need = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(2))
        .ok_or_else(|| bad("image too large"))?;
    let body = &bytes[pos..];
    if body.len() != need {
        return Err(bad(&format!("expected {need} raster bytes, found {}", body.len())));
    }
    let raw = body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok(Pgm { h, w, raw, range })
}

pub fn read_image_pgm(path: &Path) -> Result<Tensor<f32>> {
    let p = read_pgm(path)?;
    Tensor::from_vec(&[1, p.h, p.w], p.values())
}

pub fn read_mask_pgm(path: &Path) -> Result<BinaryMask> {
    let p = read_pgm(path)?;
    BinaryMask::new(p.h, p.w, p.raw.iter().map(|&q| q > 32767).collect())
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Writes `dir/{train,val,test}/{id}.img.pgm`, `{id}.mask.pgm`, and `dir/manifest.tsv`.
pub fn write_corpus(dir: &Path, samples: &[Sample], parts: &Split) -> Result<()> {
    let mut manifest = String::from("id\tsplit\tblobs\n");
    for (name, idx) in SPLITS.iter().zip([&parts.train, &parts.val, &parts.test]) {
        let sub = dir.join(name);
        fs::create_dir_all(&sub)?;
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        for i in sorted {
            let s = &samples[i];
            write_image_pgm(&sub.join(format!("{}.img.pgm", s.id)), &s.image)?;
            write_mask_pgm(&sub.join(format!("{}.mask.pgm", s.id)), &s.mask)?;
            writeln!(manifest, "{}\t{name}\t{}", s.id, s.blobs).expect("string write");
        }
    }
    fs::write(dir.join("manifest.tsv"), manifest)?;
    Ok(())
}

/// Loads one split listed in `dir/manifest.tsv`, in manifest order.
pub fn read_split(dir: &Path, which: &str) -> Result<Vec<Sample>> {
    let path = dir.join("manifest.tsv");
    let manifest = fs::read_to_string(&path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in manifest.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, split, blobs] = fields[..] else {
            return Err(Error::Image(format!("manifest line {}: expected 3 fields", n + 1)));
        };
        if split != which {
            continue;
        }
        let sub = dir.join(split);
        out.push(Sample {
            id: id.to_string(),
            image: read_image_pgm(&sub.join(format!("{id}.img.pgm")))?,
            mask: read_mask_pgm(&sub.join(format!("{id}.mask.pgm")))?,
            blobs: blobs
                .parse()
                .map_err(|_| Error::Image(format!("manifest line {}: bad blob count", n + 1)))?,
        });
    }
    Ok(out)
}
