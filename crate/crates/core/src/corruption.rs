//! Common-corruption transforms, per-cell error tables and mCE.
//!
//! Every kind maps severities 1 to 5 onto one parameter through a fixed
//! table; severity 0 is the identity. Stochastic kinds draw the same random
//! numbers at every severity of a given image, and the spatial filters blend
//! a fixed-strength filter into the image with a growing weight. Either way
//! the pixel change grows with severity for every image, not only on average.
//!
//! | kind           | parameter                      | 1    | 2    | 3    | 4    | 5    |
//! |----------------|--------------------------------|------|------|------|------|------|
//! | gaussian_noise | noise std                      | 0.04 | 0.06 | 0.08 | 0.10 | 0.13 |
//! | shot_noise     | photons per unit intensity     | 60   | 25   | 12   | 5    | 3    |
//! | impulse_noise  | corrupted pixel fraction       | 0.01 | 0.02 | 0.04 | 0.07 | 0.10 |
//! | gaussian_blur  | weight of a std-1.5 blur       | 0.25 | 0.4  | 0.55 | 0.75 | 1    |
//! | contrast       | contrast factor                | 0.75 | 0.6  | 0.45 | 0.3  | 0.2  |
//! | brightness     | additive offset                | 0.05 | 0.1  | 0.15 | 0.2  | 0.3  |
//! | pixelate       | weight of 4x4 block averaging  | 0.25 | 0.4  | 0.55 | 0.75 | 1    |
//! | jpeg_like      | weight of step-0.25 quantizing | 0.25 | 0.4  | 0.55 | 0.75 | 1    |
//!
//! Shot noise uses the Gaussian approximation of Poisson photon counts.
//! `jpeg_like` quantizes 8x8 orthonormal DCT blocks with a step that grows
//! with frequency; it approximates JPEG without entropy coding or chroma
//! subsampling. At severity 5 pixelate is a pure block average, hence a
//! projection.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array3, ArrayView3, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::model::MaskableModel;
use crate::rng::SeedTree;
use crate::train;

pub const MAX_SEVERITY: u8 = 5;

const FILTER_WEIGHTS: [f64; 6] = [0.0, 0.25, 0.4, 0.55, 0.75, 1.0];
const BLUR_SIGMA: f64 = 1.5;
const PIXEL_BLOCK: usize = 4;
const JPEG_STEP: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    GaussianBlur,
    Contrast,
    Brightness,
    Pixelate,
    JpegLike,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 8] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::GaussianBlur,
        CorruptionKind::Contrast,
        CorruptionKind::Brightness,
        CorruptionKind::Pixelate,
        CorruptionKind::JpegLike,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::JpegLike => "jpeg_like",
        }
    }

    /// Table parameter for `severity`; severity 0 yields the identity value.
    pub fn parameter(self, severity: u8) -> Result<f64> {
        if severity > MAX_SEVERITY {
            return Err(Error::InvalidSeverity(severity));
        }
        let table: [f64; 6] = match self {
            CorruptionKind::GaussianNoise => [0.0, 0.04, 0.06, 0.08, 0.10, 0.13],
            CorruptionKind::ShotNoise => [f64::INFINITY, 60.0, 25.0, 12.0, 5.0, 3.0],
            CorruptionKind::ImpulseNoise => [0.0, 0.01, 0.02, 0.04, 0.07, 0.10],
            CorruptionKind::GaussianBlur | CorruptionKind::Pixelate | CorruptionKind::JpegLike => FILTER_WEIGHTS,
            CorruptionKind::Contrast => [1.0, 0.75, 0.6, 0.45, 0.3, 0.2],
            CorruptionKind::Brightness => [0.0, 0.05, 0.1, 0.15, 0.2, 0.3],
        };
        Ok(table[severity as usize])
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownCorruption(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Self {
        Self { kind, severity, seed }
    }

    /// Corrupts one CHW image, drawing from a stream fixed by the seed and kind.
    pub fn apply(&self, image: ArrayView3<'_, f32>) -> Result<Array3<f32>> {
        let mut rng = SeedTree::new(self.seed).stream(self.kind.name());
        corrupt(image, self.kind, self.severity, &mut rng)
    }
}

/// Corrupts a CHW image with pixel values in `[0, 1]`.
pub fn corrupt<R: Rng + ?Sized>(
    image: ArrayView3<'_, f32>,
    kind: CorruptionKind,
    severity: u8,
    rng: &mut R,
) -> Result<Array3<f32>> {
    let p = kind.parameter(severity)?;
    let mut out = image.to_owned();
    if severity == 0 {
        return Ok(out);
    }
    match kind {
        CorruptionKind::GaussianNoise => {
            out.mapv_inplace(|v| v + (p * rng.sample::<f64, _>(StandardNormal)) as f32);
        }
        CorruptionKind::ShotNoise => {
            out.mapv_inplace(|v| {
                let z: f64 = rng.sample(StandardNormal);
                v + (z * (v.max(0.0) as f64 / p).sqrt()) as f32
            });
        }
        CorruptionKind::ImpulseNoise => {
            out.mapv_inplace(|v| {
                let hit: f64 = rng.random();
                let salt: bool = rng.random();
                if hit < p {
                    if salt {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    v
                }
            });
        }
        CorruptionKind::GaussianBlur => blend(&mut out, &gaussian_blur(image, BLUR_SIGMA), p),
        CorruptionKind::Contrast => {
            let mean = image.mean().unwrap_or(0.0) as f64;
            out.mapv_inplace(|v| (mean + p * (v as f64 - mean)) as f32);
        }
        CorruptionKind::Brightness => out.mapv_inplace(|v| v + p as f32),
        CorruptionKind::Pixelate => {
            let mut target = out.clone();
            pixelate(&mut target, PIXEL_BLOCK);
            blend(&mut out, &target, p);
        }
        CorruptionKind::JpegLike => {
            let mut target = out.clone();
            jpeg_like(&mut target, JPEG_STEP);
            blend(&mut out, &target, p);
        }
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(out)
}

fn blend(image: &mut Array3<f32>, target: &Array3<f32>, weight: f64) {
    if weight == 1.0 {
        image.assign(target);
        return;
    }
    let w = weight as f32;
    ndarray::Zip::from(image).and(target).for_each(|v, &t| *v += w * (t - *v));
}

fn gaussian_blur(image: ArrayView3<'_, f32>, sigma: f64) -> Array3<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (c, h, w) = image.dim();
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, k) in kernel.iter().enumerate() {
                    acc += k * image[(ch, y, clampi(x as isize + j as isize - radius, w))] as f64;
                }
                tmp[(ch, y, x)] = acc as f32;
            }
        }
    }
    let mut out = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, k) in kernel.iter().enumerate() {
                    acc += k * tmp[(ch, clampi(y as isize + j as isize - radius, h), x)] as f64;
                }
                out[(ch, y, x)] = acc as f32;
            }
        }
    }
    out
}

/// Replaces every `block` x `block` cell (smaller at the edges) by its mean.
fn pixelate(image: &mut Array3<f32>, block: usize) {
    let (c, h, w) = image.dim();
    for ch in 0..c {
        for y0 in (0..h).step_by(block) {
            for x0 in (0..w).step_by(block) {
                let (y1, x1) = ((y0 + block).min(h), (x0 + block).min(w));
                let mut cell = image.slice_mut(ndarray::s![ch, y0..y1, x0..x1]);
                let mean = (cell.iter().map(|&v| v as f64).sum::<f64>() / cell.len() as f64) as f32;
                cell.fill(mean);
            }
        }
    }
}

const DCT_N: usize = 8;

fn dct_basis() -> [[f64; DCT_N]; DCT_N] {
    let mut b = [[0.0; DCT_N]; DCT_N];
    for (u, row) in b.iter_mut().enumerate() {
        let scale = if u == 0 { (1.0 / DCT_N as f64).sqrt() } else { (2.0 / DCT_N as f64).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = scale * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / (2 * DCT_N) as f64).cos();
        }
    }
    b
}

fn jpeg_like(image: &mut Array3<f32>, step: f64) {
    let basis = dct_basis();
    let (c, h, w) = image.dim();
    let mut block = [[0.0f64; DCT_N]; DCT_N];
    for ch in 0..c {
        for by in (0..h).step_by(DCT_N) {
            for bx in (0..w).step_by(DCT_N) {
                // edge blocks are padded by replication
                for (i, row) in block.iter_mut().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = image[(ch, (by + i).min(h - 1), (bx + j).min(w - 1))] as f64 - 0.5;
                    }
                }
                let coef = transform(&basis, &block, false);
                let mut q = [[0.0f64; DCT_N]; DCT_N];
                for u in 0..DCT_N {
                    for v in 0..DCT_N {
                        let s = step * (1.0 + (u + v) as f64);
                        q[u][v] = (coef[u][v] / s).round() * s;
                    }
                }
                let back = transform(&basis, &q, true);
                for (i, row) in back.iter().enumerate().take(h - by) {
                    for (j, v) in row.iter().enumerate().take(w - bx) {
                        image[(ch, by + i, bx + j)] = (v + 0.5) as f32;
                    }
                }
            }
        }
    }
}

/// Separable 2-D DCT-II (or its inverse) of one block.
fn transform(b: &[[f64; DCT_N]; DCT_N], x: &[[f64; DCT_N]; DCT_N], inverse: bool) -> [[f64; DCT_N]; DCT_N] {
    let coef = |k: usize, n: usize| if inverse { b[n][k] } else { b[k][n] };
    let mut tmp = [[0.0; DCT_N]; DCT_N];
    for i in 0..DCT_N {
        for k in 0..DCT_N {
            tmp[i][k] = (0..DCT_N).map(|n| coef(k, n) * x[i][n]).sum();
        }
    }
    let mut out = [[0.0; DCT_N]; DCT_N];
    for k in 0..DCT_N {
        for j in 0..DCT_N {
            out[k][j] = (0..DCT_N).map(|n| coef(k, n) * tmp[n][j]).sum();
        }
    }
    out
}

/// Corrupts a whole split. Image `i` draws from a stream keyed by the seed,
/// the kind and `i` only, so the severities of one kind share their draws.
pub fn corrupt_split(split: &Split, kind: CorruptionKind, severity: u8, seed: u64) -> Result<Split> {
    kind.parameter(severity)?;
    let seeds = SeedTree::new(seed).child(kind.name());
    let mut images = split.images.clone();
    for (i, mut img) in images.axis_iter_mut(Axis(0)).enumerate() {
        let mut rng = seeds.step_stream("image", i as u64);
        let out = corrupt(img.view(), kind, severity, &mut rng)?;
        img.assign(&out);
    }
    Ok(Split {
        images,
        labels: split.labels.clone(),
    })
}

/// Every kind at every severity.
pub fn full_suite() -> Vec<(CorruptionKind, u8)> {
    CorruptionKind::ALL
        .into_iter()
        .flat_map(|k| (1..=MAX_SEVERITY).map(move |s| (k, s)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionCell {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionTable {
    pub clean_error: f64,
    pub cells: Vec<CorruptionCell>,
}

impl CorruptionTable {
    /// Unweighted mean over cells, or the clean error when there are none.
    pub fn mean_error(&self) -> f64 {
        if self.cells.is_empty() {
            return self.clean_error;
        }
        self.cells.iter().map(|c| c.error).sum::<f64>() / self.cells.len() as f64
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("kind\tseverity\terror\n");
        s.push_str(&format!("clean\t0\t{:.4}\n", self.clean_error));
        for c in &self.cells {
            s.push_str(&format!("{}\t{}\t{:.4}\n", c.kind, c.severity, c.error));
        }
        s.push_str(&format!("mean\t-\t{:.4}\n", self.mean_error()));
        s
    }
}

/// Error (percent) of a frozen model on each corrupted cell of `split`.
pub fn evaluate_corrupted(
    model: &MaskableModel,
    split: &Split,
    cells: &[(CorruptionKind, u8)],
    seed: u64,
) -> Result<CorruptionTable> {
    let clean_error = train::clean_error(model, split, None)?;
    let mut out = Vec::with_capacity(cells.len());
    for &(kind, severity) in cells {
        let corrupted = corrupt_split(split, kind, severity, seed)?;
        out.push(CorruptionCell {
            kind,
            severity,
            error: train::clean_error(model, &corrupted, None)?,
        });
    }
    Ok(CorruptionTable { clean_error, cells: out })
}

/// Same as [`evaluate_corrupted`] over pre-corrupted cells.
pub fn evaluate_cached(model: &MaskableModel, clean: &Split, cache: &CorruptionCache) -> Result<CorruptionTable> {
    let clean_error = train::clean_error(model, clean, None)?;
    let cells = cache
        .entries
        .iter()
        .map(|e| {
            Ok(CorruptionCell {
                kind: e.kind,
                severity: e.severity,
                error: train::clean_error(model, &e.split, None)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(CorruptionTable { clean_error, cells })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MceReport {
    /// Corruption error per kind, normalized by the baseline.
    pub per_kind: BTreeMap<CorruptionKind, f64>,
    pub mce: f64,
    /// Checkpoint hash of the baseline model, when known.
    pub baseline: Option<String>,
}

impl MceReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(b) = &self.baseline {
            s.push_str(&format!("# baseline {b}\n"));
        }
        s.push_str("kind\tce\n");
        for (k, v) in &self.per_kind {
            s.push_str(&format!("{k}\t{v:.4}\n"));
        }
        s.push_str(&format!("mce\t{:.4}\n", self.mce));
        s
    }
}

/// `CE_k = 100 * sum_s E[k,s] / sum_s B[k,s]`, averaged over kinds.
pub fn mean_corruption_error(model: &[CorruptionCell], baseline: &[CorruptionCell]) -> Result<MceReport> {
    if model.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let base: BTreeMap<(CorruptionKind, u8), f64> =
        baseline.iter().map(|c| ((c.kind, c.severity), c.error)).collect();
    let mut sums: BTreeMap<CorruptionKind, (f64, f64)> = BTreeMap::new();
    for c in model {
        let b = *base.get(&(c.kind, c.severity)).ok_or_else(|| Error::MissingCell {
            kind: c.kind.to_string(),
            severity: c.severity,
        })?;
        if b <= 0.0 {
            return Err(Error::ZeroBaseline {
                kind: c.kind.to_string(),
                severity: c.severity,
            });
        }
        let e = sums.entry(c.kind).or_default();
        e.0 += c.error;
        e.1 += b;
    }
    let per_kind: BTreeMap<CorruptionKind, f64> = sums.into_iter().map(|(k, (e, b))| (k, 100.0 * e / b)).collect();
    let mce = per_kind.values().sum::<f64>() / per_kind.len() as f64;
    Ok(MceReport {
        per_kind,
        mce,
        baseline: None,
    })
}

const CACHE_MAGIC: &[u8; 8] = b"EWSCORR\0";
const CACHE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CachedCell {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub split: Split,
}

/// Corrupted copies of one split, replayable from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionCache {
    pub seed: u64,
    pub entries: Vec<CachedCell>,
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    seed: u64,
    shape: [usize; 3],
    count: usize,
    cells: Vec<(CorruptionKind, u8)>,
}

impl CorruptionCache {
    pub fn build(split: &Split, cells: &[(CorruptionKind, u8)], seed: u64) -> Result<Self> {
        let entries = cells
            .iter()
            .map(|&(kind, severity)| {
                Ok(CachedCell {
                    kind,
                    severity,
                    split: corrupt_split(split, kind, severity, seed)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { seed, entries })
    }

    /// Layout: magic, version, JSON header, shared `u32` labels, then the
    /// `f32` pixels of each cell in header order. Image `i` of every cell is
    /// the corrupted copy of source image `i`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let first = self
            .entries
            .first()
            .ok_or_else(|| Error::Dataset("cannot cache an empty corruption set".into()))?;
        let (n, c, h, w) = first.split.images.dim();
        let header = CacheHeader {
            seed: self.seed,
            shape: [c, h, w],
            count: n,
            cells: self.entries.iter().map(|e| (e.kind, e.severity)).collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for &l in &first.split.labels {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
        for e in &self.entries {
            if e.split.images.dim() != (n, c, h, w) {
                return Err(Error::Dataset("cached cells must share one shape".into()));
            }
            for &v in e.split.images.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Dataset(format!("{}: {m}", path.display()));
        if bytes.len() < 20 || &bytes[..8] != CACHE_MAGIC {
            return Err(bad("not a corruption cache"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CACHE_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header: CacheHeader =
            serde_json::from_slice(bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?)?;
        let [c, h, w] = header.shape;
        let n = header.count;
        let mut cursor = 20 + hlen;
        let labels: Vec<usize> = bytes
            .get(cursor..cursor + 4 * n)
            .ok_or_else(|| bad("truncated labels"))?
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .collect();
        cursor += 4 * n;
        let per_cell = 4 * n * c * h * w;
        let mut entries = Vec::with_capacity(header.cells.len());
        for (kind, severity) in header.cells {
            let raw = bytes.get(cursor..cursor + per_cell).ok_or_else(|| bad("truncated pixels"))?;
            let pixels = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            let images = ndarray::Array4::from_shape_vec((n, c, h, w), pixels).map_err(|e| bad(&e.to_string()))?;
            entries.push(CachedCell {
                kind,
                severity,
                split: Split {
                    images,
                    labels: labels.clone(),
                },
            });
            cursor += per_cell;
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            seed: header.seed,
            entries,
        })
    }
}
