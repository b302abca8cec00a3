//! Image datasets: a seeded synthetic generator, a packed binary format,
//! class-folder ingestion and seed-deterministic batching.
//!
//! Images are stored NCHW in `[0, 1]`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array3, Array4, ArrayViewMut3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::SeedTree;
use crate::topology::InputShape;

const PACKED_MAGIC: &[u8; 8] = b"EWSDATA\0";
const PACKED_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub images: Array4<f32>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn gather(&self, indices: &[usize]) -> (Array4<f32>, Vec<usize>) {
        let x = self.images.select(Axis(0), indices);
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Split {
        let n = n.min(self.len());
        Split {
            images: self.images.slice(s![..n, .., .., ..]).to_owned(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

#[derive(Serialize, Deserialize)]
struct PackedHeader {
    class_names: Vec<String>,
    channels: usize,
    height: usize,
    width: usize,
    splits: [usize; 3],
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn input_shape(&self) -> InputShape {
        let (_, c, h, w) = self.train.images.dim();
        InputShape {
            height: h,
            width: w,
            channels: c,
        }
    }

    fn splits(&self) -> [&Split; 3] {
        [&self.train, &self.val, &self.test]
    }

    /// SHA-256 over class names, labels and image bytes of every split.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for name in &self.class_names {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
        }
        for split in self.splits() {
            for d in split.images.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for &l in &split.labels {
                hasher.update((l as u32).to_le_bytes());
            }
            for &v in split.images.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Writes the packed binary form: magic, version, a JSON header and then
    /// per split the `u32` labels followed by the `f32` pixels, little endian.
    pub fn write_packed(&self, path: &Path) -> Result<()> {
        let shape = self.input_shape();
        let header = PackedHeader {
            class_names: self.class_names.clone(),
            channels: shape.channels,
            height: shape.height,
            width: shape.width,
            splits: [self.train.len(), self.val.len(), self.test.len()],
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(PACKED_MAGIC);
        out.extend_from_slice(&PACKED_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for split in self.splits() {
            for &l in &split.labels {
                out.extend_from_slice(&(l as u32).to_le_bytes());
            }
            for &v in split.images.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn read_packed(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |msg: &str| Error::Dataset(format!("{}: {msg}", path.display()));
        if bytes.len() < 20 || &bytes[..8] != PACKED_MAGIC {
            return Err(bad("not a packed dataset"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != PACKED_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header: PackedHeader =
            serde_json::from_slice(bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?)?;
        let mut cursor = 20 + hlen;
        let per_image = header.channels * header.height * header.width;
        let mut splits = Vec::with_capacity(3);
        for &n in &header.splits {
            let need = n * 4 + n * per_image * 4;
            let chunk = bytes.get(cursor..cursor + need).ok_or_else(|| bad("truncated data"))?;
            let labels: Vec<usize> = chunk[..n * 4]
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
                .collect();
            if let Some(&l) = labels.iter().find(|&&l| l >= header.class_names.len()) {
                return Err(bad(&format!("label {l} out of range")));
            }
            let pixels: Vec<f32> = chunk[n * 4..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let images = Array4::from_shape_vec((n, header.channels, header.height, header.width), pixels)
                .map_err(|e| bad(&e.to_string()))?;
            splits.push(Split { images, labels });
            cursor += need;
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let test = splits.pop().unwrap();
        let val = splits.pop().unwrap();
        let train = splits.pop().unwrap();
        Ok(Self {
            class_names: header.class_names,
            train,
            val,
            test,
        })
    }

    /// Reads `root/<class>/<image>` into the given shape, resizing with a
    /// triangle filter. Each class's files are shuffled with `seed` and split
    /// into test, val and train portions by the given fractions.
    pub fn from_class_folders(
        root: &Path,
        shape: InputShape,
        val_fraction: f64,
        test_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut classes: Vec<_> = fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.path())
            .collect();
        classes.sort();
        if classes.is_empty() {
            return Err(Error::Dataset(format!("{}: no class folders", root.display())));
        }
        let mut problems = Vec::new();
        let mut class_names = Vec::new();
        let mut per_split: [Vec<(Array3<f32>, usize)>; 3] = Default::default();
        let seeds = SeedTree::new(seed);
        for (label, dir) in classes.iter().enumerate() {
            let name = dir.file_name().unwrap().to_string_lossy().into_owned();
            let mut files: Vec<_> = fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            if files.is_empty() {
                problems.push(format!("class `{name}` has no images"));
            }
            let mut images = Vec::new();
            for file in &files {
                match load_image(file, shape) {
                    Ok(img) => images.push(img),
                    Err(e) => problems.push(format!("{}: {e}", file.display())),
                }
            }
            images.shuffle(&mut seeds.stream(&format!("split/{name}")));
            let n = images.len();
            let n_test = (n as f64 * test_fraction).round() as usize;
            let n_val = (n as f64 * val_fraction).round() as usize;
            for (i, img) in images.into_iter().enumerate() {
                let which = if i < n_test {
                    2
                } else if i < n_test + n_val {
                    1
                } else {
                    0
                };
                per_split[which].push((img, label));
            }
            class_names.push(name);
        }
        if !problems.is_empty() {
            return Err(Error::Dataset(problems.join("\n")));
        }
        let [train, val, test] = per_split.map(|items| stack(items, shape));
        Ok(Self {
            class_names,
            train,
            val,
            test,
        })
    }
}

fn load_image(path: &Path, shape: InputShape) -> std::result::Result<Array3<f32>, String> {
    let img = image::open(path).map_err(|e| e.to_string())?;
    let img = img.resize_exact(shape.width as u32, shape.height as u32, image::imageops::FilterType::Triangle);
    let mut out = Array3::zeros((shape.channels, shape.height, shape.width));
    match shape.channels {
        1 => {
            let g = img.to_luma8();
            for (x, y, p) in g.enumerate_pixels() {
                out[(0, y as usize, x as usize)] = p.0[0] as f32 / 255.0;
            }
        }
        3 => {
            let rgb = img.to_rgb8();
            for (x, y, p) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    out[(c, y as usize, x as usize)] = p.0[c] as f32 / 255.0;
                }
            }
        }
        c => return Err(format!("unsupported channel count {c}")),
    }
    Ok(out)
}

fn stack(items: Vec<(Array3<f32>, usize)>, shape: InputShape) -> Split {
    let mut images = Array4::zeros((items.len(), shape.channels, shape.height, shape.width));
    let mut labels = Vec::with_capacity(items.len());
    for (i, (img, label)) in items.into_iter().enumerate() {
        images.index_axis_mut(Axis(0), i).assign(&img);
        labels.push(label);
    }
    Split { images, labels }
}

/// Gaussian-blob classes: each class is a fixed arrangement of coloured
/// blobs; samples jitter the blob positions and strengths and add pixel noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub height: usize,
    pub width: usize,
    pub blobs: usize,
    /// Maximum blob displacement in pixels.
    pub jitter: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            train: 2000,
            val: 500,
            test: 1000,
            height: 16,
            width: 16,
            blobs: 3,
            jitter: 6.0,
            noise: 0.3,
            seed: 0,
        }
    }
}

struct Blob {
    cy: f64,
    cx: f64,
    sigma: f64,
    color: [f64; 3],
}

pub fn synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.classes < 2 || cfg.height == 0 || cfg.width == 0 || cfg.blobs == 0 {
        return Err(Error::Dataset("synthetic data needs ≥2 classes, ≥1 blob and a non-empty image".into()));
    }
    let seeds = SeedTree::new(cfg.seed).child("synthetic");
    let mut proto_rng = seeds.stream("prototypes");
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let prototypes: Vec<Vec<Blob>> = (0..cfg.classes)
        .map(|_| {
            (0..cfg.blobs)
                .map(|_| Blob {
                    cy: proto_rng.random_range(0.2 * h..0.8 * h),
                    cx: proto_rng.random_range(0.2 * w..0.8 * w),
                    sigma: proto_rng.random_range(0.08 * h..0.2 * h),
                    color: [
                        proto_rng.random_range(-0.45..0.45),
                        proto_rng.random_range(-0.45..0.45),
                        proto_rng.random_range(-0.45..0.45),
                    ],
                })
                .collect()
        })
        .collect();
    let render = |n: usize, label: &str| -> Split {
        let mut rng = seeds.stream(label);
        let noise = Normal::new(0.0, cfg.noise.max(0.0)).unwrap();
        let mut images = Array4::zeros((n, 3, cfg.height, cfg.width));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % cfg.classes;
            labels.push(class);
            let mut img = images.index_axis_mut(Axis(0), i);
            img.fill(0.5);
            for blob in &prototypes[class] {
                let dy = rng.random_range(-cfg.jitter..=cfg.jitter);
                let dx = rng.random_range(-cfg.jitter..=cfg.jitter);
                let gain = rng.random_range(0.7..1.3);
                let inv = 1.0 / (2.0 * blob.sigma * blob.sigma);
                for y in 0..cfg.height {
                    for x in 0..cfg.width {
                        let d2 = (y as f64 - blob.cy - dy).powi(2) + (x as f64 - blob.cx - dx).powi(2);
                        let g = gain * (-d2 * inv).exp();
                        for c in 0..3 {
                            img[(c, y, x)] += (g * blob.color[c]) as f32;
                        }
                    }
                }
            }
            img.mapv_inplace(|v| (v + noise.sample(&mut rng) as f32).clamp(0.0, 1.0));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Split {
            images: images.select(Axis(0), &order),
            labels: order.iter().map(|&i| labels[i]).collect(),
        }
    };
    Ok(Dataset {
        class_names: (0..cfg.classes).map(|c| format!("class{c}")).collect(),
        train: render(cfg.train, "train"),
        val: render(cfg.val, "val"),
        test: render(cfg.test, "test"),
    })
}

/// Mini-batch index lists for one epoch: a permutation drawn from the
/// epoch's own stream, cut into full batches (a trailing partial batch is
/// dropped).
pub fn epoch_batches(n: usize, batch_size: usize, epoch: u64, seeds: &SeedTree) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeds.step_stream("batches", epoch));
    order
        .chunks_exact(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect()
}

/// An image-to-image transform applied to training batches before they reach
/// the model.
pub trait Augmentation: Send + Sync {
    fn name(&self) -> &str;
    fn apply(&self, image: ArrayViewMut3<'_, f32>, rng: &mut dyn rand::RngCore);
}

pub struct NoAugmentation;

impl Augmentation for NoAugmentation {
    fn name(&self) -> &str {
        "none"
    }

    fn apply(&self, _image: ArrayViewMut3<'_, f32>, _rng: &mut dyn rand::RngCore) {}
}

/// Random horizontal flip and a random shift of up to `pad` pixels with
/// edge replication.
pub struct FlipShift {
    pub pad: usize,
}

impl Augmentation for FlipShift {
    fn name(&self) -> &str {
        "flip_shift"
    }

    fn apply(&self, mut image: ArrayViewMut3<'_, f32>, rng: &mut dyn rand::RngCore) {
        let (_, h, w) = image.dim();
        let flip = rng.random_bool(0.5);
        let p = self.pad as i64;
        let dy = rng.random_range(-p..=p);
        let dx = rng.random_range(-p..=p);
        let src = image.to_owned();
        for ((c, y, x), v) in image.indexed_iter_mut() {
            let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
            let mut sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
            if flip {
                sx = w - 1 - sx;
            }
            *v = src[(c, sy, sx)];
        }
    }
}

pub fn augmentation_by_name(name: &str) -> Result<Box<dyn Augmentation>> {
    match name {
        "none" => Ok(Box::new(NoAugmentation)),
        "flip_shift" => Ok(Box::new(FlipShift { pad: 2 })),
        other => Err(Error::Config(vec![format!("unknown augmentation `{other}`")])),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            classes: 4,
            train: 40,
            val: 8,
            test: 12,
            height: 8,
            width: 8,
            seed: 7,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let cfg = SyntheticConfig {
            classes: 10,
            train: 1000,
            val: 0,
            test: 0,
            seed: 7,
            ..SyntheticConfig::default()
        };
        let a = synthetic(&cfg).unwrap();
        let b = synthetic(&cfg).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        let other = synthetic(&SyntheticConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.content_hash(), other.content_hash());
        assert!(a.train.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
        for c in 0..10 {
            assert_eq!(a.train.labels.iter().filter(|&&l| l == c).count(), 100);
        }
    }

    #[test]
    fn packed_round_trip() {
        let data = synthetic(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        data.write_packed(&path).unwrap();
        let back = Dataset::read_packed(&path).unwrap();
        assert_eq!(data, back);
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, bytes).unwrap();
        assert!(Dataset::read_packed(&path).is_err());
    }

    #[test]
    fn class_folders() {
        let dir = tempfile::tempdir().unwrap();
        for (class, shade) in [("cat", 30u8), ("dog", 220u8)] {
            fs::create_dir(dir.path().join(class)).unwrap();
            for i in 0..5 {
                let img = image::RgbImage::from_pixel(12, 10, image::Rgb([shade, shade, i * 10]));
                img.save(dir.path().join(class).join(format!("{i}.png"))).unwrap();
            }
        }
        let shape = InputShape {
            height: 8,
            width: 8,
            channels: 3,
        };
        let data = Dataset::from_class_folders(dir.path(), shape, 0.2, 0.2, 1).unwrap();
        assert_eq!(data.class_names, ["cat", "dog"]);
        assert_eq!((data.train.len(), data.val.len(), data.test.len()), (6, 2, 2));
        for (i, &label) in data.train.labels.iter().enumerate() {
            let shade = if label == 0 { 30.0 } else { 220.0 };
            assert!((data.train.images[(i, 0, 3, 3)] - shade / 255.0).abs() < 1e-6);
        }
        let again = Dataset::from_class_folders(dir.path(), shape, 0.2, 0.2, 1).unwrap();
        assert_eq!(data, again);

        fs::create_dir(dir.path().join("empty")).unwrap();
        let err = Dataset::from_class_folders(dir.path(), shape, 0.2, 0.2, 1).unwrap_err();
        assert!(err.to_string().contains("empty"), "{err}");

        fs::remove_dir(dir.path().join("empty")).unwrap();
        fs::write(dir.path().join("dog").join("broken.png"), b"nope").unwrap();
        let err = Dataset::from_class_folders(dir.path(), shape, 0.2, 0.2, 1).unwrap_err();
        assert!(err.to_string().contains("broken.png"), "{err}");
    }

    #[test]
    fn batches_cover_epoch_once() {
        let seeds = SeedTree::new(3);
        let batches = epoch_batches(10, 3, 0, &seeds);
        assert_eq!(batches.len(), 3);
        let mut seen: Vec<usize> = batches.concat();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert_eq!(batches, epoch_batches(10, 3, 0, &seeds));
        assert_ne!(batches, epoch_batches(10, 3, 1, &seeds));
    }

    #[test]
    fn flip_shift_keeps_pixel_range() {
        let data = synthetic(&small()).unwrap();
        let mut img = data.train.images.index_axis(Axis(0), 0).to_owned();
        let aug = augmentation_by_name("flip_shift").unwrap();
        aug.apply(img.view_mut(), &mut SeedTree::new(0).stream("a"));
        assert!(img.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(augmentation_by_name("mixup").is_err());
    }
}
