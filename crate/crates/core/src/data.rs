//! Image I/O, synthetic AWGN pairs and the patch sampler.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Shape, Tensor};

pub const IMAGE_EXTENSIONS: [&str; 4] = ["png", "pgm", "ppm", "pnm"];

fn image_error(path: &Path, e: ImageError) -> Error {
    match e {
        ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// Reads an 8-bit gray or RGB image as a `1xCxHxW` tensor in `[0, 1]`.
/// Alpha channels are dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_error(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (c, bytes) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw()),
        DynamicImage::ImageLumaA8(_) => (1, img.to_luma8().into_raw()),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw()),
        DynamicImage::ImageRgba8(_) => (3, img.to_rgb8().into_raw()),
        other => {
            return Err(Error::Format(format!(
                "{}: unsupported pixel layout {:?} (8-bit gray or RGB only)",
                path.display(),
                other.color()
            )))
        }
    };
    let mut t = Tensor::zeros([1, c, h, w]);
    let plane = h * w;
    let out = t.data_mut();
    for (i, px) in bytes.chunks_exact(c).enumerate() {
        for (ch, &b) in px.iter().enumerate() {
            out[ch * plane + i] = b as f32 / 255.0;
        }
    }
    Ok(t)
}

/// Clamps to `[0, 1]` and rounds half up to 8 bits.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Writes a `1xCxHxW` tensor (C = 1 or 3); format follows the extension.
pub fn save_image(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let s = t.shape();
    if s.n != 1 || (s.c != 1 && s.c != 3) {
        return Err(shape_err!("cannot save {s} as an image (need 1x1xHxW or 1x3xHxW)"));
    }
    let plane = s.plane();
    let d = t.data();
    let mut bytes = vec![0u8; plane * s.c];
    for i in 0..plane {
        for ch in 0..s.c {
            bytes[i * s.c + ch] = quantize(d[ch * plane + i]);
        }
    }
    let color = if s.c == 1 { image::ExtendedColorType::L8 } else { image::ExtendedColorType::Rgb8 };
    image::save_buffer(path, &bytes, s.w as u32, s.h as u32, color).map_err(|e| image_error(path, e))
}

/// `clean + n` with `n ~ N(0, (sigma/255)^2)` iid; not clamped.
pub fn add_awgn(clean: &Tensor, sigma: f32, seed: u64) -> Tensor {
    if sigma == 0.0 {
        return clean.clone();
    }
    let std = sigma as f64 / 255.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = clean.clone();
    for v in out.data_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v += (z * std) as f32;
    }
    out
}

/// BT.601 luma of an RGB tensor; single-channel input passes through.
pub fn to_grayscale(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    match s.c {
        1 => Ok(t.clone()),
        3 => {
            let plane = s.plane();
            let mut out = Tensor::zeros([s.n, 1, s.h, s.w]);
            for n in 0..s.n {
                let src = t.item_slice(n);
                let dst = &mut out.data_mut()[n * plane..(n + 1) * plane];
                for i in 0..plane {
                    dst[i] = 0.299 * src[i] + 0.587 * src[plane + i] + 0.114 * src[2 * plane + i];
                }
            }
            Ok(out)
        }
        c => Err(shape_err!("grayscale conversion needs 1 or 3 channels, got {c}")),
    }
}

/// Mirror index without repeating the edge sample.
fn reflect_index(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let r = i % period;
    if r < len {
        r
    } else {
        period - r
    }
}

/// Extends the bottom and right edges by reflection to `h x w`.
pub fn reflect_pad(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = t.shape();
    if h < s.h || w < s.w {
        return Err(shape_err!("reflect pad target {h}x{w} smaller than {s}"));
    }
    let mut out = Tensor::zeros([s.n, s.c, h, w]);
    let src = t.data();
    let dst = out.data_mut();
    let mut o = 0;
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for y in 0..h {
            let row = base + reflect_index(y, s.h) * s.w;
            for x in 0..w {
                dst[o] = src[row + reflect_index(x, s.w)];
                o += 1;
            }
        }
    }
    Ok(out)
}

/// Window of extent `h x w` starting at `(y0, x0)`.
pub fn crop_at(t: &Tensor, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor> {
    let s = t.shape();
    if y0 + h > s.h || x0 + w > s.w {
        return Err(shape_err!("crop {h}x{w} at ({y0}, {x0}) exceeds {s}"));
    }
    let mut out = Vec::with_capacity(s.n * s.c * h * w);
    let src = t.data();
    for nc in 0..s.n * s.c {
        for y in y0..y0 + h {
            let row = nc * s.plane() + y * s.w;
            out.extend_from_slice(&src[row + x0..row + x0 + w]);
        }
    }
    Tensor::from_vec([s.n, s.c, h, w], out)
}

/// Top-left `h x w` window.
pub fn crop(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    crop_at(t, 0, 0, h, w)
}

/// Optional horizontal flip followed by `quarter_turns` counter-clockwise
/// rotations. Rotation requires square planes.
pub fn augment(t: &Tensor, flip: bool, quarter_turns: u8) -> Result<Tensor> {
    let s = t.shape();
    let turns = quarter_turns % 4;
    if turns % 2 == 1 && s.h != s.w {
        return Err(shape_err!("odd quarter turns need square planes, got {s}"));
    }
    let (h, w) = (s.h, s.w);
    let mut out = Tensor::zeros(s);
    let src = t.data();
    let dst = out.data_mut();
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for i in 0..h {
            for j in 0..w {
                // source position in the flipped plane
                let (si, sj) = match turns {
                    0 => (i, j),
                    1 => (j, w - 1 - i),
                    2 => (h - 1 - i, w - 1 - j),
                    _ => (h - 1 - j, i),
                };
                let sj = if flip { w - 1 - sj } else { sj };
                dst[base + i * w + j] = src[base + si * w + sj];
            }
        }
    }
    Ok(out)
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for one named item, independent of which other items exist.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    mix64(seed ^ fnv1a(name.as_bytes()))
}

/// Seed for one step of a seeded stream.
pub fn step_seed(seed: u64, step: u64) -> u64 {
    mix64(mix64(seed) ^ step)
}

/// Supported images in `dir`, sorted by file name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ok = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if ok && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Paths listed one per line, relative to the manifest's directory.
/// Blank lines and `#` comments are skipped.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().unwrap_or(Path::new("."));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| root.join(l))
        .collect())
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[impl AsRef<Path>]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for e in entries {
        text.push_str(&e.as_ref().to_string_lossy());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A clean image and its synthetic noisy counterpart.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub clean: Tensor,
    pub noisy: Tensor,
    /// Noise std in 8-bit units.
    pub sigma: f32,
    pub seed: u64,
    pub source_path: String,
}

impl ImageSample {
    pub fn synthesize(clean: Tensor, sigma: f32, seed: u64, source_path: impl Into<String>) -> Self {
        let noisy = add_awgn(&clean, sigma, seed);
        ImageSample {
            clean,
            noisy,
            sigma,
            seed,
            source_path: source_path.into(),
        }
    }

    /// Same pair with the noisy member clamped to `[0, 1]`.
    pub fn clamped(mut self) -> Self {
        self.noisy = self.noisy.clamp(0.0, 1.0);
        self
    }

    pub fn shape(&self) -> Shape {
        self.clean.shape()
    }
}

/// Loads images and pairs each with noise seeded by `(seed, file name)`.
pub fn synthesize_paths(paths: &[PathBuf], sigma: f32, seed: u64, grayscale: bool) -> Result<Vec<ImageSample>> {
    paths
        .iter()
        .map(|p| {
            let mut clean = load_image(p)?;
            if grayscale {
                clean = to_grayscale(&clean)?;
            }
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(ImageSample::synthesize(clean, sigma, derive_seed(seed, &name), p.display().to_string()))
        })
        .collect()
}

pub fn synthesize_dir(dir: impl AsRef<Path>, sigma: f32, seed: u64, grayscale: bool) -> Result<Vec<ImageSample>> {
    let dir = dir.as_ref();
    let paths = list_images(dir)?;
    if paths.is_empty() {
        return Err(Error::Argument(format!("no images in {}", dir.display())));
    }
    synthesize_paths(&paths, sigma, seed, grayscale)
}

/// Provenance of one patch in a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    pub image: usize,
    pub y: usize,
    pub x: usize,
    pub flip: bool,
    pub quarter_turns: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch {
    pub clean: Tensor,
    pub noisy: Tensor,
    pub records: Vec<Augmentation>,
}

/// Random crops with a flip coin and a quarter-turn rotation, applied
/// identically to both members of each pair.
pub fn sample_patch_batch(pairs: &[ImageSample], patch: usize, batch: usize, seed: u64) -> Result<PatchBatch> {
    if pairs.is_empty() || batch == 0 || patch == 0 {
        return Err(Error::Argument("patch sampling needs images, batch > 0 and patch > 0".into()));
    }
    let c = pairs[0].shape().c;
    for p in pairs {
        let s = p.shape();
        if s.c != c || p.noisy.shape() != s {
            return Err(shape_err!("inconsistent pair {}: clean {s}, noisy {}", p.source_path, p.noisy.shape()));
        }
        if s.h < patch || s.w < patch {
            return Err(Error::Argument(format!(
                "image {} ({}x{}) smaller than patch {patch}",
                p.source_path, s.h, s.w
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clean = Vec::with_capacity(batch);
    let mut noisy = Vec::with_capacity(batch);
    let mut records = Vec::with_capacity(batch);
    for _ in 0..batch {
        let image = rng.gen_range(0..pairs.len());
        let s = pairs[image].shape();
        let rec = Augmentation {
            image,
            y: rng.gen_range(0..=s.h - patch),
            x: rng.gen_range(0..=s.w - patch),
            flip: rng.gen(),
            quarter_turns: rng.gen_range(0..4),
        };
        let take = |t: &Tensor| -> Result<Tensor> {
            augment(&crop_at(t, rec.y, rec.x, patch, patch)?, rec.flip, rec.quarter_turns)
        };
        clean.push(take(&pairs[image].clean)?);
        noisy.push(take(&pairs[image].noisy)?);
        records.push(rec);
    }
    Ok(PatchBatch {
        clean: Tensor::stack(&clean)?,
        noisy: Tensor::stack(&noisy)?,
        records,
    })
}

/// Procedural clean image: a two-color gradient background under random
/// flat discs and rectangles and one low-contrast stripe patch. Values stay
/// in `[0.25, 0.75]`.
pub fn synthetic_scene(channels: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = |rng: &mut ChaCha8Rng| -> Vec<f32> { (0..channels).map(|_| rng.gen_range(0.3..0.7)).collect() };
    let (c0, c1) = (color(&mut rng), color(&mut rng));
    let angle: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let diag = ((h * h + w * w) as f32).sqrt().max(1.0);
    let mut img = vec![0.0f32; channels * h * w];
    for y in 0..h {
        for x in 0..w {
            let t = 0.5 + ((x as f32 - w as f32 / 2.0) * ca + (y as f32 - h as f32 / 2.0) * sa) / diag;
            for c in 0..channels {
                img[(c * h + y) * w + x] = c0[c] + (c1[c] - c0[c]) * t;
            }
        }
    }
    let shapes = rng.gen_range(5..10);
    for _ in 0..shapes {
        let col = color(&mut rng);
        let (cy, cx) = (rng.gen_range(0.0..h as f32), rng.gen_range(0.0..w as f32));
        let r = rng.gen_range(0.08..0.3) * h.min(w) as f32;
        let disc: bool = rng.gen();
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f32 - cy, x as f32 - cx);
                let inside = if disc { dy * dy + dx * dx <= r * r } else { dy.abs() <= r && dx.abs() <= 0.6 * r };
                if inside {
                    for c in 0..channels {
                        img[(c * h + y) * w + x] = col[c];
                    }
                }
            }
        }
    }
    let (py, px) = (rng.gen_range(0..h.max(2) / 2), rng.gen_range(0..w.max(2) / 2));
    let period: f32 = rng.gen_range(4.0..10.0);
    for y in py..(py + h / 3).min(h) {
        for x in px..(px + w / 3).min(w) {
            let v = 0.06 * (std::f32::consts::TAU * (x + y) as f32 / period).sin();
            for c in 0..channels {
                img[(c * h + y) * w + x] += v;
            }
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.25, 0.75));
    Tensor::from_vec([1, channels, h, w], img).expect("sized to shape")
}
