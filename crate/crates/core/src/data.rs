//! Synthetic segmentation data, augmentation and on-disk datasets.
//!
//! A sample is an RGB image tensor `[3,H,W]` with values in `[0,1]` and a
//! binary mask `[1,H,W]` with values in `{0,1}`. On disk a dataset is a
//! directory with `images/<id>.ppm`, `masks/<id>.pgm` and an `index.txt`
//! listing one id per line.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::pnm::{self, PnmImage};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T: Scalar> {
    pub id: String,
    pub image: Tensor<T>,
    pub mask: Tensor<T>,
}

/// Stream cipher seeded from a list of integers; used everywhere a
/// reproducible per-item generator is needed (sample i's generator depends
/// only on the dataset seed and i, never on how many samples are drawn).
pub fn derived_rng(parts: &[u64]) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    for (i, p) in parts.iter().enumerate() {
        for (j, b) in p.to_le_bytes().iter().enumerate() {
            let k = (i * 8 + j) % 32;
            seed[k] ^= b.rotate_left((i / 4) as u32);
        }
    }
    ChaCha8Rng::from_seed(seed)
}

const FG_MIN: f64 = 0.02;
const FG_MAX: f64 = 0.60;
const NOISE_SIGMA: f64 = 0.1;

enum Shape {
    Ellipse { cx: f64, cy: f64, a: f64, b: f64, theta: f64 },
    Polygon { verts: Vec<(f64, f64)> },
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let cx = rng.random_range(0.2..0.8) * w as f64;
        let cy = rng.random_range(0.2..0.8) * h as f64;
        let scale = h.min(w) as f64;
        if rng.random_bool(0.5) {
            Shape::Ellipse {
                cx,
                cy,
                a: rng.random_range(0.08..0.28) * scale,
                b: rng.random_range(0.08..0.28) * scale,
                theta: rng.random_range(0.0..std::f64::consts::PI),
            }
        } else {
            let sides = rng.random_range(3..=6);
            let radius = rng.random_range(0.10..0.30) * scale;
            let rot = rng.random_range(0.0..std::f64::consts::TAU);
            let verts = (0..sides)
                .map(|i| {
                    let ang = rot + i as f64 / sides as f64 * std::f64::consts::TAU;
                    (cx + radius * ang.cos(), cy + radius * ang.sin())
                })
                .collect();
            Shape::Polygon { verts }
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Ellipse { cx, cy, a, b, theta } => {
                let (dx, dy) = (x - cx, y - cy);
                let u = dx * theta.cos() + dy * theta.sin();
                let v = -dx * theta.sin() + dy * theta.cos();
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            Shape::Polygon { verts } => {
                // Even-odd ray casting along +x.
                let mut inside = false;
                for i in 0..verts.len() {
                    let (x1, y1) = verts[i];
                    let (x2, y2) = verts[(i + 1) % verts.len()];
                    if (y1 > y) != (y2 > y) {
                        let t = (y - y1) / (y2 - y1);
                        if x < x1 + t * (x2 - x1) {
                            inside = !inside;
                        }
                    }
                }
                inside
            }
        }
    }
}

/// Fraction of mask pixels that are foreground.
pub fn foreground_fraction<T: Scalar>(mask: &Tensor<T>) -> f64 {
    let on = mask.data().iter().filter(|&&v| v.as_f64() > 0.5).count();
    on as f64 / mask.numel().max(1) as f64
}

fn render_sample<T: Scalar>(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Tensor<T>, Tensor<T>) {
    let count = rng.random_range(1..=3);
    let shapes: Vec<Shape> = (0..count).map(|_| Shape::random(rng, h, w)).collect();
    let bg = rng.random_range(0.10..0.35);
    let levels: Vec<f64> = (0..count).map(|_| rng.random_range(0.55..0.90)).collect();

    let mut mask = vec![T::zero(); h * w];
    let mut intensity = vec![bg; h * w];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            for (shape, &level) in shapes.iter().zip(&levels) {
                if shape.contains(px, py) {
                    mask[y * w + x] = T::one();
                    intensity[y * w + x] = level;
                }
            }
        }
    }

    let noise = Normal::new(0.0, NOISE_SIGMA).unwrap();
    let mut image = vec![T::zero(); 3 * h * w];
    for c in 0..3 {
        for i in 0..h * w {
            let v = (intensity[i] + noise.sample(rng)).clamp(0.0, 1.0);
            image[c * h * w + i] = T::c(v);
        }
    }
    (
        Tensor::new(vec![3, h, w], image).unwrap(),
        Tensor::new(vec![1, h, w], mask).unwrap(),
    )
}

/// Synthetic blobs-on-background samples. Re-rolls any draw whose
/// foreground fraction falls outside `[0.02, 0.60]`.
pub fn gen_synthetic<T: Scalar>(n: usize, h: usize, w: usize, seed: u64) -> Result<Vec<Sample<T>>> {
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::config("dataset needs n >= 1 and nonzero dimensions"));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = derived_rng(&[seed, i as u64, 0xDA7A]);
        let mut found = None;
        for _ in 0..1000 {
            let (image, mask) = render_sample::<T>(&mut rng, h, w);
            let fg = foreground_fraction(&mask);
            if (FG_MIN..=FG_MAX).contains(&fg) {
                found = Some((image, mask));
                break;
            }
        }
        let (image, mask) = found.ok_or_else(|| {
            Error::contract("could not draw a sample with admissible foreground fraction")
        })?;
        out.push(Sample { id: format!("{i:04}"), image, mask });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugOp {
    Identity,
    HFlip,
    VFlip,
    Rot90,
    Rot180,
    Rot270,
}

impl AugOp {
    /// Ops that keep an HxW image well-formed; quarter turns need square.
    pub fn admissible(h: usize, w: usize) -> &'static [AugOp] {
        const SQUARE: [AugOp; 6] = [
            AugOp::Identity,
            AugOp::HFlip,
            AugOp::VFlip,
            AugOp::Rot90,
            AugOp::Rot180,
            AugOp::Rot270,
        ];
        const RECT: [AugOp; 4] = [AugOp::Identity, AugOp::HFlip, AugOp::VFlip, AugOp::Rot180];
        if h == w {
            &SQUARE
        } else {
            &RECT
        }
    }
}

/// Applies a flip or quarter-turn to a `[C,H,W]` tensor.
pub fn apply_aug<T: Scalar>(t: &Tensor<T>, op: AugOp) -> Result<Tensor<T>> {
    let (c, h, w) = t.dims3()?;
    if matches!(op, AugOp::Rot90 | AugOp::Rot270) && h != w {
        return Err(Error::dim(format!("quarter turns need a square image, got {h}x{w}")));
    }
    let src = t.data();
    let mut out = vec![T::zero(); src.len()];
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        let dst = &mut out[ci * h * w..(ci + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let v = match op {
                    AugOp::Identity => plane[y * w + x],
                    AugOp::HFlip => plane[y * w + (w - 1 - x)],
                    AugOp::VFlip => plane[(h - 1 - y) * w + x],
                    AugOp::Rot180 => plane[(h - 1 - y) * w + (w - 1 - x)],
                    // clockwise and counterclockwise quarter turns (square)
                    AugOp::Rot90 => plane[(h - 1 - x) * w + y],
                    AugOp::Rot270 => plane[x * w + (w - 1 - y)],
                };
                dst[y * w + x] = v;
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

/// Random admissible op applied identically to image and mask.
pub fn augment_sample<T: Scalar>(s: &Sample<T>, rng: &mut impl Rng) -> Result<Sample<T>> {
    let (_, h, w) = s.image.dims3()?;
    let ops = AugOp::admissible(h, w);
    let op = ops[rng.random_range(0..ops.len())];
    Ok(Sample {
        id: s.id.clone(),
        image: apply_aug(&s.image, op)?,
        mask: apply_aug(&s.mask, op)?,
    })
}

/// Deterministic shuffle-and-cut. Both sides are always nonempty, so the
/// ratio is effectively clamped for tiny datasets.
pub fn split<T: Scalar>(
    samples: Vec<Sample<T>>,
    ratio: f64,
    seed: u64,
) -> Result<(Vec<Sample<T>>, Vec<Sample<T>>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config(format!("split ratio must be in (0,1), got {ratio}")));
    }
    if samples.len() < 2 {
        return Err(Error::config("need at least 2 samples to split"));
    }
    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = derived_rng(&[seed, 0x5B11]);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let mut samples: Vec<Option<Sample<T>>> = samples.into_iter().map(Some).collect();
    let take = |idx: &[usize], pool: &mut Vec<Option<Sample<T>>>| {
        idx.iter().map(|&i| pool[i].take().unwrap()).collect::<Vec<_>>()
    };
    let train = take(&order[..n_train], &mut samples);
    let val = take(&order[n_train..], &mut samples);
    Ok((train, val))
}

fn to_byte<T: Scalar>(v: T) -> u8 {
    (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes `images/<id>.ppm`, `masks/<id>.pgm` and `index.txt`.
pub fn write_dataset<T: Scalar>(dir: &Path, samples: &[Sample<T>]) -> Result<()> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    std::fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
    let mut index = String::new();
    for s in samples {
        let (_, h, w) = s.image.dims3()?;
        let id = &s.id;
        let img = s.image.data();
        let mut rgb = vec![0u8; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    rgb[(y * w + x) * 3 + c] = to_byte(img[c * h * w + y * w + x]);
                }
            }
        }
        pnm::write_ppm(&images.join(format!("{id}.ppm")), w, h, &rgb)?;
        save_mask(&masks.join(format!("{id}.pgm")), &s.mask)?;
        let _ = writeln!(index, "{id}");
    }
    let index_path = dir.join("index.txt");
    std::fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))
}

/// Binary mask to P5, foreground as 255.
pub fn save_mask<T: Scalar>(path: &Path, mask: &Tensor<T>) -> Result<()> {
    let (c, h, w) = mask.dims3()?;
    if c != 1 {
        return Err(Error::dim(format!("mask must have one channel, got {c}")));
    }
    let bytes: Vec<u8> =
        mask.data().iter().map(|&v| if v.as_f64() > 0.5 { 255 } else { 0 }).collect();
    pnm::write_pgm(path, w, h, &bytes)
}

fn resize_nearest_bytes(
    data: &[u8],
    channels: usize,
    h: usize,
    w: usize,
    th: usize,
    tw: usize,
) -> Vec<u8> {
    let mut out = vec![0u8; channels * th * tw];
    for y in 0..th {
        let sy = (y * h / th).min(h - 1);
        for x in 0..tw {
            let sx = (x * w / tw).min(w - 1);
            for c in 0..channels {
                out[(y * tw + x) * channels + c] = data[(sy * w + sx) * channels + c];
            }
        }
    }
    out
}

/// Loads an image/mask pair, optionally nearest-resized to `(h, w)`.
/// Grayscale images are replicated to three channels; mask pixels at or
/// above 128 become foreground.
pub fn load_pair<T: Scalar>(
    image_path: &Path,
    mask_path: &Path,
    resize: Option<(usize, usize)>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (mut idata, mut ih, mut iw, ichan) = match pnm::read_pnm(image_path)? {
        PnmImage::Rgb { width, height, data } => (data, height, width, 3),
        PnmImage::Gray { width, height, data } => (data, height, width, 1),
    };
    let (mut mdata, mut mh, mut mw) = match pnm::read_pnm(mask_path)? {
        PnmImage::Gray { width, height, data } => (data, height, width),
        PnmImage::Rgb { .. } => {
            return Err(Error::io(mask_path, "mask must be grayscale (P5)"));
        }
    };
    if let Some((th, tw)) = resize {
        if th == 0 || tw == 0 {
            return Err(Error::config("resize target must be nonzero"));
        }
        idata = resize_nearest_bytes(&idata, ichan, ih, iw, th, tw);
        mdata = resize_nearest_bytes(&mdata, 1, mh, mw, th, tw);
        (ih, iw, mh, mw) = (th, tw, th, tw);
    }
    if (mh, mw) != (ih, iw) {
        return Err(Error::dim(format!(
            "image is {ih}x{iw} but mask is {mh}x{mw}"
        )));
    }
    let image = Tensor::from_fn(vec![3, ih, iw], |i| {
        let (c, rest) = (i / (ih * iw), i % (ih * iw));
        let src_c = if ichan == 3 { c } else { 0 };
        T::c(idata[rest * ichan + src_c] as f64 / 255.0)
    });
    let mask = Tensor::from_fn(vec![1, mh, mw], |i| {
        if mdata[i] >= 128 {
            T::one()
        } else {
            T::zero()
        }
    });
    Ok((image, mask))
}

/// Reads a dataset directory written by [`write_dataset`].
pub fn load_dataset<T: Scalar>(dir: &Path, resize: Option<(usize, usize)>) -> Result<Vec<Sample<T>>> {
    let index_path = dir.join("index.txt");
    let index = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut out = Vec::new();
    for id in index.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (image, mask) = load_pair(
            &dir.join("images").join(format!("{id}.ppm")),
            &dir.join("masks").join(format!("{id}.pgm")),
            resize,
        )?;
        out.push(Sample { id: id.to_string(), image, mask });
    }
    if out.is_empty() {
        return Err(Error::io(&index_path, "dataset index is empty"));
    }
    Ok(out)
}
