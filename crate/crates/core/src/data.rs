//! Paired-dataset ingestion, the augmentation pipeline, and the synthetic
//! shadow-pair generator for desk-scale end-to-end runs.
//!
//! Directory layout: `root/input/*.png` and `root/gt/*.png`, matched by file
//! stem. Images are 8-bit PNG on disk, [0, 1] RGB tensors in memory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::AugmentSpec;
use crate::error::{Error, Result};
use crate::rng::{rng_at, RunSeed, Stream};
use crate::tensor::Tensor;

/// One (shadow-affected, shadow-free) training pair.
#[derive(Clone)]
pub struct PairedSample {
    pub shadow: Tensor<f32>,
    pub clean: Tensor<f32>,
    pub id: String,
}

/// Samples sorted by id.
pub struct PairedDataset {
    pub samples: Vec<PairedSample>,
}

/// Decode an image file to a (1, 3, H, W) tensor in [0, 1].
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::data(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + (y as usize) * w + x as usize] = px.0[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new([1, 3, h, w], data))
}

/// Quantize a (1, 3, H, W) tensor to 8-bit PNG.
pub fn save_image(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let [n, c, h, w] = t.shape();
    assert_eq!((n, c), (1, 3), "save_image expects a single RGB image");
    let mut img = image::RgbImage::new(w as u32, h as u32);
    let s = t.as_slice();
    for y in 0..h {
        for x in 0..w {
            let px = [
                (s[y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8,
                (s[h * w + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8,
                (s[2 * h * w + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path).map_err(|e| Error::io(format!("cannot write {}: {e}", path.display())))
}

fn stems_of(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::data(format!("cannot list {}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::data(format!("{}: {e}", dir.display())))?.path();
        if path.is_file() {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Load a paired dataset from `root/input` + `root/gt`, stems matched,
/// sorted by stem. Every mismatch is reported with its id.
pub fn load_paired_dataset(root: &Path) -> Result<PairedDataset> {
    let inputs = stems_of(&root.join("input"))?;
    let gts = stems_of(&root.join("gt"))?;
    for stem in inputs.keys() {
        if !gts.contains_key(stem) {
            return Err(Error::data(format!("input '{stem}' has no gt partner")));
        }
    }
    for stem in gts.keys() {
        if !inputs.contains_key(stem) {
            return Err(Error::data(format!("gt '{stem}' has no input partner")));
        }
    }
    let mut samples = Vec::with_capacity(inputs.len());
    for (stem, in_path) in &inputs {
        let shadow = load_image(in_path)?;
        let clean = load_image(&gts[stem])?;
        if shadow.shape() != clean.shape() {
            return Err(Error::data(format!(
                "pair '{stem}': size mismatch {}x{} vs {}x{}",
                shadow.h(),
                shadow.w(),
                clean.h(),
                clean.w()
            )));
        }
        samples.push(PairedSample { shadow, clean, id: stem.clone() });
    }
    Ok(PairedDataset { samples })
}

/// Rotate a square image counter-clockwise k quarter turns.
fn rot90_square(t: &Tensor<f32>, k: usize) -> Tensor<f32> {
    let [n, c, h, w] = t.shape();
    if k % 4 == 0 {
        return t.clone();
    }
    assert_eq!(h, w, "rotation requires a square crop");
    let s = h;
    let mut cur = t.as_slice().to_vec();
    for _ in 0..k % 4 {
        let mut next = vec![0f32; cur.len()];
        for nc in 0..n * c {
            let src = &cur[nc * s * s..(nc + 1) * s * s];
            let dst = &mut next[nc * s * s..(nc + 1) * s * s];
            for i in 0..s {
                for j in 0..s {
                    dst[(s - 1 - j) * s + i] = src[i * s + j];
                }
            }
        }
        cur = next;
    }
    Tensor::new([n, c, h, w], cur)
}

fn flip_h(t: &Tensor<f32>) -> Tensor<f32> {
    let [n, c, h, w] = t.shape();
    let s = t.as_slice();
    let mut out = vec![0f32; s.len()];
    for nc in 0..n * c {
        for i in 0..h {
            for j in 0..w {
                out[nc * h * w + i * w + (w - 1 - j)] = s[nc * h * w + i * w + j];
            }
        }
    }
    Tensor::new([n, c, h, w], out)
}

fn flip_v(t: &Tensor<f32>) -> Tensor<f32> {
    let [n, c, h, w] = t.shape();
    let s = t.as_slice();
    let mut out = vec![0f32; s.len()];
    for nc in 0..n * c {
        for i in 0..h {
            let src = &s[nc * h * w + i * w..nc * h * w + (i + 1) * w];
            out[nc * h * w + (h - 1 - i) * w..nc * h * w + (h - i) * w].copy_from_slice(src);
        }
    }
    Tensor::new([n, c, h, w], out)
}

fn crop(t: &Tensor<f32>, y0: usize, x0: usize, size: usize) -> Tensor<f32> {
    let [n, c, h, w] = t.shape();
    assert!(y0 + size <= h && x0 + size <= w);
    let s = t.as_slice();
    let mut out = vec![0f32; n * c * size * size];
    for nc in 0..n * c {
        for i in 0..size {
            let src = &s[nc * h * w + (y0 + i) * w + x0..nc * h * w + (y0 + i) * w + x0 + size];
            out[nc * size * size + i * size..nc * size * size + (i + 1) * size]
                .copy_from_slice(src);
        }
    }
    Tensor::new([n, c, size, size], out)
}

/// The geometric transform drawn for one augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentDraw {
    pub y0: usize,
    pub x0: usize,
    pub quarter_turns: usize,
    pub hflip: bool,
    pub vflip: bool,
}

/// Draw the transform for a sample. Draw order is fixed (crop offsets,
/// rotation, flips) so a given rng position always yields the same draw.
pub fn draw_augment(
    spec: &AugmentSpec,
    crop_size: usize,
    h: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
) -> AugmentDraw {
    let y0 = rng.gen_range(0..=h - crop_size);
    let x0 = rng.gen_range(0..=w - crop_size);
    let rot_idx = rng.gen_range(0..spec.rotations.len());
    let quarter_turns = (spec.rotations[rot_idx] / 90) as usize;
    let hflip = spec.hflip && rng.gen_bool(0.5);
    let vflip = spec.vflip && rng.gen_bool(0.5);
    AugmentDraw { y0, x0, quarter_turns, hflip, vflip }
}

/// Apply one drawn transform to a single image tensor.
pub fn apply_augment(t: &Tensor<f32>, d: &AugmentDraw, crop_size: usize) -> Tensor<f32> {
    let mut out = crop(t, d.y0, d.x0, crop_size);
    out = rot90_square(&out, d.quarter_turns);
    if d.hflip {
        out = flip_h(&out);
    }
    if d.vflip {
        out = flip_v(&out);
    }
    out
}

/// Random crop + rotation + flips, the identical transform applied to both
/// sides of the pair.
pub fn augment(
    sample: &PairedSample,
    spec: &AugmentSpec,
    rng: &mut ChaCha8Rng,
) -> Result<PairedSample> {
    let [_, _, h, w] = sample.shadow.shape();
    let crop_size = spec.crop_size;
    if crop_size > h.min(w) {
        return Err(Error::data(format!(
            "crop {crop_size} larger than image {h}x{w} (sample '{}')",
            sample.id
        )));
    }
    let d = draw_augment(spec, crop_size, h, w, rng);
    Ok(PairedSample {
        shadow: apply_augment(&sample.shadow, &d, crop_size),
        clean: apply_augment(&sample.clean, &d, crop_size),
        id: sample.id.clone(),
    })
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Crop size after clamping to the smallest image side; returns the
    /// effective size and whether clamping happened.
    pub fn effective_crop(&self, requested: usize) -> (usize, bool) {
        let min_side = self
            .samples
            .iter()
            .map(|s| s.shadow.h().min(s.shadow.w()))
            .min()
            .unwrap_or(requested);
        (requested.min(min_side), requested > min_side)
    }

    fn permutation(&self, seed: RunSeed, stage: u8, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = rng_at(seed, Stream::Shuffle, &[stage as u64, epoch]);
        // Fisher-Yates
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        order
    }

    /// Assemble the batch for a global step. Sample order and augmentation
    /// draws depend only on (seed, stage, step), so runs are reproducible
    /// and resumable from any step.
    pub fn train_batch(
        &self,
        seed: RunSeed,
        stage: u8,
        step: u64,
        batch_size: usize,
        spec: &AugmentSpec,
        crop_size: usize,
    ) -> Result<(Tensor<f32>, Tensor<f32>)> {
        if self.is_empty() {
            return Err(Error::data("dataset is empty"));
        }
        let n = self.len() as u64;
        let eff_spec = AugmentSpec { crop_size, ..spec.clone() };
        let mut shadows = Vec::with_capacity(batch_size);
        let mut cleans = Vec::with_capacity(batch_size);
        for b in 0..batch_size as u64 {
            let pos = step * batch_size as u64 + b;
            let (epoch, slot) = (pos / n, pos % n);
            let idx = self.permutation(seed, stage, epoch)[slot as usize];
            let mut rng = rng_at(seed, Stream::Augment, &[stage as u64, epoch, slot]);
            let aug = augment(&self.samples[idx], &eff_spec, &mut rng)?;
            shadows.push(aug.shadow);
            cleans.push(aug.clean);
        }
        Ok((stack_batch(&shadows), stack_batch(&cleans)))
    }
}

fn stack_batch(items: &[Tensor<f32>]) -> Tensor<f32> {
    let [_, c, h, w] = items[0].shape();
    let mut data = Vec::with_capacity(items.len() * c * h * w);
    for t in items {
        assert_eq!(t.shape(), [1, c, h, w], "batch items must share one shape");
        data.extend_from_slice(t.as_slice());
    }
    Tensor::new([items.len(), c, h, w], data)
}

// ---- synthetic pair generation -------------------------------------------

fn fill_ellipse(mask: &mut [f32], size: usize, cx: f64, cy: f64, rx: f64, ry: f64, theta: f64) {
    let (sin, cos) = theta.sin_cos();
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            if (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 {
                mask[y * size + x] = 1.0;
            }
        }
    }
}

fn fill_polygon(mask: &mut [f32], size: usize, pts: &[(f64, f64)]) {
    for y in 0..size {
        for x in 0..size {
            // even-odd ray casting
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut inside = false;
            let m = pts.len();
            let mut j = m - 1;
            for i in 0..m {
                let (xi, yi) = pts[i];
                let (xj, yj) = pts[j];
                if ((yi > py) != (yj > py))
                    && (px < (xj - xi) * (py - yi) / (yj - yi) + xi)
                {
                    inside = !inside;
                }
                j = i;
            }
            if inside {
                mask[y * size + x] = 1.0;
            }
        }
    }
}

fn gaussian_blur_mask(mask: &[f32], size: usize, sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0f64;
    for i in -radius..=radius {
        let v = (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in kernel.iter_mut() {
        *v /= sum;
    }
    let idx = |y: isize, x: isize| -> f32 {
        if y < 0 || x < 0 || y >= size as isize || x >= size as isize {
            0.0
        } else {
            mask[y as usize * size + x as usize]
        }
    };
    let mut tmp = vec![0f32; size * size];
    for y in 0..size as isize {
        for x in 0..size as isize {
            let mut acc = 0.0f64;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * idx(y, x + k as isize - radius) as f64;
            }
            tmp[y as usize * size + x as usize] = acc as f32;
        }
    }
    let idx2 = |y: isize, x: isize| -> f32 {
        if y < 0 || x < 0 || y >= size as isize || x >= size as isize {
            0.0
        } else {
            tmp[y as usize * size + x as usize]
        }
    };
    let mut out = vec![0f32; size * size];
    for y in 0..size as isize {
        for x in 0..size as isize {
            let mut acc = 0.0f64;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * idx2(y + k as isize - radius, x) as f64;
            }
            out[y as usize * size + x as usize] = (acc as f32).clamp(0.0, 1.0);
        }
    }
    out
}

/// Procedural clean image: bilinear blend of four corner colors plus a few
/// random rectangles and ellipses.
fn synth_clean(size: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let mut img = vec![0f32; 3 * size * size];
    let corners: Vec<[f32; 3]> = (0..4)
        .map(|_| std::array::from_fn(|_| rng.gen_range(0.15..0.95)))
        .collect();
    for y in 0..size {
        let fy = y as f32 / (size - 1).max(1) as f32;
        for x in 0..size {
            let fx = x as f32 / (size - 1).max(1) as f32;
            for c in 0..3 {
                let top = corners[0][c] * (1.0 - fx) + corners[1][c] * fx;
                let bot = corners[2][c] * (1.0 - fx) + corners[3][c] * fx;
                img[c * size * size + y * size + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    let shapes = rng.gen_range(1..=3);
    for _ in 0..shapes {
        let color: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
        let mut mask = vec![0f32; size * size];
        if rng.gen_bool(0.5) {
            let x0 = rng.gen_range(0..size - 1);
            let y0 = rng.gen_range(0..size - 1);
            let x1 = rng.gen_range(x0 + 1..=size.min(x0 + size / 2).max(x0 + 1));
            let y1 = rng.gen_range(y0 + 1..=size.min(y0 + size / 2).max(y0 + 1));
            for y in y0..y1.min(size) {
                for x in x0..x1.min(size) {
                    mask[y * size + x] = 1.0;
                }
            }
        } else {
            let cx = rng.gen_range(0.2..0.8) * size as f64;
            let cy = rng.gen_range(0.2..0.8) * size as f64;
            let rx = rng.gen_range(0.05..0.25) * size as f64;
            let ry = rng.gen_range(0.05..0.25) * size as f64;
            fill_ellipse(&mut mask, size, cx, cy, rx, ry, 0.0);
        }
        for y in 0..size {
            for x in 0..size {
                if mask[y * size + x] > 0.0 {
                    for c in 0..3 {
                        img[c * size * size + y * size + x] = color[c];
                    }
                }
            }
        }
    }
    Tensor::new([1, 3, size, size], img)
}

/// One synthetic pair: the clean image attenuated inside a soft-edged
/// random ellipse or polygon, per-channel factors in [0.3, 0.7], penumbra
/// from a Gaussian blur with sigma in [1, 5] px.
pub fn synth_pair(size: usize, rng: &mut ChaCha8Rng) -> (Tensor<f32>, Tensor<f32>) {
    let clean = synth_clean(size, rng);
    let mut mask = vec![0f32; size * size];
    if rng.gen_bool(0.5) {
        let cx = rng.gen_range(0.25..0.75) * size as f64;
        let cy = rng.gen_range(0.25..0.75) * size as f64;
        let rx = rng.gen_range(0.15..0.4) * size as f64;
        let ry = rng.gen_range(0.15..0.4) * size as f64;
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        fill_ellipse(&mut mask, size, cx, cy, rx, ry, theta);
    } else {
        let cx = rng.gen_range(0.35..0.65) * size as f64;
        let cy = rng.gen_range(0.35..0.65) * size as f64;
        let verts = rng.gen_range(3..=6);
        let mut pts = Vec::with_capacity(verts);
        for i in 0..verts {
            let ang = (i as f64 + rng.gen_range(0.0..0.6)) / verts as f64
                * std::f64::consts::TAU;
            let r = rng.gen_range(0.2..0.45) * size as f64;
            pts.push((cx + r * ang.cos(), cy + r * ang.sin()));
        }
        fill_polygon(&mut mask, size, &pts);
    }
    let sigma = rng.gen_range(1.0..5.0);
    let soft = gaussian_blur_mask(&mask, size, sigma);
    let att: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.3..0.7));

    let cs = clean.as_slice();
    let mut shadow = vec![0f32; cs.len()];
    for c in 0..3 {
        for p in 0..size * size {
            let m = soft[p];
            shadow[c * size * size + p] = cs[c * size * size + p] * (1.0 - m * (1.0 - att[c]));
        }
    }
    (Tensor::new([1, 3, size, size], shadow), clean)
}

/// Write `count` synthetic pairs under `out/input` and `out/gt`. Each pair
/// is a pure function of (seed, index), so reruns are byte-identical.
pub fn synth_generate(count: usize, size: usize, seed: RunSeed, out: &Path) -> Result<()> {
    if size < 32 {
        return Err(Error::config(format!("synthetic size must be >= 32, got {size}")));
    }
    let input_dir = out.join("input");
    let gt_dir = out.join("gt");
    std::fs::create_dir_all(&input_dir)
        .map_err(|e| Error::io(format!("cannot create {}: {e}", input_dir.display())))?;
    std::fs::create_dir_all(&gt_dir)
        .map_err(|e| Error::io(format!("cannot create {}: {e}", gt_dir.display())))?;
    for i in 0..count {
        let mut rng = rng_at(seed, Stream::Synth, &[i as u64]);
        let (shadow, clean) = synth_pair(size, &mut rng);
        let id = format!("{i:04}");
        save_image(&shadow, &input_dir.join(format!("{id}.png")))?;
        save_image(&clean, &gt_dir.join(format!("{id}.png")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_with_gradient(h: usize, w: usize) -> PairedSample {
        let shadow = Tensor::from_fn([1, 3, h, w], |i| (i % 251) as f32 / 251.0);
        let clean = Tensor::from_fn([1, 3, h, w], |i| ((i * 7) % 251) as f32 / 251.0);
        PairedSample { shadow, clean, id: "s".into() }
    }

    #[test]
    fn identity_augment_is_identity() {
        let s = sample_with_gradient(8, 8);
        let spec =
            AugmentSpec { crop_size: 8, rotations: vec![0], hflip: false, vflip: false };
        let mut rng = rng_at(RunSeed(0), Stream::Augment, &[0]);
        let out = augment(&s, &spec, &mut rng).unwrap();
        assert_eq!(out.shadow.as_slice(), s.shadow.as_slice());
        assert_eq!(out.clean.as_slice(), s.clean.as_slice());
    }

    #[test]
    fn augment_is_deterministic_per_position() {
        let s = sample_with_gradient(16, 12);
        let spec = AugmentSpec { crop_size: 8, ..AugmentSpec::default() };
        let mut r1 = rng_at(RunSeed(1), Stream::Augment, &[3]);
        let mut r2 = rng_at(RunSeed(1), Stream::Augment, &[3]);
        let a = augment(&s, &spec, &mut r1).unwrap();
        let b = augment(&s, &spec, &mut r2).unwrap();
        assert_eq!(a.shadow.as_slice(), b.shadow.as_slice());
    }

    #[test]
    fn augment_rejects_oversized_crop() {
        let s = sample_with_gradient(8, 8);
        let spec = AugmentSpec { crop_size: 16, ..AugmentSpec::default() };
        let mut rng = rng_at(RunSeed(0), Stream::Augment, &[0]);
        assert!(augment(&s, &spec, &mut rng).is_err());
    }

    #[test]
    fn rotation_is_quarter_turn() {
        let t = Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let r = rot90_square(&t, 1);
        // counter-clockwise: top row (1,2) becomes left column bottom-up
        assert_eq!(r.as_slice(), &[2.0, 4.0, 1.0, 3.0]);
        let r4 = rot90_square(&t, 4);
        assert_eq!(r4.as_slice(), t.as_slice());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        /// The difference map transforms exactly like each image.
        #[test]
        fn augmentation_preserves_alignment(seed in 0u64..1000, crop in 4usize..8, h in 8usize..14, w in 8usize..14) {
            let s = sample_with_gradient(h, w);
            let spec = AugmentSpec { crop_size: crop, ..AugmentSpec::default() };
            let mut rng = rng_at(RunSeed(seed), Stream::Augment, &[0]);
            let d = draw_augment(&spec, crop, h, w, &mut rng);
            let diff = s.shadow.sub(&s.clean);
            let aug_shadow = apply_augment(&s.shadow, &d, crop);
            let aug_clean = apply_augment(&s.clean, &d, crop);
            let aug_diff = apply_augment(&diff, &d, crop);
            let residual = aug_shadow.sub(&aug_clean).sub(&aug_diff).max_abs();
            prop_assert!(residual < 1e-6);
        }
    }

    #[test]
    fn synth_pairs_are_shadows_of_clean() {
        let mut rng = rng_at(RunSeed(0), Stream::Synth, &[0]);
        let (shadow, clean) = synth_pair(64, &mut rng);
        let (ss, cs) = (shadow.as_slice(), clean.as_slice());
        let mut darker = 0usize;
        let mut equal = 0usize;
        for (a, b) in ss.iter().zip(cs.iter()) {
            assert!(*a <= *b + 1e-6, "shadow must never exceed clean");
            if (a - b).abs() < 1e-7 {
                equal += 1;
            } else if a < b {
                darker += 1;
            }
        }
        assert!(darker > 100, "a shadow was actually applied ({darker} darker px)");
        assert!(equal > 100, "pixels outside the mask stay equal ({equal} equal px)");
    }

    #[test]
    fn synth_generate_is_deterministic_and_loadable() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        synth_generate(2, 32, RunSeed(0), &a).unwrap();
        synth_generate(2, 32, RunSeed(0), &b).unwrap();
        for name in ["input/0000.png", "gt/0001.png"] {
            let ba = std::fs::read(a.join(name)).unwrap();
            let bb = std::fs::read(b.join(name)).unwrap();
            assert_eq!(ba, bb, "{name} not byte-identical");
        }
        let ds = load_paired_dataset(&a).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.samples[0].id, "0000");
        assert_eq!(ds.samples[1].id, "0001");
    }

    #[test]
    fn synth_count_zero_gives_empty_dirs() {
        let dir = tempfile::tempdir().unwrap();
        synth_generate(0, 32, RunSeed(0), dir.path()).unwrap();
        assert!(dir.path().join("input").is_dir());
        assert!(dir.path().join("gt").is_dir());
        let ds = load_paired_dataset(dir.path()).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn loader_reports_missing_partner() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("input")).unwrap();
        std::fs::create_dir_all(dir.path().join("gt")).unwrap();
        let img = Tensor::full([1, 3, 8, 8], 0.5f32);
        save_image(&img, &dir.path().join("input/a.png")).unwrap();
        let err = match load_paired_dataset(dir.path()) {
            Err(e) => e,
            Ok(_) => panic!("missing partner must be an error"),
        };
        assert!(err.to_string().contains("'a'"), "error should name the id: {err}");
    }

    #[test]
    fn loader_reports_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("input")).unwrap();
        std::fs::create_dir_all(dir.path().join("gt")).unwrap();
        save_image(&Tensor::full([1, 3, 8, 8], 0.5f32), &dir.path().join("input/a.png")).unwrap();
        save_image(&Tensor::full([1, 3, 8, 6], 0.5f32), &dir.path().join("gt/a.png")).unwrap();
        let err = match load_paired_dataset(dir.path()) {
            Err(e) => e,
            Ok(_) => panic!("size mismatch must be an error"),
        };
        assert!(err.to_string().contains("size mismatch"));
    }

    #[test]
    fn save_load_roundtrip_is_pixel_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rng_at(RunSeed(5), Stream::Synth, &[0]);
        let (img, _) = synth_pair(32, &mut rng);
        let p = dir.path().join("x.png");
        save_image(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        let p2 = dir.path().join("y.png");
        save_image(&back, &p2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn train_batch_is_resumable() {
        let dir = tempfile::tempdir().unwrap();
        synth_generate(3, 32, RunSeed(0), dir.path()).unwrap();
        let ds = load_paired_dataset(dir.path()).unwrap();
        let spec = AugmentSpec::default();
        let (a, _) = ds.train_batch(RunSeed(7), 1, 5, 2, &spec, 16).unwrap();
        let (b, _) = ds.train_batch(RunSeed(7), 1, 5, 2, &spec, 16).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        let (c, _) = ds.train_batch(RunSeed(7), 1, 6, 2, &spec, 16).unwrap();
        assert_ne!(a.as_slice(), c.as_slice());
    }
}
