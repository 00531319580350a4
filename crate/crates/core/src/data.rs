//! Bi-temporal pairs, binary change masks, tiling, PNG storage, manifests,
//! batching and the synthetic rectangle dataset.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use ehct_autograd::{par, Tensor};
use image::{GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EhctError, Result};
use crate::feature_extraction::ENCODER_STRIDE;

/// Two co-registered `[3, H, W]` images with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub a: Tensor,
    pub b: Tensor,
}

impl ImagePair {
    pub fn new(id: impl Into<String>, a: Tensor, b: Tensor) -> Result<Self> {
        if a.ndim() != 3 || a.dim(0) != 3 || a.shape() != b.shape() {
            return Err(EhctError::Dimension(format!(
                "pair images must be matching [3,H,W], got {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        Ok(Self { id: id.into(), a, b })
    }

    pub fn height(&self) -> usize {
        self.a.dim(1)
    }

    pub fn width(&self) -> usize {
        self.a.dim(2)
    }
}

/// Row-major `H x W` mask with values in {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChangeMask {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl ChangeMask {
    pub fn new(id: impl Into<String>, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(EhctError::Dimension(format!("mask of {} values is not {height}x{width}", data.len())));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(EhctError::Validation(format!("mask value {v} is not binary")));
        }
        Ok(Self { id: id.into(), height, width, data })
    }

    pub fn zeros(id: impl Into<String>, height: usize, width: usize) -> Self {
        Self { id: id.into(), height, width, data: vec![0; height * width] }
    }
}

fn tile_id(id: &str, r: usize, c: usize) -> String {
    format!("{id}_r{r}_c{c}")
}

fn crop(img: &Tensor, top: usize, left: usize, size: usize) -> Tensor {
    let (h, w) = (img.dim(1), img.dim(2));
    Tensor::from_fn([3, size, size], |k| {
        let (ch, i, j) = (k / (size * size), (k / size) % size, k % size);
        img.data()[(ch * h + top + i) * w + left + j]
    })
}

/// Splits into non-overlapping `tile x tile` pieces in row-major order.
pub fn tile_pair(pair: &ImagePair, mask: &ChangeMask, tile: usize) -> Result<Vec<(ImagePair, ChangeMask)>> {
    let (h, w) = (pair.height(), pair.width());
    if mask.height != h || mask.width != w {
        return Err(EhctError::Validation(format!("mask {}x{} does not match pair {h}x{w}", mask.height, mask.width)));
    }
    if tile == 0 || h % tile != 0 || w % tile != 0 {
        return Err(EhctError::Dimension(format!("tile {tile} does not divide H={h}, W={w}")));
    }
    let mut out = Vec::with_capacity((h / tile) * (w / tile));
    for r in 0..h / tile {
        for c in 0..w / tile {
            let (top, left) = (r * tile, c * tile);
            let id = tile_id(&pair.id, r, c);
            let m: Vec<u8> = (0..tile * tile).map(|k| mask.data[(top + k / tile) * w + left + k % tile]).collect();
            out.push((
                ImagePair { id: id.clone(), a: crop(&pair.a, top, left, tile), b: crop(&pair.b, top, left, tile) },
                ChangeMask { id, height: tile, width: tile, data: m },
            ));
        }
    }
    Ok(out)
}

/// Inverse of [`tile_pair`] for a `rows x cols` grid of tiles.
pub fn reassemble(
    tiles: &[(ImagePair, ChangeMask)],
    rows: usize,
    cols: usize,
    id: &str,
) -> Result<(ImagePair, ChangeMask)> {
    if tiles.len() != rows * cols || tiles.is_empty() {
        return Err(EhctError::Validation(format!("{} tiles for a {rows}x{cols} grid", tiles.len())));
    }
    let t = tiles[0].0.height();
    let (h, w) = (rows * t, cols * t);
    let mut a = vec![0.0; 3 * h * w];
    let mut b = vec![0.0; 3 * h * w];
    let mut m = vec![0u8; h * w];
    for (idx, (pair, mask)) in tiles.iter().enumerate() {
        if pair.height() != t || pair.width() != t || mask.height != t || mask.width != t {
            return Err(EhctError::Dimension(format!("tile {} is not {t}x{t}", pair.id)));
        }
        let (top, left) = ((idx / cols) * t, (idx % cols) * t);
        for ch in 0..3 {
            for i in 0..t {
                let dst = (ch * h + top + i) * w + left;
                let src = (ch * t + i) * t;
                a[dst..dst + t].copy_from_slice(&pair.a.data()[src..src + t]);
                b[dst..dst + t].copy_from_slice(&pair.b.data()[src..src + t]);
            }
        }
        for i in 0..t {
            m[(top + i) * w + left..(top + i) * w + left + t].copy_from_slice(&mask.data[i * t..(i + 1) * t]);
        }
    }
    Ok((
        ImagePair { id: id.to_string(), a: Tensor::new([3, h, w], a)?, b: Tensor::new([3, h, w], b)? },
        ChangeMask { id: id.to_string(), height: h, width: w, data: m },
    ))
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|source| EhctError::Image { path: path.to_path_buf(), source })?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn([3, h, w], |k| {
        let (ch, p) = (k / (h * w), k % (h * w));
        raw[p * 3 + ch] as f64 / 255.0
    }))
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_image(path: &Path, img: &Tensor) -> Result<()> {
    if img.ndim() != 3 || img.dim(0) != 3 {
        return Err(EhctError::Dimension(format!("image must be [3,H,W], got {:?}", img.shape())));
    }
    let (h, w) = (img.dim(1), img.dim(2));
    let raw: Vec<u8> = (0..h * w * 3).map(|k| to_u8(img.data()[(k % 3) * h * w + k / 3])).collect();
    let out = RgbImage::from_raw(w as u32, h as u32, raw).expect("rgb buffer size");
    write_png(path, |p| out.save(p))
}

/// Reads a single-channel PNG whose pixels are all 0 or 255.
pub fn load_mask(path: &Path, id: &str) -> Result<ChangeMask> {
    let img = image::open(path).map_err(|source| EhctError::Image { path: path.to_path_buf(), source })?;
    if img.color().channel_count() != 1 {
        return Err(EhctError::Validation(format!("mask {} is not single-channel", path.display())));
    }
    let g = img.to_luma8();
    let (w, h) = (g.width() as usize, g.height() as usize);
    let mut data = Vec::with_capacity(h * w);
    for &v in g.as_raw() {
        match v {
            0 => data.push(0),
            255 => data.push(1),
            other => {
                return Err(EhctError::Validation(format!(
                    "mask {} has value {other}; expected 0 or 255",
                    path.display()
                )))
            }
        }
    }
    ChangeMask::new(id, h, w, data)
}

pub fn save_mask(path: &Path, mask: &ChangeMask) -> Result<()> {
    save_gray(path, mask.height, mask.width, mask.data.iter().map(|&v| v * 255).collect())
}

pub fn save_gray(path: &Path, h: usize, w: usize, data: Vec<u8>) -> Result<()> {
    let out = GrayImage::from_raw(w as u32, h as u32, data).expect("gray buffer size");
    write_png(path, |p| out.save(p))
}

pub fn save_rgb(path: &Path, h: usize, w: usize, data: Vec<u8>) -> Result<()> {
    let out = RgbImage::from_raw(w as u32, h as u32, data).expect("rgb buffer size");
    write_png(path, |p| out.save(p))
}

fn write_png(path: &Path, save: impl FnOnce(&Path) -> image::ImageResult<()>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| EhctError::io(dir, e))?;
    }
    save(path).map_err(|source| EhctError::Image { path: path.to_path_buf(), source })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub a: PathBuf,
    pub b: PathBuf,
    pub label: PathBuf,
}

/// Entry paths are relative to `root`, the manifest file's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub split: Split,
    pub tile_size: usize,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    /// Entry for the LEVIR-style `A/`, `B/`, `label/` layout.
    pub fn levir_entry(id: &str) -> ManifestEntry {
        let file = format!("{id}.png");
        ManifestEntry {
            id: id.to_string(),
            a: Path::new("A").join(&file),
            b: Path::new("B").join(&file),
            label: Path::new("label").join(&file),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| EhctError::io(path, e))?;
        let mut m: Manifest = serde_json::from_str(&text)
            .map_err(|source| EhctError::Json { context: path.display().to_string(), source })?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| EhctError::io(dir, e))?;
        }
        fs::write(path, text).map_err(|e| EhctError::io(path, e))
    }

    /// Unique ids, positive tile size, and every referenced file present.
    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 {
            return Err(EhctError::Validation("tile_size must be positive".into()));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(EhctError::Validation(format!("duplicate id {:?}", e.id)));
            }
            for p in [&e.a, &e.b, &e.label] {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(EhctError::io(
                        full,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "referenced file missing"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn load_sample(&self, index: usize) -> Result<(ImagePair, ChangeMask)> {
        let e = self
            .entries
            .get(index)
            .ok_or_else(|| EhctError::Validation(format!("index {index} out of range for {} entries", self.len())))?;
        let a = load_image(&self.resolve(&e.a))?;
        let b = load_image(&self.resolve(&e.b))?;
        if a.shape() != b.shape() {
            return Err(EhctError::Validation(format!(
                "{}: image sizes differ {:?} vs {:?}",
                e.id,
                a.shape(),
                b.shape()
            )));
        }
        let mask = load_mask(&self.resolve(&e.label), &e.id)?;
        if mask.height != a.dim(1) || mask.width != a.dim(2) {
            return Err(EhctError::Validation(format!(
                "{}: mask {}x{} does not match images {}x{}",
                e.id,
                mask.height,
                mask.width,
                a.dim(1),
                a.dim(2)
            )));
        }
        Ok((ImagePair { id: e.id.clone(), a, b }, mask))
    }
}

/// Fails if any id occurs in more than one manifest.
pub fn check_disjoint(manifests: &[&Manifest]) -> Result<()> {
    let mut seen = HashSet::new();
    for m in manifests {
        for e in &m.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(EhctError::Validation(format!("id {:?} appears in more than one split", e.id)));
            }
        }
    }
    Ok(())
}

/// Images stacked as `[N, 3, H, W]`, masks flattened as `[N, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub a: Tensor,
    pub b: Tensor,
    pub masks: Vec<u8>,
    pub height: usize,
    pub width: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn from_samples(samples: &[(ImagePair, ChangeMask)], fallback_size: usize) -> Result<Self> {
        let (h, w) = samples.first().map_or((fallback_size, fallback_size), |(p, _)| (p.height(), p.width()));
        let mut a = Vec::with_capacity(samples.len() * 3 * h * w);
        let mut b = Vec::with_capacity(samples.len() * 3 * h * w);
        let mut masks = Vec::with_capacity(samples.len() * h * w);
        for (p, m) in samples {
            if p.height() != h || p.width() != w || m.height != h || m.width != w {
                return Err(EhctError::Validation(format!(
                    "{}: size differs from the rest of the batch ({h}x{w})",
                    p.id
                )));
            }
            a.extend_from_slice(p.a.data());
            b.extend_from_slice(p.b.data());
            masks.extend_from_slice(&m.data);
        }
        let n = samples.len();
        Ok(Self {
            ids: samples.iter().map(|(p, _)| p.id.clone()).collect(),
            a: Tensor::new([n, 3, h, w], a)?,
            b: Tensor::new([n, 3, h, w], b)?,
            masks,
            height: h,
            width: w,
        })
    }
}

/// Loads and stacks the given entries; files are read in parallel.
pub fn load_batch(manifest: &Manifest, indices: &[usize]) -> Result<Batch> {
    let samples = par::map_indexed(indices.len(), |k| manifest.load_sample(indices[k]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Batch::from_samples(&samples, manifest.tile_size)
}

/// Axis-aligned rectangle `[top, top + h) x [left, left + w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOptions {
    pub min_rects: usize,
    pub max_rects: usize,
    /// Rectangle sides as a fraction of the image size.
    pub min_side: f64,
    pub max_side: f64,
    /// Rectangle corners and sides are multiples of this many pixels.
    pub grid: usize,
    /// `image_b` is scaled by a factor in `1 ± jitter`.
    pub brightness_jitter: f64,
    /// When false no rectangles are painted and every mask is empty.
    pub changes: bool,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            min_rects: 1,
            max_rects: 4,
            min_side: 0.125,
            max_side: 0.375,
            grid: 1,
            brightness_jitter: 0.15,
            changes: true,
        }
    }
}

fn aligned(rng: &mut ChaCha8Rng, lo: usize, hi: usize, grid: usize) -> usize {
    let (lo, hi) = (lo.div_ceil(grid), hi / grid);
    rng.random_range(lo..=hi.max(lo)) * grid
}

/// One synthetic pair. Deterministic in `(seed, index, size, opts)`.
pub fn generate_sample(
    seed: u64,
    index: usize,
    size: usize,
    opts: &SynthOptions,
) -> (ImagePair, ChangeMask, Vec<Rect>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let n = size * size;
    let id = format!("synth_{index:05}");
    let grid = opts.grid.max(1);

    // background: a tint plus a few low-frequency waves plus fine grain
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.5));
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..3.0),
                rng.random_range(0.5..3.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.03..0.08),
            )
        })
        .collect();
    let grain: Vec<f64> = (0..n).map(|_| rng.random_range(-0.04..0.04)).collect();
    let mut a = vec![0.0; 3 * n];
    for p in 0..n {
        let (y, x) = ((p / size) as f64 / size as f64, (p % size) as f64 / size as f64);
        let wave: f64 =
            waves.iter().map(|&(fy, fx, ph, amp)| amp * (std::f64::consts::TAU * (fy * y + fx * x) + ph).sin()).sum();
        for ch in 0..3 {
            a[ch * n + p] = (tint[ch] + wave + grain[p]).clamp(0.0, 1.0);
        }
    }

    let mut b = a.clone();
    let mut mask = vec![0u8; n];
    let mut rects = Vec::new();
    if opts.changes {
        let count = rng.random_range(opts.min_rects..=opts.max_rects.max(opts.min_rects));
        let lo = ((opts.min_side * size as f64).round() as usize).max(1);
        let hi = ((opts.max_side * size as f64).round() as usize).max(lo);
        for _ in 0..count {
            let h = aligned(&mut rng, lo, hi, grid).clamp(grid, size);
            let w = aligned(&mut rng, lo, hi, grid).clamp(grid, size);
            let top = aligned(&mut rng, 0, size - h, grid);
            let left = aligned(&mut rng, 0, size - w, grid);
            let roof: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.7..0.95));
            for i in top..top + h {
                for j in left..left + w {
                    let p = i * size + j;
                    mask[p] = 1;
                    for ch in 0..3 {
                        b[ch * n + p] = (roof[ch] + 0.5 * grain[p]).clamp(0.0, 1.0);
                    }
                }
            }
            rects.push(Rect { top, left, h, w });
        }
    }
    let gain = 1.0 + rng.random_range(-opts.brightness_jitter..=opts.brightness_jitter);
    for v in &mut b {
        *v = (*v * gain).clamp(0.0, 1.0);
    }
    // store at 8-bit precision so that files and in-memory samples agree
    let q = |v: &f64| to_u8(*v) as f64 / 255.0;
    let a = Tensor::new([3, size, size], a.iter().map(q).collect()).expect("synth shape");
    let b = Tensor::new([3, size, size], b.iter().map(q).collect()).expect("synth shape");
    (ImagePair { id: id.clone(), a, b }, ChangeMask { id, height: size, width: size, data: mask }, rects)
}

/// Writes `count` synthetic pairs under `root` (LEVIR layout plus `manifest.json`).
pub fn synth_dataset(root: &Path, seed: u64, count: usize, size: usize, opts: &SynthOptions) -> Result<Manifest> {
    if size == 0 || !size.is_multiple_of(ENCODER_STRIDE) {
        return Err(EhctError::Dimension(format!(
            "synthetic size {size} is not a positive multiple of {ENCODER_STRIDE}"
        )));
    }
    if count == 0 {
        return Err(EhctError::Validation("count must be at least 1".into()));
    }
    if opts.min_rects > opts.max_rects
        || !(opts.min_side > 0.0 && opts.min_side <= opts.max_side && opts.max_side <= 1.0)
    {
        return Err(EhctError::Config(format!("inconsistent synthetic options {opts:?}")));
    }
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let (pair, mask, _) = generate_sample(seed, i, size, opts);
        let e = Manifest::levir_entry(&pair.id);
        save_image(&root.join(&e.a), &pair.a)?;
        save_image(&root.join(&e.b), &pair.b)?;
        save_mask(&root.join(&e.label), &mask)?;
        entries.push(e);
    }
    let m = Manifest { split: Split::Train, tile_size: size, entries, root: root.to_path_buf() };
    m.save(&root.join("manifest.json"))?;
    Ok(m)
}

/// Tiles every entry of `manifest` into `tile`-sized pieces written under `out`.
pub fn tile_manifest(manifest: &Manifest, tile: usize, out: &Path) -> Result<Manifest> {
    let mut entries = Vec::new();
    for i in 0..manifest.len() {
        let (pair, mask) = manifest.load_sample(i)?;
        for (p, m) in tile_pair(&pair, &mask, tile)? {
            let e = Manifest::levir_entry(&p.id);
            save_image(&out.join(&e.a), &p.a)?;
            save_image(&out.join(&e.b), &p.b)?;
            save_mask(&out.join(&e.label), &m)?;
            entries.push(e);
        }
    }
    let m = Manifest { split: manifest.split, tile_size: tile, entries, root: out.to_path_buf() };
    m.save(&out.join("manifest.json"))?;
    Ok(m)
}
