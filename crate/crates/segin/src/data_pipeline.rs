//! Dataset handling and self-supervised sample construction.
//!
//! Paired images live under `root/{trainA,trainB,testA,testB}/NNNN.png` with
//! matching filenames; a manifest is a JSON-lines file of pairs. Training
//! samples pair an input with its ground truth acting as a fake reference,
//! and the assembled auxiliary image is corrupted (block shifts, repeats,
//! random matches, occasional full shuffles) to simulate the mismatches real
//! references produce.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};
use ndarray::{s, Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::FeatureExtractorConfig;
use crate::semantic_match::{
    semantic_match_full, AuxiliarySample, CorrespondenceMap, MatchError, PatchSpec,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("manifest entry missing on disk: {0}")]
    MissingFile(PathBuf),
    #[error("cannot decode image {path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error(transparent)]
    Match(#[from] MatchError),
}

/// Dataset split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_a(&self) -> &'static str {
        match self {
            Split::Train => "trainA",
            Split::Test => "testA",
        }
    }

    pub fn dir_b(&self) -> &'static str {
        match self {
            Split::Train => "trainB",
            Split::Test => "testB",
        }
    }
}

/// Paired dataset description: every entry is an (input, target) path pair.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub pairs: Vec<(PathBuf, PathBuf)>,
    pub image_size: usize,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ManifestLine {
    input: PathBuf,
    target: PathBuf,
}

impl DatasetManifest {
    /// Build a manifest by pairing identically-named files in the split's A/B
    /// directories, sorted by filename.
    pub fn scan(root: &Path, split: Split, image_size: usize) -> Result<Self, DataError> {
        let dir_a = root.join(split.dir_a());
        let dir_b = root.join(split.dir_b());
        let mut names: Vec<String> = fs::read_dir(&dir_a)
            .map_err(|e| DataError::Io { path: dir_a.clone(), source: e })?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| n.ends_with(".png"))
            .collect();
        names.sort();
        let mut pairs = Vec::with_capacity(names.len());
        for name in names {
            let a = dir_a.join(&name);
            let b = dir_b.join(&name);
            if !b.exists() {
                return Err(DataError::MissingFile(b));
            }
            pairs.push((a, b));
        }
        Ok(DatasetManifest { root: root.to_path_buf(), split, pairs, image_size })
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut out = String::new();
        for (a, b) in &self.pairs {
            let line = serde_json::to_string(&ManifestLine { input: a.clone(), target: b.clone() })
                .expect("manifest line serializes");
            out.push_str(&line);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })
    }

    /// Read a JSON-lines manifest. Paths are taken as written; relative paths
    /// resolve against `root`.
    pub fn load(path: &Path, root: &Path, split: Split, image_size: usize) -> Result<Self, DataError> {
        let file = fs::File::open(path).map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })?;
        let mut pairs = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestLine = serde_json::from_str(&line)
                .map_err(|e| DataError::Manifest { line: idx + 1, msg: e.to_string() })?;
            pairs.push((entry.input, entry.target));
        }
        Ok(DatasetManifest { root: root.to_path_buf(), split, pairs, image_size })
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

/// Load a PNG as an `(H, W, 3)` tensor in `[0, 1]`, resizing (nearest) to the
/// requested square size when it differs.
pub fn load_image(path: &Path, size: usize) -> Result<Array3<f32>, DataError> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)
        .map_err(|e| DataError::Format { path: path.to_path_buf(), source: e })?
        .to_rgb8();
    let img = if (img.width() as usize, img.height() as usize) == (size, size) {
        img
    } else {
        image::imageops::resize(&img, size as u32, size as u32, image::imageops::FilterType::Nearest)
    };
    let mut out = Array3::zeros((size, size, 3));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(y as usize, x as usize, c)] = px[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

/// Write an `(H, W, 3)` tensor in `[0, 1]` as an 8-bit RGB PNG.
pub fn save_image(path: &Path, img: &Array3<f32>) -> Result<(), DataError> {
    let (h, w, _) = img.dim();
    let mut buf = ImageBuffer::<Rgb<u8>, Vec<u8>>::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        for c in 0..3 {
            let v = (img[(y as usize, x as usize, c)].clamp(0.0, 1.0) * 255.0).round() as u8;
            px[c] = v;
        }
    }
    buf.save(path).map_err(|e| DataError::Format { path: path.to_path_buf(), source: e })
}

/// Write a binary mask as a black/white PNG (foreground 255).
pub fn save_mask(path: &Path, mask: &Array2<u8>) -> Result<(), DataError> {
    let (h, w) = mask.dim();
    let mut buf = ImageBuffer::<Rgb<u8>, Vec<u8>>::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        let v = if mask[(y as usize, x as usize)] != 0 { 255 } else { 0 };
        *px = Rgb([v, v, v]);
    }
    buf.save(path).map_err(|e| DataError::Format { path: path.to_path_buf(), source: e })
}

/// Load every pair in manifest order.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<Vec<(Array3<f32>, Array3<f32>)>, DataError> {
    let mut out = Vec::with_capacity(manifest.pairs.len());
    for (a, b) in &manifest.pairs {
        let x = load_image(&manifest.resolve(a), manifest.image_size)?;
        let y = load_image(&manifest.resolve(b), manifest.image_size)?;
        out.push((x, y));
    }
    Ok(out)
}

/// Thresholds deciding which pixels count as colored foreground.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ForegroundPolicy {
    pub chroma_threshold: f32,
    pub white_threshold: f32,
}

impl Default for ForegroundPolicy {
    fn default() -> Self {
        ForegroundPolicy { chroma_threshold: 0.06, white_threshold: 0.97 }
    }
}

/// A pixel is foreground iff it has chroma above the threshold or is darker
/// than near-white; low-chroma near-white pixels are background.
pub fn extract_foreground_mask(image: &Array3<f32>, policy: &ForegroundPolicy) -> Array2<u8> {
    let (h, w, _) = image.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let r = image[(i, j, 0)];
        let g = image[(i, j, 1)];
        let b = image[(i, j, 2)];
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        u8::from(max - min > policy.chroma_threshold || min < policy.white_threshold)
    })
}

/// Corruption rates applied to auxiliary images during data construction.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PostProcessConfig {
    pub shift_prob: f64,
    pub max_shift: usize,
    pub repeat_prob: f64,
    pub random_match_prob: f64,
    pub noise_sample_prob: f64,
    pub seed: u64,
}

impl Default for PostProcessConfig {
    fn default() -> Self {
        PostProcessConfig {
            shift_prob: 0.1,
            max_shift: 2,
            repeat_prob: 0.1,
            random_match_prob: 0.1,
            noise_sample_prob: 0.05,
            seed: 0,
        }
    }
}

fn copy_block(dst: &mut Array3<f32>, src: &Array3<f32>, dst_pos: (usize, usize), src_pos: (usize, usize), delta: usize) {
    let (di, dj) = dst_pos;
    let (si, sj) = src_pos;
    let block = src
        .slice(s![si * delta..(si + 1) * delta, sj * delta..(sj + 1) * delta, ..])
        .to_owned();
    dst.slice_mut(s![di * delta..(di + 1) * delta, dj * delta..(dj + 1) * delta, ..])
        .assign(&block);
}

/// Corrupt the auxiliary image per foreground block: with the configured
/// probabilities a block is replaced by a spatially shifted block, by the
/// previous foreground block, or by a uniformly random reference block. At
/// most one corruption fires per position (shift wins over repeat over
/// random); the valid mask is never touched. Reads come from a snapshot of
/// the uncorrupted auxiliary, so corruptions do not cascade.
pub fn post_process(
    aux: &AuxiliarySample,
    corr: &CorrespondenceMap,
    r_image: &Array3<f32>,
    cfg: &PostProcessConfig,
    rng: &mut ChaCha8Rng,
) -> AuxiliarySample {
    let delta = aux.delta;
    let (h, w, _) = aux.aux.dim();
    let (hf, wf) = (h / delta, w / delta);
    let (hr, wr, _) = r_image.dim();
    let wrf = wr / delta;
    debug_assert_eq!(corr.n_r, (hr / delta) * wrf);

    let snapshot = aux.aux.clone();
    let mut out = aux.clone();
    let mut prev_fg: Option<(usize, usize)> = None;
    for i in 0..hf {
        for j in 0..wf {
            if aux.valid_mask[(i * delta, j * delta)] == 0 {
                continue;
            }
            let fire_shift = rng.gen_bool(cfg.shift_prob);
            let fire_repeat = rng.gen_bool(cfg.repeat_prob);
            let fire_random = rng.gen_bool(cfg.random_match_prob);
            if fire_shift {
                let di = rng.gen_range(-(cfg.max_shift as isize)..=cfg.max_shift as isize);
                let dj = rng.gen_range(-(cfg.max_shift as isize)..=cfg.max_shift as isize);
                let si = (i as isize + di).clamp(0, hf as isize - 1) as usize;
                let sj = (j as isize + dj).clamp(0, wf as isize - 1) as usize;
                copy_block(&mut out.aux, &snapshot, (i, j), (si, sj), delta);
            } else if fire_repeat {
                if let Some(p) = prev_fg {
                    copy_block(&mut out.aux, &snapshot, (i, j), p, delta);
                }
            } else if fire_random {
                let target = rng.gen_range(0..corr.n_r);
                copy_block(&mut out.aux, r_image, (i, j), (target / wrf, target % wrf), delta);
            }
            prev_fg = Some((i, j));
        }
    }
    out
}

/// With probability `noise_sample_prob`, replace the auxiliary content with a
/// uniform permutation of its own blocks (the valid mask stays put).
pub fn inject_noise_sample(
    aux: &AuxiliarySample,
    cfg: &PostProcessConfig,
    rng: &mut ChaCha8Rng,
) -> AuxiliarySample {
    if !rng.gen_bool(cfg.noise_sample_prob) {
        return aux.clone();
    }
    let delta = aux.delta;
    let (h, w, _) = aux.aux.dim();
    let (hf, wf) = (h / delta, w / delta);
    let mut perm: Vec<usize> = (0..hf * wf).collect();
    perm.shuffle(rng);
    let snapshot = aux.aux.clone();
    let mut out = aux.clone();
    for (pos, &src) in perm.iter().enumerate() {
        copy_block(&mut out.aux, &snapshot, (pos / wf, pos % wf), (src / wf, src % wf), delta);
    }
    out
}

/// One self-supervised training example.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub x: Array3<f32>,
    pub y: Array3<f32>,
    pub y_seg: Array2<u8>,
    pub aux: AuxiliarySample,
}

/// Build a training sample from a paired example: the target doubles as a
/// fake reference, its foreground mask supervises the segmentation sub-task,
/// and the matched auxiliary is corrupted to mimic real-reference mismatch.
pub fn construct_training_sample(
    x: &Array3<f32>,
    y: &Array3<f32>,
    extractor: &FeatureExtractorConfig,
    spec: &PatchSpec,
    fg_policy: &ForegroundPolicy,
    post_cfg: &PostProcessConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingSample, DataError> {
    let (aux, corr) = semantic_match_full(x, y, extractor, spec, fg_policy)?;
    let aux = post_process(&aux, &corr, y, post_cfg, rng);
    let aux = inject_noise_sample(&aux, post_cfg, rng);
    Ok(TrainingSample { x: x.clone(), y: y.clone(), y_seg: extract_foreground_mask(y, fg_policy), aux })
}

/// Deterministic per-sample generator stream.
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_mul(0x1_0000_0000).wrapping_add(index));
    rng
}

#[derive(Clone, Copy)]
enum Shape {
    Ellipse { cx: f64, cy: f64, a: f64, b: f64 },
    Rect { cx: f64, cy: f64, a: f64, b: f64 },
    Triangle { v: [(f64, f64); 3] },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, a, b } => {
                let dx = (x - cx) / a;
                let dy = (y - cy) / b;
                dx * dx + dy * dy <= 1.0
            }
            Shape::Rect { cx, cy, a, b } => (x - cx).abs() <= a && (y - cy).abs() <= b,
            Shape::Triangle { v } => {
                let sign = |p: (f64, f64), q: (f64, f64), r: (f64, f64)| {
                    (p.0 - r.0) * (q.1 - r.1) - (q.0 - r.0) * (p.1 - r.1)
                };
                let d1 = sign((x, y), v[0], v[1]);
                let d2 = sign((x, y), v[1], v[2]);
                let d3 = sign((x, y), v[2], v[0]);
                let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(has_neg && has_pos)
            }
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let i = (h * 6.0).floor() as i64 % 6;
    let f = h * 6.0 - (h * 6.0).floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

/// Render one synthetic pair: `y` is a filled colored shape on white, `x` is
/// its one-pixel black outline. The foreground fraction is kept within
/// `[0.05, 0.9]` by rejection.
fn render_pair(size: usize, rng: &mut ChaCha8Rng) -> (Array3<f32>, Array3<f32>) {
    let s = size as f64;
    loop {
        let kind = rng.gen_range(0..3);
        let shape = match kind {
            0 => Shape::Ellipse {
                cx: rng.gen_range(0.25..0.75) * s,
                cy: rng.gen_range(0.25..0.75) * s,
                a: rng.gen_range(0.12..0.42) * s,
                b: rng.gen_range(0.12..0.42) * s,
            },
            1 => Shape::Rect {
                cx: rng.gen_range(0.25..0.75) * s,
                cy: rng.gen_range(0.25..0.75) * s,
                a: rng.gen_range(0.1..0.4) * s,
                b: rng.gen_range(0.1..0.4) * s,
            },
            _ => Shape::Triangle {
                v: [
                    (rng.gen_range(0.05..0.95) * s, rng.gen_range(0.05..0.95) * s),
                    (rng.gen_range(0.05..0.95) * s, rng.gen_range(0.05..0.95) * s),
                    (rng.gen_range(0.05..0.95) * s, rng.gen_range(0.05..0.95) * s),
                ],
            },
        };
        let inside = Array2::from_shape_fn((size, size), |(i, j)| {
            shape.contains(j as f64 + 0.5, i as f64 + 0.5)
        });
        let count = inside.iter().filter(|&&v| v).count();
        let frac = count as f64 / (size * size) as f64;
        if !(0.05..=0.9).contains(&frac) {
            continue;
        }
        let color = hsv_to_rgb(rng.gen_range(0.0..1.0), rng.gen_range(0.5..1.0), rng.gen_range(0.4..0.95));
        let mut y = Array3::from_elem((size, size, 3), 1.0f32);
        let mut x = Array3::from_elem((size, size, 3), 1.0f32);
        for i in 0..size {
            for j in 0..size {
                if !inside[(i, j)] {
                    continue;
                }
                for c in 0..3 {
                    y[(i, j, c)] = color[c];
                }
                let boundary = i == 0
                    || j == 0
                    || i == size - 1
                    || j == size - 1
                    || !inside[(i - 1, j)]
                    || !inside[(i + 1, j)]
                    || !inside[(i, j - 1)]
                    || !inside[(i, j + 1)];
                if boundary {
                    for c in 0..3 {
                        x[(i, j, c)] = 0.0;
                    }
                }
            }
        }
        return (x, y);
    }
}

/// Generate a synthetic outline/fill dataset on disk. Files are byte-stable
/// for a fixed seed.
pub fn synth_shapes_dataset(
    n: usize,
    size: usize,
    seed: u64,
    root: &Path,
    split: Split,
) -> Result<DatasetManifest, DataError> {
    let dir_a = root.join(split.dir_a());
    let dir_b = root.join(split.dir_b());
    let dir_seg = root.join("seg");
    for d in [&dir_a, &dir_b, &dir_seg] {
        fs::create_dir_all(d).map_err(|e| DataError::Io { path: d.clone(), source: e })?;
    }
    let mut pairs = Vec::with_capacity(n);
    for idx in 0..n {
        let mut rng = sample_rng(seed, 0, idx as u64);
        let (x, y) = render_pair(size, &mut rng);
        let name = format!("{idx:04}.png");
        let pa = dir_a.join(&name);
        let pb = dir_b.join(&name);
        save_image(&pa, &x)?;
        save_image(&pb, &y)?;
        save_mask(&dir_seg.join(&name), &extract_foreground_mask(&y, &ForegroundPolicy::default()))?;
        pairs.push((pa, pb));
    }
    let manifest = DatasetManifest { root: root.to_path_buf(), split, pairs, image_size: size };
    let manifest_name = match split {
        Split::Train => "train_manifest.jsonl",
        Split::Test => "test_manifest.jsonl",
    };
    manifest.save(&root.join(manifest_name))?;
    Ok(manifest)
}

/// Write the segmentation cache (`root/seg/NNNN.png`, 0/255) for a manifest's
/// target images.
pub fn write_seg_cache(manifest: &DatasetManifest, policy: &ForegroundPolicy) -> Result<(), DataError> {
    let dir = manifest.root.join("seg");
    fs::create_dir_all(&dir).map_err(|e| DataError::Io { path: dir.clone(), source: e })?;
    for (_, b) in &manifest.pairs {
        let path = manifest.resolve(b);
        let img = load_image(&path, manifest.image_size)?;
        let name = path.file_name().expect("target path has a file name");
        save_mask(&dir.join(name), &extract_foreground_mask(&img, policy))?;
    }
    Ok(())
}

/// Convenience used by the CLI: append one line per pair to a writer.
pub fn dump_manifest<W: Write>(manifest: &DatasetManifest, w: &mut W) -> std::io::Result<()> {
    for (a, b) in &manifest.pairs {
        writeln!(w, "{} -> {}", a.display(), b.display())?;
    }
    Ok(())
}
