//! Dataset ingestion, the run-length mask codec, stratified folds, the
//! 5-channel input assembly, and a synthetic corpus generator.
//!
//! On-disk layout mirrors the public competition corpus: `train.csv` with
//! header `id,rle_mask`, `depths.csv` with header `id,z` (integer feet), and
//! `images/<id>.png` (8-bit grayscale). PGM (binary `P5`) is accepted and
//! written as the portable fallback; the synthetic exporter uses it.
//!
//! RLE convention: column-major (top to bottom, then the next column),
//! 1-indexed, whitespace-separated `start length` pairs; the empty string is
//! the empty mask.

use crate::hashutil::derive_seed;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::io::{BufWriter, Write};
use std::path::Path;

pub const COVERAGE_BINS: usize = 10;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum RleError {
    #[error("odd token count {0}: runs are (start, length) pairs")]
    OddTokenCount(usize),
    #[error("token {index} ('{token}') is not a positive integer")]
    BadToken { index: usize, token: String },
    #[error("token {index}: run start {start} length {length} exceeds {area} pixels")]
    RunOutOfBounds {
        index: usize,
        start: usize,
        length: usize,
        area: usize,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}: {msg}")]
    Csv { path: String, msg: String },
    #[error("rle for '{id}': {source}")]
    Rle { id: String, source: RleError },
    #[error("no image found for id '{0}' (tried .png and .pgm)")]
    MissingImage(String),
    #[error("no depth entry for id '{0}'")]
    MissingDepth(String),
    #[error("image '{path}': {msg}")]
    Image { path: String, msg: String },
    #[error("{0}")]
    BadArgument(String),
}

/// Grayscale image with values in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(h: usize, w: usize, pixels: Vec<f64>) -> Image {
        assert_eq!(pixels.len(), h * w, "image size mismatch");
        Image { h, w, pixels }
    }

    pub fn constant(h: usize, w: usize, value: f64) -> Image {
        Image::new(h, w, vec![value; h * w])
    }
}

/// Binary mask, row-major, values strictly in {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize, pixels: Vec<u8>) -> Mask {
        assert_eq!(pixels.len(), h * w, "mask size mismatch");
        assert!(pixels.iter().all(|&p| p <= 1), "mask values must be 0 or 1");
        Mask { h, w, pixels }
    }

    pub fn empty(h: usize, w: usize) -> Mask {
        Mask::new(h, w, vec![0; h * w])
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().map(|&p| p as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.iter().all(|&p| p == 0)
    }

    pub fn coverage(&self) -> f64 {
        self.count() as f64 / (self.h * self.w) as f64
    }
}

/// One labelled sample. `fold` is 0 until a [`FoldPlan`] is applied.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub id: String,
    pub image: Image,
    pub mask: Mask,
    pub depth: f64,
    pub coverage: f64,
    pub coverage_bin: usize,
    pub fold: usize,
}

impl SampleRecord {
    pub fn new(id: String, image: Image, mask: Mask, depth: f64) -> SampleRecord {
        let coverage = mask.coverage();
        SampleRecord {
            id,
            image,
            mask,
            depth,
            coverage,
            coverage_bin: coverage_bin(coverage),
            fold: 0,
        }
    }
}

pub fn coverage_bin(coverage: f64) -> usize {
    ((coverage * COVERAGE_BINS as f64).floor() as usize).min(COVERAGE_BINS - 1)
}

/// Stratified fold assignment: per coverage bin, fold sizes differ by ≤ 1.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
    pub seed: u64,
}

// ---------------------------------------------------------------------------
// RLE codec
// ---------------------------------------------------------------------------

/// Decodes a run-length string into a mask (column-major, 1-indexed starts).
pub fn decode_rle(rle: &str, height: usize, width: usize) -> Result<Mask, RleError> {
    let tokens: Vec<&str> = rle.split_whitespace().collect();
    if tokens.len() % 2 != 0 {
        return Err(RleError::OddTokenCount(tokens.len()));
    }
    let area = height * width;
    let mut flat = vec![0u8; area]; // column-major scratch
    for pair in 0..tokens.len() / 2 {
        let parse = |index: usize| -> Result<usize, RleError> {
            let token = tokens[index];
            match token.parse::<usize>() {
                Ok(v) if v >= 1 => Ok(v),
                _ => Err(RleError::BadToken {
                    index,
                    token: token.to_string(),
                }),
            }
        };
        let start = parse(2 * pair)?;
        let length = parse(2 * pair + 1)?;
        if start + length - 1 > area {
            return Err(RleError::RunOutOfBounds {
                index: 2 * pair,
                start,
                length,
                area,
            });
        }
        for p in start - 1..start - 1 + length {
            flat[p] = 1;
        }
    }
    // Column-major position p covers (row = p % H, col = p / H).
    let mut pixels = vec![0u8; area];
    for (p, &v) in flat.iter().enumerate() {
        if v == 1 {
            pixels[(p % height) * width + p / height] = 1;
        }
    }
    Ok(Mask::new(height, width, pixels))
}

/// Encodes a mask as the minimal run list; empty masks give "".
pub fn encode_rle(mask: &Mask) -> String {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut current: Option<(usize, usize)> = None;
    for p in 0..mask.h * mask.w {
        let v = mask.pixels[(p % mask.h) * mask.w + p / mask.h];
        match (&mut current, v) {
            (Some((_, len)), 1) => *len += 1,
            (None, 1) => current = Some((p + 1, 1)),
            (Some(run), _) => {
                runs.push(*run);
                current = None;
            }
            (None, _) => {}
        }
    }
    if let Some(run) = current {
        runs.push(run);
    }
    runs.iter()
        .map(|(s, l)| format!("{s} {l}"))
        .collect::<Vec<_>>()
        .join(" ")
}

// ---------------------------------------------------------------------------
// Resizing and input assembly
// ---------------------------------------------------------------------------

/// Bilinear resize with corner alignment; exact on constant images.
pub fn resize_bilinear(image: &Image, out_h: usize, out_w: usize) -> Image {
    let mut out = vec![0.0; out_h * out_w];
    let scale = |dst: usize, src: usize| -> f64 {
        if dst <= 1 || src <= 1 {
            0.0
        } else {
            (src - 1) as f64 / (dst - 1) as f64
        }
    };
    let (sy, sx) = (scale(out_h, image.h), scale(out_w, image.w));
    for y in 0..out_h {
        let fy = y as f64 * sy;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(image.h - 1);
        let wy = fy - y0 as f64;
        for x in 0..out_w {
            let fx = x as f64 * sx;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(image.w - 1);
            let wx = fx - x0 as f64;
            let top = image.pixels[y0 * image.w + x0] * (1.0 - wx) + image.pixels[y0 * image.w + x1] * wx;
            let bottom =
                image.pixels[y1 * image.w + x0] * (1.0 - wx) + image.pixels[y1 * image.w + x1] * wx;
            out[y * out_w + x] = top * (1.0 - wy) + bottom * wy;
        }
    }
    Image::new(out_h, out_w, out)
}

/// Nearest-neighbor mask resize; preserves binary values exactly.
pub fn resize_mask_nearest(mask: &Mask, out_h: usize, out_w: usize) -> Mask {
    let mut out = vec![0u8; out_h * out_w];
    for y in 0..out_h {
        let sy = (y * mask.h) / out_h;
        for x in 0..out_w {
            let sx = (x * mask.w) / out_w;
            out[y * out_w + x] = mask.pixels[sy * mask.w + sx];
        }
    }
    Mask::new(out_h, out_w, out)
}

/// Builds the 5-channel input tensor, flat `[5, R, R]`:
/// grayscale, broadcast depth, vertical coordinate y/(R−1), two zero pads.
pub fn assemble_input(sample: &SampleRecord, resolution: usize) -> Result<Vec<f64>, DataError> {
    if resolution < 8 {
        return Err(DataError::BadArgument(format!(
            "resolution {resolution} is degenerate; need at least 8"
        )));
    }
    let r = resolution;
    let mut out = vec![0.0; 5 * r * r];
    let gray = resize_bilinear(&sample.image, r, r);
    out[..r * r].copy_from_slice(&gray.pixels);
    out[r * r..2 * r * r].iter_mut().for_each(|v| *v = sample.depth);
    for y in 0..r {
        let coord = y as f64 / (r - 1) as f64;
        out[2 * r * r + y * r..2 * r * r + (y + 1) * r]
            .iter_mut()
            .for_each(|v| *v = coord);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Folds
// ---------------------------------------------------------------------------

/// Shuffles each coverage bin with the seeded generator and deals its ids
/// round-robin to folds.
pub fn stratified_folds(records: &[SampleRecord], k: usize, seed: u64) -> Result<FoldPlan, DataError> {
    if k < 2 {
        return Err(DataError::BadArgument(format!("fold count {k} must be at least 2")));
    }
    let mut bins: Vec<Vec<&str>> = vec![Vec::new(); COVERAGE_BINS];
    for r in records {
        bins[r.coverage_bin].push(&r.id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["folds"]));
    let mut assignments = BTreeMap::new();
    for bin in &mut bins {
        bin.shuffle(&mut rng);
        for (j, id) in bin.iter().enumerate() {
            assignments.insert((*id).to_string(), j % k);
        }
    }
    Ok(FoldPlan { k, assignments, seed })
}

/// Writes the plan's fold ids onto the records.
pub fn apply_folds(records: &mut [SampleRecord], plan: &FoldPlan) {
    for r in records.iter_mut() {
        r.fold = *plan
            .assignments
            .get(&r.id)
            .unwrap_or_else(|| panic!("fold plan has no entry for id '{}'", r.id));
    }
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

/// Generates a deterministic synthetic corpus. Non-empty masks are smooth
/// blobs (thresholded sums of 2–4 radial bumps); backgrounds are horizontally
/// layered sinusoids with seeded noise, and the salt region repeats the
/// texture at reduced contrast with perturbed layering. Exactly
/// ⌊n·empty_fraction⌋ samples (the leading indices) have empty masks.
pub fn generate_synthetic(
    n: usize,
    resolution: usize,
    empty_fraction: f64,
    seed: u64,
) -> Result<Vec<SampleRecord>, DataError> {
    if !(0.0..1.0).contains(&empty_fraction) {
        return Err(DataError::BadArgument(format!(
            "empty_fraction {empty_fraction} must lie in [0, 1)"
        )));
    }
    if n == 0 {
        return Err(DataError::BadArgument("need at least one sample".into()));
    }
    if resolution < 8 {
        return Err(DataError::BadArgument(format!(
            "resolution {resolution} is degenerate; need at least 8"
        )));
    }
    let n_empty = (n as f64 * empty_fraction).floor() as usize;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i as u64);
        let mask = if i < n_empty {
            Mask::empty(resolution, resolution)
        } else {
            blob_mask(resolution, &mut rng)
        };
        let image = seismic_texture(resolution, &mask, &mut rng);
        let depth = rng.gen_range(0.0..1.0);
        records.push(SampleRecord::new(format!("synth_{i:05}"), image, mask, depth));
    }
    Ok(records)
}

fn blob_mask(r: usize, rng: &mut ChaCha8Rng) -> Mask {
    let bumps = rng.gen_range(2..=4);
    let params: Vec<(f64, f64, f64, f64)> = (0..bumps)
        .map(|_| {
            (
                rng.gen_range(0.15..0.85) * r as f64, // cy
                rng.gen_range(0.15..0.85) * r as f64, // cx
                rng.gen_range(0.08..0.30) * r as f64, // sigma
                rng.gen_range(0.6..1.0),              // amplitude
            )
        })
        .collect();
    let threshold = rng.gen_range(0.35..0.80);
    let mut field = vec![0.0; r * r];
    let mut peak = 0.0f64;
    for y in 0..r {
        for x in 0..r {
            let mut v = 0.0;
            for &(cy, cx, sigma, amp) in &params {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
            field[y * r + x] = v;
            peak = peak.max(v);
        }
    }
    let pixels = field.iter().map(|&v| u8::from(v > threshold * peak)).collect();
    Mask::new(r, r, pixels)
}

fn seismic_texture(r: usize, mask: &Mask, rng: &mut ChaCha8Rng) -> Image {
    let freq = rng.gen_range(2.0..6.0);
    let phase = rng.gen_range(0.0..TAU);
    let warp_amp = rng.gen_range(0.5..2.0);
    let warp_freq = rng.gen_range(1.0..3.0);
    let salt_freq = rng.gen_range(1.0..3.0);
    let salt_phase = rng.gen_range(0.0..TAU);
    let mut pixels = vec![0.0; r * r];
    for y in 0..r {
        for x in 0..r {
            let noise = rng.gen_range(-0.08..0.08);
            let v = if mask.pixels[y * r + x] == 0 {
                let warp = warp_amp * (TAU * warp_freq * x as f64 / r as f64).sin();
                0.5 + 0.22 * (TAU * freq * y as f64 / r as f64 + phase + warp).sin() + noise
            } else {
                // Salt: flatter layering, lower contrast, its own phase.
                0.5 + 0.08 * (TAU * salt_freq * y as f64 / r as f64 + salt_phase).sin() + 0.5 * noise
            };
            pixels[y * r + x] = v.clamp(0.0, 1.0);
        }
    }
    Image::new(r, r, pixels)
}

// ---------------------------------------------------------------------------
// PGM / PNG image files
// ---------------------------------------------------------------------------

/// Serializes an image as binary PGM (`P5`, maxval 255).
pub fn pgm_bytes(image: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.w, image.h).into_bytes();
    out.extend(
        image
            .pixels
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

fn write_pgm(path: &Path, image: &Image) -> std::io::Result<()> {
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&pgm_bytes(image))
}

/// Parses binary PGM bytes; `source` labels error messages.
pub fn image_from_pgm_bytes(data: &[u8], source: &str) -> Result<Image, DataError> {
    let err = |msg: &str| DataError::Image {
        path: source.to_string(),
        msg: msg.to_string(),
    };
    // Header: "P5", width, height, maxval, then one whitespace byte and raw data.
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 && pos < data.len() {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < data.len() && data[pos] == b'#' {
            while pos < data.len() && data[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&data[start..pos]).map_err(|_| err("non-ascii header"))?);
    }
    if fields.len() != 4 || fields[0] != "P5" {
        return Err(err("expected binary PGM (P5) header"));
    }
    let w: usize = fields[1].parse().map_err(|_| err("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| err("bad height"))?;
    let maxval: usize = fields[3].parse().map_err(|_| err("bad maxval"))?;
    if maxval == 0 || maxval > 255 {
        return Err(err("unsupported maxval"));
    }
    pos += 1; // single whitespace after maxval
    if data.len() < pos + w * h {
        return Err(err("truncated pixel data"));
    }
    let pixels = data[pos..pos + w * h]
        .iter()
        .map(|&b| b as f64 / maxval as f64)
        .collect();
    Ok(Image::new(h, w, pixels))
}

fn read_pgm(path: &Path) -> Result<Image, DataError> {
    let data = std::fs::read(path)?;
    image_from_pgm_bytes(&data, &path.display().to_string())
}

fn read_png(path: &Path) -> Result<Image, DataError> {
    let img = image::open(path)
        .map_err(|e| DataError::Image {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = img.into_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Image::new(h, w, pixels))
}

// ---------------------------------------------------------------------------
// Corpus layout
// ---------------------------------------------------------------------------

/// Writes `train.csv`, `depths.csv`, and `images/<id>.pgm`. Depths are
/// exported as integer feet on a 0–1000 scale.
pub fn save_corpus(records: &[SampleRecord], dir: &Path) -> Result<(), DataError> {
    std::fs::create_dir_all(dir.join("images"))?;
    let mut train = String::from("id,rle_mask\n");
    let mut depths = String::from("id,z\n");
    for r in records {
        train.push_str(&format!("{},{}\n", r.id, encode_rle(&r.mask)));
        depths.push_str(&format!("{},{}\n", r.id, (r.depth * 1000.0).round() as i64));
        write_pgm(&dir.join("images").join(format!("{}.pgm", r.id)), &r.image)?;
    }
    std::fs::write(dir.join("train.csv"), train)?;
    std::fs::write(dir.join("depths.csv"), depths)?;
    Ok(())
}

/// Loads a corpus in the competition layout. Depth feet are normalized to
/// [0, 1] by the corpus maximum.
pub fn load_corpus(dir: &Path) -> Result<Vec<SampleRecord>, DataError> {
    let depth_path = dir.join("depths.csv");
    let mut depth_feet: BTreeMap<String, f64> = BTreeMap::new();
    let mut reader = csv::Reader::from_path(&depth_path).map_err(|e| DataError::Csv {
        path: depth_path.display().to_string(),
        msg: e.to_string(),
    })?;
    for row in reader.records() {
        let row = row.map_err(|e| DataError::Csv {
            path: depth_path.display().to_string(),
            msg: e.to_string(),
        })?;
        let id = row.get(0).unwrap_or("").to_string();
        let z: f64 = row.get(1).unwrap_or("").trim().parse().map_err(|_| DataError::Csv {
            path: depth_path.display().to_string(),
            msg: format!("bad depth for id '{id}'"),
        })?;
        depth_feet.insert(id, z);
    }
    let max_z = depth_feet.values().cloned().fold(0.0, f64::max);

    let train_path = dir.join("train.csv");
    let mut reader = csv::Reader::from_path(&train_path).map_err(|e| DataError::Csv {
        path: train_path.display().to_string(),
        msg: e.to_string(),
    })?;
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| DataError::Csv {
            path: train_path.display().to_string(),
            msg: e.to_string(),
        })?;
        let id = row.get(0).unwrap_or("").to_string();
        let rle = row.get(1).unwrap_or("").to_string();

        let png = dir.join("images").join(format!("{id}.png"));
        let pgm = dir.join("images").join(format!("{id}.pgm"));
        let image = if png.exists() {
            read_png(&png)?
        } else if pgm.exists() {
            read_pgm(&pgm)?
        } else {
            return Err(DataError::MissingImage(id));
        };

        let mask = decode_rle(&rle, image.h, image.w).map_err(|source| DataError::Rle {
            id: id.clone(),
            source,
        })?;
        let feet = *depth_feet.get(&id).ok_or_else(|| DataError::MissingDepth(id.clone()))?;
        let depth = if max_z > 0.0 { feet / max_z } else { 0.0 };
        records.push(SampleRecord::new(id, image, mask, depth));
    }
    Ok(records)
}
