//! Synthetic lesion-classification images and their on-disk format.
//!
//! Negatives are smooth anatomy-like backgrounds; positives carry one
//! ragged, soft-edged elliptical lesion on top of such a background.
//! Datasets are stored as binary PGM files plus a `manifest.csv`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Grayscale image, row-major, intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height || width == 0 || height == 0 {
            return Err(Error::dim("image", "pixels", format!("{} pixels for {width}x{height}", pixels.len())));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }
}

pub const NEGATIVE: u8 = 0;
pub const POSITIVE: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    /// 0 = normal, 1 = lesion.
    pub label: u8,
    /// Virtual acquisition domain; `None` for clean samples.
    pub domain: Option<usize>,
    pub image: Image,
}

/// Generates `count` clean samples with exactly `round(count·pos_fraction)`
/// positives. Sample `i` depends only on `(seed, i)`.
pub fn generate_clean(count: usize, pos_fraction: f64, seed: u64, size: usize) -> Result<Vec<Sample>> {
    if size < 16 {
        return Err(Error::Config(format!("image size {size} is below the minimum of 16")));
    }
    if count < 2 {
        return Err(Error::Config(format!("sample count {count} is below 2")));
    }
    if !(pos_fraction > 0.0 && pos_fraction < 1.0) {
        return Err(Error::Config(format!("positive fraction {pos_fraction} outside (0, 1)")));
    }
    let positives = ((count as f64 * pos_fraction).round() as usize).clamp(1, count - 1);
    let mut labels: Vec<u8> = (0..count).map(|i| if i < positives { POSITIVE } else { NEGATIVE }).collect();
    labels.shuffle(&mut rng::tagged(seed, "labels"));
    Ok(labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let id = i as u64;
            let mut r = rng::stream(seed, id);
            let mut img = background(&mut r, size);
            if label == POSITIVE {
                add_lesion(&mut r, &mut img);
            }
            Sample {
                id,
                label,
                domain: None,
                image: img,
            }
        })
        .collect())
}

fn background(r: &mut Rng, size: usize) -> Image {
    let s = size as f64;
    let blobs: Vec<[f64; 4]> = (0..r.random_range(3..=6))
        .map(|_| {
            [
                r.random_range(0.0..s),
                r.random_range(0.0..s),
                r.random_range(0.15..0.45) * s,
                r.random_range(0.3..1.0),
            ]
        })
        .collect();
    // coarse lattice of value noise, bilinearly interpolated
    let cells = 8;
    let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut px = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64, y as f64);
            let mut v = 0.0;
            for &[cx, cy, sigma, amp] in &blobs {
                let d2 = (fx - cx).powi(2) + (fy - cy).powi(2);
                v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
            let gx = fx / s * cells as f64;
            let gy = fy / s * cells as f64;
            let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
            let (tx, ty) = (gx - ix as f64, gy - iy as f64);
            let l = |i: usize, j: usize| lattice[j * (cells + 1) + i];
            let noise = (1.0 - ty) * ((1.0 - tx) * l(ix, iy) + tx * l(ix + 1, iy))
                + ty * ((1.0 - tx) * l(ix, iy + 1) + tx * l(ix + 1, iy + 1));
            px.push(v + 0.08 * noise);
        }
    }
    let lo = px.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    for v in &mut px {
        *v = 0.1 + 0.7 * (*v - lo) / span;
    }
    Image::filled(size, size, 0.0).with_pixels(px)
}

impl Image {
    fn with_pixels(mut self, pixels: Vec<f64>) -> Self {
        self.pixels = pixels;
        self
    }
}

/// Soft elliptical lesion: axes 8–25% of the width, centre in the central 60%,
/// boundary radius modulated by low-order sinusoids (±15% in total).
fn add_lesion(r: &mut Rng, img: &mut Image) {
    let s = img.width as f64;
    let cx = r.random_range(0.2..0.8) * s;
    let cy = r.random_range(0.2..0.8) * s;
    let semi_a = 0.5 * r.random_range(0.08..0.25) * s;
    let semi_b = 0.5 * r.random_range(0.08..0.25) * s;
    let rot = r.random_range(0.0..std::f64::consts::PI);
    let boost = r.random_range(0.25..0.45);
    let ripple: Vec<(f64, f64, f64)> = (2..=4)
        .map(|m| (m as f64, r.random_range(-0.05..0.05), r.random_range(0.0..std::f64::consts::TAU)))
        .collect();
    let (sr, cr) = rot.sin_cos();
    let falloff = 0.25;
    for y in 0..img.height {
        for x in 0..img.width {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let u = (dx * cr + dy * sr) / semi_a;
            let v = (-dx * sr + dy * cr) / semi_b;
            let radius = 1.0 + ripple.iter().map(|&(m, c, ph)| c * (m * v.atan2(u) + ph).sin()).sum::<f64>();
            let rho = (u * u + v * v).sqrt() / radius;
            let mask = if rho <= 1.0 {
                1.0
            } else {
                (-0.5 * ((rho - 1.0) / falloff).powi(2)).exp()
            };
            let p = &mut img.pixels[y * img.width + x];
            *p = (*p + boost * mask).min(1.0);
        }
    }
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub path: String,
    pub label: u8,
    /// `-1` for clean samples.
    pub domain: i64,
    pub id: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: String,
    pub rows: Vec<ManifestRow>,
}

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const MANIFEST_HEADER: &str = "path,label,domain,id";

fn split_name(root: &Path) -> String {
    root.file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_owned()
}

pub fn encode_pgm(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn decode_pgm(bytes: &[u8], origin: &Path) -> Result<Image> {
    let bad = |d: &str| Error::format(origin, format!("malformed PGM header: {d}"));
    let mut pos = 0;
    let mut token = || -> Option<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token().as_deref() != Some("P5") {
        return Err(bad("expected magic P5"));
    }
    let mut num = |what: &str| -> Result<usize> {
        token()
            .and_then(|t| t.parse().ok())
            .filter(|&v: &usize| v > 0)
            .ok_or_else(|| bad(&format!("invalid {what}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 {
        return Err(bad(&format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let raster = bytes
        .get(start..start + width * height)
        .ok_or_else(|| Error::format(origin, "PGM raster shorter than width*height"))?;
    Image::new(width, height, raster.iter().map(|&b| b as f64 / 255.0).collect())
}

/// Writes `root/images/<id>.pgm` and `root/manifest.csv`.
pub fn save_dataset(samples: &[Sample], root: impl AsRef<Path>) -> Result<DatasetManifest> {
    let root = root.as_ref();
    let images = root.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut csv = String::from(MANIFEST_HEADER);
    csv.push('\n');
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let rel = format!("images/{:06}.pgm", s.id);
        let path = root.join(&rel);
        fs::write(&path, encode_pgm(&s.image)).map_err(|e| Error::io(&path, e))?;
        let domain = s.domain.map_or(-1, |d| d as i64);
        writeln!(csv, "{rel},{},{domain},{}", s.label, s.id).expect("writing to String");
        rows.push(ManifestRow {
            path: rel,
            label: s.label,
            domain,
            id: s.id,
        });
    }
    let manifest = root.join(MANIFEST_FILE);
    fs::write(&manifest, csv).map_err(|e| Error::io(&manifest, e))?;
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        split: split_name(root),
        rows,
    })
}

/// Accepts a dataset directory or the path of its manifest file.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let (root, file) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_FILE))
    } else {
        (path.parent().map(Path::to_path_buf).unwrap_or_default(), path.to_path_buf())
    };
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == MANIFEST_HEADER => {}
        Some(h) => return Err(Error::format(&file, format!("expected header `{MANIFEST_HEADER}`, found `{h}`"))),
        None => {
            return Ok(DatasetManifest {
                split: split_name(&root),
                root,
                rows: Vec::new(),
            })
        }
    }
    let mut rows = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = |d: String| Error::format(&file, format!("line {}: {d}", lineno + 2));
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        let [p, label, domain, id] = fields[..] else {
            return Err(at(format!("expected 4 fields, found {}", fields.len())));
        };
        let label: u8 = label.parse().map_err(|_| at(format!("invalid label `{label}`")))?;
        if label > 1 {
            return Err(at(format!("label {label} outside {{0, 1}}")));
        }
        let domain: i64 = domain.parse().map_err(|_| at(format!("invalid domain `{domain}`")))?;
        if domain < -1 {
            return Err(at(format!("domain {domain} below -1")));
        }
        let id: u64 = id.parse().map_err(|_| at(format!("invalid id `{id}`")))?;
        if !seen.insert(id) {
            return Err(at(format!("duplicate id {id}")));
        }
        rows.push(ManifestRow {
            path: p.to_owned(),
            label,
            domain,
            id,
        });
    }
    Ok(DatasetManifest {
        split: split_name(&root),
        root,
        rows,
    })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let manifest = read_manifest(path)?;
    manifest
        .rows
        .iter()
        .map(|row| {
            let file = manifest.root.join(&row.path);
            let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
            Ok(Sample {
                id: row.id,
                label: row.label,
                domain: (row.domain >= 0).then_some(row.domain as usize),
                image: decode_pgm(&bytes, &file)?,
            })
        })
        .collect()
}
