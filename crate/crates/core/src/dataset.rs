//! Labeled thin-section corpora: manifest files, loading into patch grids, and
//! a procedural generator of synthetic grain mosaics.
//!
//! A manifest is UTF-8 text with one image pair per line:
//!
//! ```text
//! # section_id | rock_type | angle | ppl_path | xpl_path
//! gr01 | granite | 0  | gr01_0_ppl.ppm  | gr01_0_xpl.ppm
//! gr01 | granite | 45 | gr01_45_ppl.ppm | gr01_45_xpl.ppm
//! ```
//!
//! Relative paths are resolved against the manifest's directory.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::classes::{RockType, NUM_ROCK_TYPES};
use crate::error::{Error, Result};
use crate::patching::{aligned_triples, slice_grid, AlignedTriple, PatchGrid};
use crate::preprocess::{preprocess_pair, RasterImage, Role};
use crate::raster_io::{read_raster, write_raster};

/// One PPL/XPL capture of a section at a stage rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    /// Stage rotation in degrees.
    pub angle: f64,
    pub ppl: PathBuf,
    pub xpl: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SectionRecord {
    pub section_id: String,
    pub rock_type: RockType,
    pub images: Vec<ImagePair>,
}

impl SectionRecord {
    pub fn class(&self) -> usize {
        self.rock_type.index()
    }
}

fn manifest_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Parses a manifest, checking class names, file existence and duplicate
/// `(section, angle)` rows. Rows are grouped by section in order of first
/// appearance.
pub fn ingest_manifest(path: &Path) -> Result<Vec<SectionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut records: Vec<SectionRecord> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('|').map(str::trim).collect();
        let [id, rock, angle, ppl, xpl] = fields[..] else {
            return Err(manifest_error(
                path,
                line_no,
                format!("expected 5 '|'-separated fields, found {}", fields.len()),
            ));
        };
        if id.is_empty() {
            return Err(manifest_error(path, line_no, "empty section id"));
        }
        let rock_type: RockType = rock
            .parse()
            .map_err(|_| manifest_error(path, line_no, format!("unknown rock type {rock:?}")))?;
        let angle: f64 = angle
            .parse()
            .ok()
            .filter(|a: &f64| a.is_finite())
            .ok_or_else(|| manifest_error(path, line_no, format!("bad rotation angle {angle:?}")))?;
        let resolve = |p: &str| -> Result<PathBuf> {
            let full = base.join(p);
            if !full.is_file() {
                return Err(manifest_error(
                    path,
                    line_no,
                    format!("section {id}: missing file {}", full.display()),
                ));
            }
            Ok(full)
        };
        let pair = ImagePair {
            angle,
            ppl: resolve(ppl)?,
            xpl: resolve(xpl)?,
        };
        match by_id.get(id) {
            Some(&k) => {
                let rec = &mut records[k];
                if rec.rock_type != rock_type {
                    return Err(manifest_error(
                        path,
                        line_no,
                        format!("section {id} was listed earlier as {}", rec.rock_type),
                    ));
                }
                if rec.images.iter().any(|p| p.angle == angle) {
                    return Err(manifest_error(
                        path,
                        line_no,
                        format!("duplicate angle {angle} for section {id}"),
                    ));
                }
                rec.images.push(pair);
            }
            None => {
                by_id.insert(id.to_string(), records.len());
                records.push(SectionRecord {
                    section_id: id.to_string(),
                    rock_type,
                    images: vec![pair],
                });
            }
        }
    }
    if records.is_empty() {
        log::warn!("manifest {} lists no images", path.display());
    }
    Ok(records)
}

/// Manifest text for `records`. Paths under `base` are written relative to it.
pub fn format_manifest(records: &[SectionRecord], base: &Path) -> String {
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
    let mut out = String::from("# section_id | rock_type | angle | ppl_path | xpl_path\n");
    for r in records {
        for img in &r.images {
            let _ = writeln!(
                out,
                "{} | {} | {} | {} | {}",
                r.section_id,
                r.rock_type,
                img.angle,
                rel(&img.ppl),
                rel(&img.xpl)
            );
        }
    }
    out
}

pub fn write_manifest(path: &Path, records: &[SectionRecord]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    fs::write(path, format_manifest(records, base)).map_err(|e| Error::io(path, e))
}

/// A section pre-processed and cut into aligned PPL/XPL/CI grids, one set per image.
#[derive(Debug, Clone)]
pub struct SectionPatches {
    pub record: SectionRecord,
    /// PPL, XPL and CI grids of each image.
    pub images: Vec<[PatchGrid<f32>; 3]>,
}

impl SectionPatches {
    /// Pre-processes and slices in-memory image pairs.
    pub fn from_images(record: SectionRecord, pairs: &[(RasterImage, RasterImage)], patch_size: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Empty(format!("section {} has no images", record.section_id)));
        }
        let id = record.section_id.clone();
        let images = pairs
            .iter()
            .map(|(ppl, xpl)| -> Result<[PatchGrid<f32>; 3]> {
                let processed = preprocess_pair(ppl, xpl).map_err(|e| section_error(&id, e))?;
                let [p, x, c] = Role::BRANCHES.map(|role| slice_grid(processed.get(role), &id, patch_size));
                Ok([p?, x?, c?])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { record, images })
    }

    /// Reads every image pair of `record` from disk, then as [`Self::from_images`].
    pub fn load(record: &SectionRecord, patch_size: usize) -> Result<Self> {
        let pairs = record
            .images
            .iter()
            .map(|img| Ok((read_raster(&img.ppl)?, read_raster(&img.xpl)?)))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| section_error(&record.section_id, e))?;
        Self::from_images(record.clone(), &pairs, patch_size)
    }

    pub fn class(&self) -> usize {
        self.record.class()
    }

    /// Patch positions over all images.
    pub fn patch_count(&self) -> usize {
        self.images.iter().map(|g| g[0].len()).sum()
    }

    pub fn triples(&self) -> Vec<Vec<AlignedTriple<'_, f32>>> {
        self.images
            .iter()
            .map(|[p, x, c]| aligned_triples(p, x, c).expect("grids of one pair share geometry"))
            .collect()
    }
}

fn section_error(id: &str, e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::InvalidArgument(format!("section {id}: {m}")),
        Error::Shape(m) => Error::Shape(format!("section {id}: {m}")),
        Error::Raster(m) => Error::Raster(format!("section {id}: {m}")),
        other => other,
    }
}

/// Loads a whole corpus; sections are processed in parallel.
pub fn load_corpus(records: &[SectionRecord], patch_size: usize) -> Result<Vec<SectionPatches>> {
    records
        .par_iter()
        .map(|r| SectionPatches::load(r, patch_size))
        .collect()
}

/// Appearance of one synthetic class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStyle {
    pub rock_type: RockType,
    /// Range of the mean grain spacing in pixels; each section draws from it.
    pub grain_scale: (f64, f64),
    /// Spacing in pixels of the cleavage stripes drawn across each PPL grain.
    pub cleavage_period: f64,
    pub ppl_palette: Vec<[u8; 3]>,
    pub xpl_palette: Vec<[u8; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub classes: Vec<ClassStyle>,
    pub sections_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub angles: Vec<f64>,
    /// Standard deviation of per-pixel noise, in 8-bit units.
    pub noise: f64,
    pub seed: u64,
}

fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|u| ((u + m) * 255.0).round() as u8)
}

impl SynthConfig {
    /// Styles for the first `num_classes` rock types. Grain spacing cycles
    /// through four octaves and cleavage spacing through four periods, in a
    /// pattern that gives every class a distinct pair; hues are spread around
    /// the wheel and each palette mixes its hue with a companion hue.
    pub fn standard(num_classes: usize, sections_per_class: usize, size: usize, seed: u64) -> Result<Self> {
        if num_classes == 0 || num_classes > NUM_ROCK_TYPES {
            return Err(Error::invalid(format!(
                "synthetic class count must be in 1..={NUM_ROCK_TYPES}, got {num_classes}"
            )));
        }
        let classes = (0..num_classes)
            .map(|k| {
                let hue = 360.0 * k as f64 / num_classes as f64;
                let companion = hue + 90.0 + 150.0 * (k % 2) as f64;
                let scale = 5.0 * 2f64.powi((k % 4) as i32);
                let cleavage_period = [3.0, 5.0, 8.0, 13.0][(k + k / 4) % 4];
                ClassStyle {
                    rock_type: RockType::ALL[k],
                    grain_scale: (scale, scale * 1.2),
                    cleavage_period,
                    ppl_palette: vec![
                        hsv(hue, 0.35, 0.9),
                        hsv(hue, 0.6, 0.7),
                        hsv(companion, 0.3, 0.95),
                        hsv(companion, 0.7, 0.5),
                    ],
                    xpl_palette: vec![
                        hsv(hue + 180.0, 0.8, 0.9),
                        hsv(hue + 120.0, 0.9, 0.8),
                        hsv(companion + 180.0, 0.6, 1.0),
                        [230, 230, 225],
                    ],
                }
            })
            .collect();
        let cfg = Self {
            classes,
            sections_per_class,
            height: size,
            width: size,
            angles: vec![0.0],
            noise: 6.0,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.sections_per_class == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::invalid(
                "synthetic corpus needs classes, sections and a positive size",
            ));
        }
        if self.angles.is_empty() || self.angles.iter().any(|a| !a.is_finite()) {
            return Err(Error::invalid("synthetic corpus needs at least one finite angle"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("noise must be finite and non-negative"));
        }
        for (i, c) in self.classes.iter().enumerate() {
            let (lo, hi) = c.grain_scale;
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                return Err(Error::invalid(format!(
                    "class {} has bad grain scale {lo}..{hi}",
                    c.rock_type
                )));
            }
            if !(c.cleavage_period > 0.0 && c.cleavage_period.is_finite()) {
                return Err(Error::invalid(format!("class {} has bad cleavage period", c.rock_type)));
            }
            if c.ppl_palette.is_empty() || c.xpl_palette.is_empty() {
                return Err(Error::invalid(format!("class {} has an empty palette", c.rock_type)));
            }
            for other in &self.classes[..i] {
                if other.rock_type == c.rock_type {
                    return Err(Error::invalid(format!("rock type {} is styled twice", c.rock_type)));
                }
                if other.ppl_palette == c.ppl_palette && other.xpl_palette == c.xpl_palette {
                    return Err(Error::invalid(format!(
                        "classes {} and {} share palettes",
                        other.rock_type, c.rock_type
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn section_count(&self) -> usize {
        self.classes.len() * self.sections_per_class
    }

    /// Section identifiers, class-major.
    pub fn section_id(&self, index: usize) -> String {
        let class = &self.classes[index / self.sections_per_class];
        format!("{}_{:02}", class.rock_type, index % self.sections_per_class)
    }
}

struct Grain {
    y: f64,
    x: f64,
    color: usize,
    /// Optic orientation in radians; sets where the grain goes extinct.
    orientation: f64,
    tint: f64,
}

/// Renders section `index` (class-major) at every configured angle as
/// `(angle, ppl, xpl)`. Output depends only on the config and the index.
pub fn render_section(cfg: &SynthConfig, index: usize) -> Result<Vec<(f64, RasterImage, RasterImage)>> {
    if index >= cfg.section_count() {
        return Err(Error::invalid(format!("section index {index} out of range")));
    }
    let style = &cfg.classes[index / cfg.sections_per_class];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);

    let (lo, hi) = style.grain_scale;
    let cell = if hi > lo { rng.gen_range(lo..hi) } else { lo };
    let (h, w) = (cfg.height, cfg.width);
    let rows = (h as f64 / cell).ceil() as usize + 1;
    let cols = (w as f64 / cell).ceil() as usize + 1;
    let grains: Vec<Grain> = (0..rows * cols)
        .map(|i| Grain {
            y: ((i / cols) as f64 + rng.gen::<f64>()) * cell,
            x: ((i % cols) as f64 + rng.gen::<f64>()) * cell,
            color: rng.gen_range(0..style.ppl_palette.len().min(style.xpl_palette.len())),
            orientation: rng.gen_range(0.0..std::f64::consts::PI),
            tint: rng.gen_range(0.85..1.15),
        })
        .collect();

    // Nearest and second-nearest grain per pixel; near-equal distances mark a boundary.
    let mut owner = vec![0usize; h * w];
    let mut boundary = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let (cy, cx) = ((py / cell) as isize, (px / cell) as isize);
            let (mut d1, mut d2, mut best) = (f64::INFINITY, f64::INFINITY, 0);
            for gy in cy - 1..=cy + 1 {
                for gx in cx - 1..=cx + 1 {
                    if gy < 0 || gx < 0 || gy as usize >= rows || gx as usize >= cols {
                        continue;
                    }
                    let gi = gy as usize * cols + gx as usize;
                    let g = &grains[gi];
                    let d = ((g.y - py).powi(2) + (g.x - px).powi(2)).sqrt();
                    if d < d1 {
                        d2 = d1;
                        d1 = d;
                        best = gi;
                    } else if d < d2 {
                        d2 = d;
                    }
                }
            }
            owner[y * w + x] = best;
            boundary[y * w + x] = d2 - d1 < 1.0;
        }
    }

    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("finite std");
    let mut out = Vec::with_capacity(cfg.angles.len());
    for &angle in &cfg.angles {
        let theta = angle.to_radians();
        let mut ppl = Vec::with_capacity(h * w * 3);
        let mut xpl = Vec::with_capacity(h * w * 3);
        for p in 0..h * w {
            let g = &grains[owner[p]];
            let edge = if boundary[p] { 0.35 } else { 1.0 };
            let extinction = 0.15 + 0.85 * (2.0 * (g.orientation - theta)).sin().powi(2);
            let (y, x) = ((p / w) as f64, (p % w) as f64);
            let phase = (x * g.orientation.cos() + y * g.orientation.sin()) / style.cleavage_period;
            let cleavage = 1.0 - 0.3 * (0.5 + 0.5 * (std::f64::consts::TAU * phase).sin());
            let base_p = style.ppl_palette[g.color];
            let base_x = style.xpl_palette[g.color];
            for ch in 0..3 {
                let vp = base_p[ch] as f64 * g.tint * cleavage * edge + noise.sample(&mut rng);
                let vx = base_x[ch] as f64 * extinction * edge + noise.sample(&mut rng);
                ppl.push(vp.round().clamp(0.0, 255.0) as u8);
                xpl.push(vx.round().clamp(0.0, 255.0) as u8);
            }
        }
        out.push((
            angle,
            RasterImage::from_bytes(h, w, Role::Ppl, ppl)?,
            RasterImage::from_bytes(h, w, Role::Xpl, xpl)?,
        ));
    }
    Ok(out)
}

/// Renders every section in memory, class-major.
pub fn synthesize(cfg: &SynthConfig) -> Result<Vec<(SectionRecord, Vec<(RasterImage, RasterImage)>)>> {
    cfg.validate()?;
    (0..cfg.section_count())
        .into_par_iter()
        .map(|i| {
            let views = render_section(cfg, i)?;
            let id = cfg.section_id(i);
            let record = SectionRecord {
                section_id: id.clone(),
                rock_type: cfg.classes[i / cfg.sections_per_class].rock_type,
                images: views
                    .iter()
                    .map(|(a, _, _)| ImagePair {
                        angle: *a,
                        ppl: PathBuf::from(format!("{id}_{a}_ppl.ppm")),
                        xpl: PathBuf::from(format!("{id}_{a}_xpl.ppm")),
                    })
                    .collect(),
            };
            Ok((record, views.into_iter().map(|(_, p, x)| (p, x)).collect()))
        })
        .collect()
}

/// Writes the corpus and `manifest.txt` into `out_dir`. Returns the records
/// (with absolute image paths) and every image file written.
pub fn generate_synthetic(cfg: &SynthConfig, out_dir: &Path) -> Result<(Vec<SectionRecord>, Vec<PathBuf>)> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let rendered = synthesize(cfg)?;
    let mut records = Vec::with_capacity(rendered.len());
    let mut files = Vec::new();
    for (mut record, pairs) in rendered {
        for (img, (ppl, xpl)) in record.images.iter_mut().zip(&pairs) {
            img.ppl = out_dir.join(&img.ppl);
            img.xpl = out_dir.join(&img.xpl);
            write_raster(&img.ppl, ppl)?;
            write_raster(&img.xpl, xpl)?;
            files.push(img.ppl.clone());
            files.push(img.xpl.clone());
        }
        records.push(record);
    }
    write_manifest(&out_dir.join("manifest.txt"), &records)?;
    Ok((records, files))
}
