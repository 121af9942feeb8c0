//! Synthetic "aging shapes" dataset: discs and rings whose radius encodes
//! the age group, with an attribute bit (solid vs ring), positional
//! nuisance, and analytic oracles for age, attribute, and center that make
//! translation quality directly measurable.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Scalar, Tensor};

pub const IMG_SIZE: usize = 32;
pub const GROUPS: usize = 4;
pub const ATTRS: usize = 2;
pub const RADII: [f64; GROUPS] = [4.0, 7.0, 10.0, 13.0];
pub const RING_THICKNESS: f64 = 2.0;
pub const NOISE_STD: f64 = 8.0;
pub const MAX_SHIFT: i32 = 3;
const CENTER: f64 = 16.0;
const THRESHOLD: f64 = 128.0;

// ── 8-bit grayscale image + PGM io ──────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage { width, height, pixels: vec![0; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    /// [1, 1, H, W] tensor of raw 8-bit values.
    pub fn to_tensor<F: Scalar>(&self) -> Tensor<F> {
        Tensor::from_vec(
            &[1, 1, self.height, self.width],
            self.pixels.iter().map(|&p| F::from_f64(p as f64)).collect(),
        )
    }

    /// Quantized model output back to an image; values must already be bins.
    pub fn from_tensor<F: Scalar>(t: &Tensor<F>) -> Result<GrayImage> {
        let (n, c, h, w) = t.dim4();
        if n != 1 || c != 1 {
            return Err(Error::shape(format!("expected [1,1,H,W], got {:?}", t.shape())));
        }
        Ok(GrayImage {
            width: w,
            height: h,
            pixels: t.data().iter().map(|v| v.as_f64().clamp(0.0, 255.0) as u8).collect(),
        })
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        write!(f, "P5\n{} {}\n255\n", self.width, self.height)?;
        f.write_all(&self.pixels)?;
        Ok(())
    }

    pub fn load_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
        let mut bytes = Vec::new();
        std::fs::File::open(path.as_ref())
            .map_err(|e| Error::Dataset(format!("{}: {e}", path.as_ref().display())))?
            .read_to_end(&mut bytes)?;
        Self::parse_pgm(&bytes)
    }

    pub fn parse_pgm(bytes: &[u8]) -> Result<GrayImage> {
        let bad = |m: &str| Error::Dataset(format!("pgm: {m}"));
        if bytes.len() < 2 || &bytes[0..2] != b"P5" {
            return Err(bad("missing P5 magic"));
        }
        // header: three whitespace-separated tokens after P5, # comments allowed
        let mut pos = 2;
        let mut tokens = Vec::new();
        while tokens.len() < 3 && pos < bytes.len() {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start < pos {
                tokens.push(
                    std::str::from_utf8(&bytes[start..pos])
                        .map_err(|_| bad("non-ascii header"))?
                        .parse::<usize>()
                        .map_err(|_| bad("non-numeric header token"))?,
                );
            }
        }
        if tokens.len() != 3 {
            return Err(bad("incomplete header"));
        }
        let (w, h, maxval) = (tokens[0], tokens[1], tokens[2]);
        if maxval != 255 {
            return Err(bad("only maxval 255 supported"));
        }
        pos += 1; // single whitespace after maxval
        if bytes.len() < pos + w * h {
            return Err(bad("truncated pixel data"));
        }
        Ok(GrayImage { width: w, height: h, pixels: bytes[pos..pos + w * h].to_vec() })
    }
}

// ── synthesis ───────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ToySample {
    pub image: GrayImage,
    pub group: usize,
    pub attr: usize,
    pub dx: i32,
    pub dy: i32,
}

fn validate_params(group: usize, attr: usize, dx: i32, dy: i32) -> Result<()> {
    if group >= GROUPS {
        return Err(Error::invalid(format!("group {group} out of range 0..{GROUPS}")));
    }
    if attr >= ATTRS {
        return Err(Error::invalid(format!("attr {attr} out of range 0..{ATTRS}")));
    }
    if dx.abs() > MAX_SHIFT || dy.abs() > MAX_SHIFT {
        return Err(Error::invalid(format!("shift ({dx},{dy}) outside +-{MAX_SHIFT}")));
    }
    Ok(())
}

/// Rasterize with exact radius, no jitter, no noise.
pub fn synth_clean(group: usize, attr: usize, dx: i32, dy: i32) -> Result<GrayImage> {
    validate_params(group, attr, dx, dy)?;
    Ok(rasterize(RADII[group], attr, dx, dy))
}

// Pixel (x, y) samples the plane at integer coordinates; the boundary is
// inclusive so the unjittered integer radii keep their full raster area.
fn rasterize(radius: f64, attr: usize, dx: i32, dy: i32) -> GrayImage {
    let cx = CENTER + dx as f64;
    let cy = CENTER + dy as f64;
    let inner = radius - RING_THICKNESS;
    let mut img = GrayImage::new(IMG_SIZE, IMG_SIZE);
    for y in 0..IMG_SIZE {
        for x in 0..IMG_SIZE {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            let fg = if attr == 0 { d <= radius } else { d >= inner && d <= radius };
            if fg {
                img.set(x, y, 255);
            }
        }
    }
    img
}

/// Jittered radius, additive Gaussian noise clipped to [0, 255].
pub fn synth_image(group: usize, attr: usize, dx: i32, dy: i32, rng: &mut Rng) -> Result<ToySample> {
    validate_params(group, attr, dx, dy)?;
    let radius = RADII[group] + rng.range(-0.5, 0.5);
    let mut image = rasterize(radius, attr, dx, dy);
    for p in &mut image.pixels {
        let noisy = *p as f64 + rng.normal() * NOISE_STD;
        *p = noisy.clamp(0.0, 255.0).round() as u8;
    }
    Ok(ToySample { image, group, attr, dx, dy })
}

// ── oracles ─────────────────────────────────────────────────────────────

fn foreground(image: &GrayImage) -> Vec<(usize, usize)> {
    let mut fg = Vec::new();
    for y in 0..image.height {
        for x in 0..image.width {
            if image.get(x, y) as f64 >= THRESHOLD {
                fg.push((x, y));
            }
        }
    }
    fg
}

fn centroid_of(fg: &[(usize, usize)]) -> (f64, f64) {
    let n = fg.len() as f64;
    let sx: f64 = fg.iter().map(|&(x, _)| x as f64).sum();
    let sy: f64 = fg.iter().map(|&(_, y)| y as f64).sum();
    (sx / n, sy / n)
}

/// Foreground centroid (x, y); the identity proxy.
pub fn oracle_center(image: &GrayImage) -> Result<(f64, f64)> {
    let fg = foreground(image);
    if fg.is_empty() {
        return Err(Error::Degenerate("empty foreground".into()));
    }
    Ok(centroid_of(&fg))
}

/// Attribute: mean raw value of the 3x3 patch around the centroid below the
/// threshold means the shape is hollow (ring).
pub fn oracle_attr(image: &GrayImage) -> Result<usize> {
    let (cx, cy) = oracle_center(image)?;
    let cx = cx.round() as isize;
    let cy = cy.round() as isize;
    let mut sum = 0.0;
    let mut count = 0.0;
    for oy in -1..=1isize {
        for ox in -1..=1isize {
            let x = cx + ox;
            let y = cy + oy;
            if x >= 0 && (x as usize) < image.width && y >= 0 && (y as usize) < image.height {
                sum += image.get(x as usize, y as usize) as f64;
                count += 1.0;
            }
        }
    }
    Ok(if sum / count < THRESHOLD { 1 } else { 0 })
}

/// Age group: estimate the radius from the thresholded mask (area for
/// solids, outer-boundary distance for rings) and snap to the nearest of
/// the four group radii.
pub fn oracle_age(image: &GrayImage) -> Result<usize> {
    let fg = foreground(image);
    if fg.is_empty() {
        return Err(Error::Degenerate("empty foreground".into()));
    }
    let (cx, cy) = centroid_of(&fg);
    let ring = oracle_attr(image)? == 1;
    let r_est = if ring {
        fg.iter()
            .map(|&(x, y)| ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt())
            .fold(0.0, f64::max)
    } else {
        (fg.len() as f64 / std::f64::consts::PI).sqrt()
    };
    let mut best = 0;
    for (g, &r) in RADII.iter().enumerate() {
        if (r_est - r).abs() < (r_est - RADII[best]).abs() {
            best = g;
        }
    }
    Ok(best)
}

// ── dataset generation and manifest ─────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetEntry {
    pub file: String,
    pub group: usize,
    pub attr: usize,
    pub dx: i32,
    pub dy: i32,
    pub split: Split,
}

#[derive(Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub entries: Vec<DatasetEntry>,
    images: Vec<GrayImage>,
}

impl Dataset {
    pub fn image(&self, idx: usize) -> &GrayImage {
        &self.images[idx]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| self.entries[i].split == split).collect()
    }

    /// Train indices per group, for sampling real latents of a target group.
    pub fn train_indices_by_group(&self) -> Vec<Vec<usize>> {
        let mut by_group = vec![Vec::new(); GROUPS];
        for i in self.indices_of(Split::Train) {
            by_group[self.entries[i].group].push(i);
        }
        by_group
    }

    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
        let manifest_path = manifest_path.as_ref();
        let dir = manifest_path
            .parent()
            .ok_or_else(|| Error::Dataset("manifest has no parent directory".into()))?
            .to_path_buf();
        let text = std::fs::read_to_string(manifest_path)
            .map_err(|e| Error::Dataset(format!("{}: {e}", manifest_path.display())))?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Dataset("empty manifest".into()))?;
        if header.trim() != "file,g,a,dx,dy,split" {
            return Err(Error::Dataset(format!("unexpected manifest header: {header}")));
        }
        let mut entries = Vec::new();
        let mut images = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 6 {
                return Err(Error::Dataset(format!("line {}: expected 6 columns", lineno + 2)));
            }
            let parse_err = |what: &str| Error::Dataset(format!("line {}: bad {what}", lineno + 2));
            let entry = DatasetEntry {
                file: cols[0].to_string(),
                group: cols[1].parse().map_err(|_| parse_err("g"))?,
                attr: cols[2].parse().map_err(|_| parse_err("a"))?,
                dx: cols[3].parse().map_err(|_| parse_err("dx"))?,
                dy: cols[4].parse().map_err(|_| parse_err("dy"))?,
                split: match cols[5].trim() {
                    "train" => Split::Train,
                    "test" => Split::Test,
                    other => return Err(Error::Dataset(format!("line {}: bad split {other}", lineno + 2))),
                },
            };
            images.push(GrayImage::load_pgm(dir.join(&entry.file))?);
            entries.push(entry);
        }
        Ok(Dataset { dir, entries, images })
    }
}

/// Generate a balanced dataset of `count` samples under `out_dir`, write
/// PGM files plus the CSV manifest, and return the manifest path.
pub fn dataset_generate(count: usize, seed: u64, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    let cells = GROUPS * ATTRS;
    if count == 0 || count % cells != 0 {
        return Err(Error::invalid(format!(
            "count {count} must be a positive multiple of {cells} for a balanced dataset"
        )));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let root = Rng::new(seed);
    let mut manifest = String::from("file,g,a,dx,dy,split\n");
    for i in 0..count {
        let cell = i % cells;
        let group = cell / ATTRS;
        let attr = cell % ATTRS;
        let mut rng = root.fork(i as u64);
        let dx = rng.below(2 * MAX_SHIFT as usize + 1) as i32 - MAX_SHIFT;
        let dy = rng.below(2 * MAX_SHIFT as usize + 1) as i32 - MAX_SHIFT;
        let sample = synth_image(group, attr, dx, dy, &mut rng)?;
        // split by index hash: ~20% test, disjoint from train by construction
        let split = if root.fork(i as u64).fork(0x5EED).below(5) == 0 {
            Split::Test
        } else {
            Split::Train
        };
        let file = format!("sample_{i:05}.pgm");
        sample.image.save_pgm(out_dir.join(&file))?;
        let _ = writeln!(manifest, "{file},{group},{attr},{dx},{dy},{}", split.as_str());
    }
    let manifest_path = out_dir.join("manifest.csv");
    std::fs::write(&manifest_path, manifest)?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_solid_pixel_count_near_area_formula() {
        let img = synth_clean(3, 0, 0, 0).unwrap();
        let count = img.pixels.iter().filter(|&&p| p == 255).count() as f64;
        let expect = std::f64::consts::PI * 13.0 * 13.0;
        assert!((count - expect).abs() <= 8.0, "count {count} vs {expect}");
    }

    #[test]
    fn ring_center_is_background() {
        for g in 0..GROUPS {
            let img = synth_clean(g, 1, 0, 0).unwrap();
            assert_eq!(img.get(16, 16), 0, "group {g} ring should be hollow");
        }
    }

    #[test]
    fn synth_is_deterministic_per_seed() {
        let a = synth_image(2, 1, 1, -2, &mut Rng::new(9)).unwrap();
        let b = synth_image(2, 1, 1, -2, &mut Rng::new(9)).unwrap();
        assert_eq!(a.image, b.image);
        let c = synth_image(2, 1, 1, -2, &mut Rng::new(10)).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn out_of_range_params_fault() {
        let mut rng = Rng::new(1);
        assert!(synth_image(4, 0, 0, 0, &mut rng).is_err());
        assert!(synth_image(0, 2, 0, 0, &mut rng).is_err());
        assert!(synth_image(0, 0, 4, 0, &mut rng).is_err());
        assert!(synth_image(0, 0, 0, -4, &mut rng).is_err());
    }

    #[test]
    fn oracle_age_on_clean_shapes() {
        assert_eq!(oracle_age(&synth_clean(2, 0, 0, 0).unwrap()).unwrap(), 2);
        assert_eq!(oracle_age(&synth_clean(0, 1, 0, 0).unwrap()).unwrap(), 0);
        for g in 0..GROUPS {
            for a in 0..ATTRS {
                assert_eq!(oracle_age(&synth_clean(g, a, 2, -3).unwrap()).unwrap(), g);
            }
        }
    }

    #[test]
    fn oracle_age_under_noise_monte_carlo() {
        let mut rng = Rng::new(1234);
        let mut correct = 0;
        let trials = 1000;
        for t in 0..trials {
            let g = t % GROUPS;
            let a = (t / GROUPS) % ATTRS;
            let s = synth_image(g, a, (t % 7) as i32 - 3, (t % 5) as i32 - 2, &mut rng).unwrap();
            if oracle_age(&s.image).unwrap() == g && oracle_attr(&s.image).unwrap() == a {
                correct += 1;
            }
        }
        let rate = correct as f64 / trials as f64;
        assert!(rate >= 0.99, "oracle self-consistency {rate}");
    }

    #[test]
    fn oracle_attr_and_center_on_clean_shapes() {
        assert_eq!(oracle_attr(&synth_clean(1, 0, 0, 0).unwrap()).unwrap(), 0);
        assert_eq!(oracle_attr(&synth_clean(1, 1, 0, 0).unwrap()).unwrap(), 1);

        let (cx, cy) = oracle_center(&synth_clean(2, 0, 0, 0).unwrap()).unwrap();
        assert!((cx - 16.0).abs() <= 0.5 && (cy - 16.0).abs() <= 0.5, "({cx},{cy})");
    }

    #[test]
    fn nuisance_recoverable_within_one_pixel() {
        for (dx, dy) in [(3, -3), (-2, 1), (0, 3), (-3, -1)] {
            for a in 0..ATTRS {
                let img = synth_clean(2, a, dx, dy).unwrap();
                let (cx, cy) = oracle_center(&img).unwrap();
                let ex = 16.0 + dx as f64;
                let ey = 16.0 + dy as f64;
                let err = ((cx - ex).powi(2) + (cy - ey).powi(2)).sqrt();
                assert!(err <= 1.0, "centroid error {err} at ({dx},{dy}) attr {a}");
            }
        }
    }

    #[test]
    fn empty_foreground_faults() {
        let img = GrayImage::new(IMG_SIZE, IMG_SIZE);
        assert!(oracle_age(&img).is_err());
        assert!(oracle_center(&img).is_err());
    }

    #[test]
    fn pgm_round_trip() {
        let img = synth_clean(1, 1, 2, 2).unwrap();
        let dir = std::env::temp_dir().join("ageflow_pgm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.pgm");
        img.save_pgm(&path).unwrap();
        let back = GrayImage::load_pgm(&path).unwrap();
        assert_eq!(img, back);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn dataset_generation_balance_and_determinism() {
        let dir1 = std::env::temp_dir().join("ageflow_ds_test1");
        let dir2 = std::env::temp_dir().join("ageflow_ds_test2");
        std::fs::remove_dir_all(&dir1).ok();
        std::fs::remove_dir_all(&dir2).ok();

        let m1 = dataset_generate(80, 7, &dir1).unwrap();
        let m2 = dataset_generate(80, 7, &dir2).unwrap();
        let t1 = std::fs::read_to_string(&m1).unwrap();
        let t2 = std::fs::read_to_string(&m2).unwrap();
        assert_eq!(t1, t2);

        let ds = Dataset::load(&m1).unwrap();
        assert_eq!(ds.len(), 80);
        let mut per_cell = [[0usize; ATTRS]; GROUPS];
        for e in &ds.entries {
            per_cell[e.group][e.attr] += 1;
        }
        for row in per_cell {
            for c in row {
                assert_eq!(c, 10);
            }
        }
        // train and test are disjoint and both non-empty
        let train = ds.indices_of(Split::Train);
        let test = ds.indices_of(Split::Test);
        assert_eq!(train.len() + test.len(), 80);
        assert!(!train.is_empty() && !test.is_empty());

        // same file bytes across the two runs
        for e in &ds.entries {
            let b1 = std::fs::read(dir1.join(&e.file)).unwrap();
            let b2 = std::fs::read(dir2.join(&e.file)).unwrap();
            assert_eq!(b1, b2);
        }

        std::fs::remove_dir_all(&dir1).ok();
        std::fs::remove_dir_all(&dir2).ok();
    }

    #[test]
    fn count_must_be_balanced() {
        let dir = std::env::temp_dir().join("ageflow_ds_badcount");
        assert!(dataset_generate(81, 7, &dir).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn oracles_close_the_loop_on_clean_regeneration() {
        let dir = std::env::temp_dir().join("ageflow_ds_loop");
        std::fs::remove_dir_all(&dir).ok();
        let m = dataset_generate(40, 3, &dir).unwrap();
        let ds = Dataset::load(&m).unwrap();
        for e in &ds.entries {
            let clean = synth_clean(e.group, e.attr, e.dx, e.dy).unwrap();
            assert_eq!(oracle_age(&clean).unwrap(), e.group);
            assert_eq!(oracle_attr(&clean).unwrap(), e.attr);
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
