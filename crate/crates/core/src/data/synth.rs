//! Parametric glyph corpus: filled, textured "images" and outline-only
//! "sketches" of a per-category shape family, plus a canned description
//! corpus naming each family's attributes.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{Category, DatasetManifest, ManifestEntry, Split};
use super::raster::{encode_grid, encode_png, Grid, GridDtype};
use crate::error::{Error, Result};
use crate::text::describe::DescriptionRecord;
use crate::vision::Modality;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CORPUS_FILE: &str = "corpus.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Shape {
    Polygon { sides: usize },
    Star { points: usize, inner: f64 },
    Circle,
    Cross { arm: f64 },
    Crescent { offset: f64, cut: f64 },
}

impl Shape {
    /// Membership test in glyph-local coordinates (unit extent).
    fn contains(&self, x: f64, y: f64) -> bool {
        let r = (x * x + y * y).sqrt();
        match *self {
            Shape::Circle => r <= 1.0,
            Shape::Polygon { sides } => {
                let n = sides as f64;
                let a = y.atan2(x) + PI / 2.0;
                let sector = (a / (2.0 * PI / n)).rem_euclid(1.0) - 0.5;
                r * (sector * 2.0 * PI / n).cos() <= (PI / n).cos()
            }
            Shape::Star { points, inner } => {
                let n = points as f64;
                let a = y.atan2(x) + PI / 2.0;
                let t = ((a / (2.0 * PI / n)).rem_euclid(1.0) - 0.5).abs() * 2.0;
                r <= inner + (1.0 - inner) * (1.0 - t)
            }
            Shape::Cross { arm } => (x.abs() <= arm && y.abs() <= 1.0) || (y.abs() <= arm && x.abs() <= 1.0),
            Shape::Crescent { offset, cut } => r <= 1.0 && ((x - offset).powi(2) + y * y).sqrt() > cut,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlyphFamily {
    pub name: String,
    pub shape: Shape,
    /// Stroke wobble amplitude for sketches, in glyph units.
    pub jitter: f64,
    /// Phrases completing "it …" for the canned corpus.
    pub attributes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RasterFormat {
    Png,
    FloatGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub families: Vec<GlyphFamily>,
    pub unseen: Vec<String>,
    pub instances_per_modality: usize,
    pub image_size: usize,
    pub seen_test_fraction: f64,
    pub seed: u64,
    pub format: RasterFormat,
}

fn family(name: &str, shape: Shape, attributes: [&str; 5]) -> GlyphFamily {
    GlyphFamily {
        name: name.into(),
        shape,
        jitter: 0.05,
        attributes: attributes.iter().map(|s| s.to_string()).collect(),
    }
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            families: vec![
                family("triangle", Shape::Polygon { sides: 3 }, [
                    "has three straight sides",
                    "has three sharp corners",
                    "comes to a point at the top",
                    "rests on a flat base",
                    "looks like a wedge",
                ]),
                family("square", Shape::Polygon { sides: 4 }, [
                    "has four equal sides",
                    "has four right angle corners",
                    "has parallel opposite edges",
                    "looks like a box",
                    "has a flat top and a flat bottom",
                ]),
                family("star", Shape::Star { points: 5, inner: 0.45 }, [
                    "has five pointed arms",
                    "has sharp spikes around its edge",
                    "has notches between the points",
                    "looks like a twinkling star",
                    "is symmetric around its center",
                ]),
                family("circle", Shape::Circle, [
                    "has a smooth round edge",
                    "has no corners at all",
                    "looks like a solid disc",
                    "is equally wide in every direction",
                    "has a curved outline",
                ]),
                family("cross", Shape::Cross { arm: 0.3 }, [
                    "has four straight arms",
                    "has arms that meet in the center",
                    "looks like a plus sign",
                    "has twelve right angle corners",
                    "has a thick crossing at its middle",
                ]),
                family("crescent", Shape::Crescent { offset: 0.55, cut: 0.85 }, [
                    "has a curved inner edge",
                    "has two pointed horns",
                    "looks like a thin moon",
                    "is hollow on one side",
                    "has a smooth outer curve",
                ]),
            ],
            unseen: vec!["cross".into(), "crescent".into()],
            instances_per_modality: 20,
            image_size: 64,
            seen_test_fraction: 0.25,
            seed: 7,
            format: RasterFormat::Png,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let names: Vec<&str> = self.families.iter().map(|f| f.name.as_str()).collect();
        if let Some(u) = self.unseen.iter().find(|u| !names.contains(&u.as_str())) {
            return Err(Error::InvalidArgument(format!("unseen category `{u}` is not a family")));
        }
        if self.families.is_empty() || self.instances_per_modality == 0 || self.image_size < 8 {
            return Err(Error::InvalidArgument(
                "need ≥ 1 family, ≥ 1 instance and image_size ≥ 8".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.seen_test_fraction) {
            return Err(Error::InvalidArgument("seen_test_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Affine placement of a glyph in the raster.
struct Placement {
    scale: f64,
    rotation: f64,
    dx: f64,
    dy: f64,
}

impl Placement {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        Self {
            scale: rng.random_range(0.62..0.78),
            rotation: rng.random_range(-0.2..0.2),
            dx: rng.random_range(-0.06..0.06),
            dy: rng.random_range(-0.06..0.06),
        }
    }

    /// Raster-normalised point in `[-1, 1]²` → glyph coordinates.
    fn to_local(&self, u: f64, v: f64) -> (f64, f64) {
        let (x, y) = (u - self.dx, v - self.dy);
        let (s, c) = self.rotation.sin_cos();
        ((c * x + s * y) / self.scale, (-s * x + c * y) / self.scale)
    }
}

const SUPERSAMPLE: usize = 3;

fn coverage(size: usize, px: usize, py: usize, mut inside: impl FnMut(f64, f64) -> bool) -> f64 {
    let mut hits = 0;
    for sy in 0..SUPERSAMPLE {
        for sx in 0..SUPERSAMPLE {
            let u = (px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64) / size as f64 * 2.0 - 1.0;
            let v = (py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64) / size as f64 * 2.0 - 1.0;
            hits += inside(u, v) as usize;
        }
    }
    hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
}

fn render_image(f: &GlyphFamily, size: usize, rng: &mut ChaCha8Rng) -> Grid {
    let place = Placement::sample(rng);
    let dark_glyph: bool = rng.random();
    let (fill_range, bg_range) = if dark_glyph { (0.0..0.4, 0.6..1.0) } else { (0.6..1.0, 0.0..0.4) };
    let fill: [f64; 3] = std::array::from_fn(|_| rng.random_range(fill_range.clone()));
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(bg_range.clone()));
    let angle: f64 = rng.random_range(0.0..PI);
    let freq: f64 = rng.random_range(6.0..14.0);
    let phase: f64 = rng.random_range(0.0..2.0 * PI);
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let a = coverage(size, x, y, |u, v| {
                let (lx, ly) = place.to_local(u, v);
                f.shape.contains(lx, ly)
            });
            let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
            let stripe = 0.12 * (freq * (angle.cos() * u + angle.sin() * v) * PI + phase).sin();
            for c in 0..3 {
                let noise: f64 = rng.random_range(-0.04..0.04);
                let b = (bg[c] + stripe + noise).clamp(0.0, 1.0);
                data.push(a * fill[c] + (1.0 - a) * b);
            }
        }
    }
    Grid::new(size, size, 3, data).expect("sized")
}

fn render_sketch(f: &GlyphFamily, size: usize, rng: &mut ChaCha8Rng) -> Grid {
    let place = Placement::sample(rng);
    let wobble: [f64; 4] = [
        rng.random_range(2.0..5.0),
        rng.random_range(0.0..2.0 * PI),
        rng.random_range(2.0..5.0),
        rng.random_range(0.0..2.0 * PI),
    ];
    let stroke = 0.6 / size as f64 * 2.0 / place.scale;
    let warped = |x: f64, y: f64| {
        let jx = f.jitter * (wobble[0] * y + wobble[1]).sin();
        let jy = f.jitter * (wobble[2] * x + wobble[3]).sin();
        f.shape.contains(x + jx, y + jy)
    };
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let ink = coverage(size, x, y, |u, v| {
                let (lx, ly) = place.to_local(u, v);
                let here = warped(lx, ly);
                (0..8).any(|k| {
                    let t = k as f64 * PI / 4.0;
                    warped(lx + stroke * t.cos(), ly + stroke * t.sin()) != here
                })
            });
            data.push(1.0 - ink);
        }
    }
    Grid::new(size, size, 1, data).expect("sized")
}

/// Sentences for templates 2–4 for every family. Template 1 is a fixed
/// caption and needs no corpus entry.
pub fn canned_corpus(spec: &SyntheticSpec) -> Vec<DescriptionRecord> {
    let mut records = Vec::new();
    for f in &spec.families {
        for template_id in 2u8..=4 {
            let sentences = f
                .attributes
                .iter()
                .map(|a| match template_id {
                    2 => format!("A photo of a {} that {a}.", f.name),
                    3 => format!("The {} {a}.", f.name),
                    _ => format!("To distinguish a {}, notice that it {a}.", f.name),
                })
                .collect();
            records.push(DescriptionRecord {
                category: f.name.clone(),
                template_id,
                sentences,
                source: "synthetic".into(),
            });
        }
    }
    records
}

pub fn corpus_jsonl(records: &[DescriptionRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serialises") + "\n")
        .collect()
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Renders the corpus into `out_dir` (which must exist), writes
/// `manifest.json` and `corpus.jsonl` and returns the manifest.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    if !out_dir.is_dir() {
        return Err(Error::io(
            out_dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.instances_per_modality;
    let n_test = (n as f64 * spec.seen_test_fraction).round() as usize;
    let ext = match spec.format {
        RasterFormat::Png => "png",
        RasterFormat::FloatGrid => "grid",
    };
    let mut categories = Vec::new();
    let mut entries = Vec::new();
    for (label, f) in spec.families.iter().enumerate() {
        let seen = !spec.unseen.contains(&f.name);
        categories.push(Category { name: f.name.clone(), label, seen });
        for modality in [Modality::Image, Modality::Sketch] {
            for i in 0..n {
                let grid = match modality {
                    Modality::Image => render_image(f, spec.image_size, &mut rng),
                    _ => render_sketch(f, spec.image_size, &mut rng),
                };
                let dir = if modality == Modality::Image { "images" } else { "sketches" };
                let rel = Path::new(dir).join(&f.name).join(format!("{i:03}.{ext}"));
                let bytes = match spec.format {
                    RasterFormat::Png => encode_png(&grid)?,
                    RasterFormat::FloatGrid => encode_grid(&grid, GridDtype::F32),
                };
                write(&out_dir.join(&rel), &bytes)?;
                let split = match (seen, i >= n - n_test) {
                    (false, _) => Split::Unseen,
                    (true, true) => Split::SeenTest,
                    (true, false) => Split::SeenTrain,
                };
                entries.push(ManifestEntry {
                    instance_id: format!("{}-{modality}-{i:03}", f.name),
                    modality,
                    category: f.name.clone(),
                    split,
                    path: rel,
                });
            }
        }
    }
    let mut manifest = DatasetManifest::new("synthetic-glyphs", categories, entries)?;
    manifest.root = out_dir.to_path_buf();
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    write(&out_dir.join(CORPUS_FILE), corpus_jsonl(&canned_corpus(spec)).as_bytes())?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_contain_their_centre_or_body() {
        let spec = SyntheticSpec::default();
        for f in &spec.families {
            let probe = if matches!(f.shape, Shape::Crescent { .. }) { (-0.9, 0.0) } else { (0.0, 0.0) };
            assert!(f.shape.contains(probe.0, probe.1), "{}", f.name);
            assert!(!f.shape.contains(1.2, 1.2), "{}", f.name);
        }
    }

    #[test]
    fn sketch_is_mostly_white() {
        let spec = SyntheticSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for f in spec.families.iter().flat_map(|f| std::iter::repeat_n(f, 20)) {
            let g = render_sketch(f, 64, &mut rng);
            let white = g.data.iter().filter(|&&v| v >= 0.95).count() as f64 / g.data.len() as f64;
            let ink = g.data.iter().filter(|&&v| v <= 0.5).count();
            assert!(white >= 0.9, "{} {white}", f.name);
            assert!(ink > 20, "{} has almost no strokes", f.name);
        }
    }

    #[test]
    fn corpus_covers_templates_two_to_four() {
        let records = canned_corpus(&SyntheticSpec::default());
        assert_eq!(records.len(), 18);
        assert!(records.iter().all(|r| r.sentences.len() == 5 && (2..=4).contains(&r.template_id)));
    }

    #[test]
    fn missing_out_dir_is_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_synthetic(&SyntheticSpec::default(), &dir.path().join("nope")).is_err());
    }
}
