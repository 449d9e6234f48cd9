//! Batch plumbing: the transformed evaluation suite, per-transform metric
//! tables and run manifests.
//!
//! Suite layout, one PNG plus one JSON record per (input, transform):
//!
//! ```text
//! suite/
//!   face_000__identity.png
//!   face_000__identity.json      {"source", "label", "transform"}
//!   face_000__translate_9.png
//!   ...
//!   run_manifest.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::editor::{self, EditDirection};
use crate::encoder::{self, EncoderWeights};
use crate::error::{Error, Result};
use crate::generator::{self, GeneratorWeights};
use crate::image_io;
use crate::inversion::{self, Models};
use crate::latent::GeometricTransform;
use crate::metrics;
use crate::perceptual::{Perceptual, PerceptualConfig};
use crate::pnorm::PNormStats;
use crate::tensor::Tensor;

/// Full-scale translation magnitudes in pixels at 1024².
pub const FULL_SCALE_TRANSLATIONS: [f64; 3] = [50.0, 100.0, 150.0];
pub const ROTATIONS_DEG: [f64; 3] = [10.0, 20.0, 30.0];
pub const SCALES: [f64; 4] = [7.0 / 8.0, 3.0 / 4.0, 9.0 / 8.0, 5.0 / 4.0];

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const RECONSTRUCTION_PNG: &str = "reconstruction.png";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grid {
    Identity,
    Full,
}

impl std::str::FromStr for Grid {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Grid::Identity),
            "full" => Ok(Grid::Full),
            _ => Err(Error::Config(format!("unknown grid {s:?} (expected identity or full)"))),
        }
    }
}

/// Translation magnitudes scaled linearly to `resolution` and rounded.
pub fn desk_translations(resolution: usize) -> [usize; 3] {
    FULL_SCALE_TRANSLATIONS.map(|t| (t * resolution as f64 / 1024.0).round() as usize)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledTransform {
    pub label: String,
    pub transform: GeometricTransform,
}

/// Transforms for one input image. Translation directions and rotation
/// signs are drawn from `rng`; translation components are rounded to whole
/// pixels so the shifted image needs no resampling.
pub fn grid_transforms(grid: Grid, resolution: usize, rng: &mut impl Rng) -> Vec<LabeledTransform> {
    let mut out = vec![LabeledTransform {
        label: "identity".into(),
        transform: GeometricTransform::identity(),
    }];
    if grid == Grid::Identity {
        return out;
    }
    for m in desk_translations(resolution) {
        let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let dx = (m as f64 * theta.cos()).round();
        let dy = (m as f64 * theta.sin()).round();
        out.push(LabeledTransform {
            label: format!("translate_{m}"),
            transform: GeometricTransform::translate(dx, dy),
        });
    }
    for deg in ROTATIONS_DEG {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        out.push(LabeledTransform {
            label: format!("rotate_{deg}"),
            transform: GeometricTransform::rotate(sign * deg),
        });
    }
    for s in SCALES {
        out.push(LabeledTransform {
            label: format!("scale_{s}"),
            transform: GeometricTransform::scaling(s),
        });
    }
    out
}

/// Per-image record written next to each suite PNG.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteItem {
    pub source: String,
    pub label: String,
    pub transform: GeometricTransform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub grid: Grid,
    pub resolution: usize,
    pub seed: u64,
    /// Full-scale pixel count to desk pixel count.
    pub translations: BTreeMap<String, usize>,
    pub items: Vec<String>,
}

/// Sorted PNG files in `dir`.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Write via a temporary file and rename, so readers never see partial files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Build the transformed suite from every PNG in `input_dir`.
pub fn make_transform_suite(input_dir: &Path, out_dir: &Path, grid: Grid, resolution: usize, seed: u64) -> Result<SuiteSummary> {
    let inputs = list_pngs(input_dir)?;
    if inputs.is_empty() {
        return Err(Error::Missing(format!("no PNG inputs in {}", input_dir.display())));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut items = Vec::new();
    for (i, path) in inputs.iter().enumerate() {
        let img = image_io::load_image(path)?;
        let (_, h, w) = img.chw();
        if h != resolution || w != resolution {
            return Err(Error::Config(format!(
                "{} is {w}x{h}, expected {resolution}x{resolution}",
                path.display()
            )));
        }
        // one stream per input so adding files does not reshuffle the others
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let name = stem(path);
        for lt in grid_transforms(grid, resolution, &mut rng) {
            let item_name = format!("{name}__{}", lt.label);
            let out = lt.transform.apply(&img);
            write_atomic(&out_dir.join(format!("{item_name}.png")), &image_io::encode_png(&out)?)?;
            let rec = SuiteItem {
                source: path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
                label: lt.label,
                transform: lt.transform,
            };
            write_atomic(&out_dir.join(format!("{item_name}.json")), &serde_json::to_vec_pretty(&rec)?)?;
            items.push(item_name);
        }
    }
    let translations = FULL_SCALE_TRANSLATIONS
        .iter()
        .zip(desk_translations(resolution))
        .map(|(f, d)| (format!("{f}"), d))
        .collect();
    Ok(SuiteSummary {
        grid,
        resolution,
        seed,
        translations,
        items,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub transform: String,
    pub count: usize,
    #[serde(with = "crate::inversion::inf_as_string")]
    pub psnr: f64,
    pub ssim: f64,
    /// Feature Fréchet proxy between reconstructions and targets; absent
    /// when a column has fewer than two images.
    pub feat_dist: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
}

impl EvalTable {
    pub const HEADER: &'static str = "transform,psnr,ssim,feat_dist";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            let psnr = if r.psnr.is_finite() { format!("{:.4}", r.psnr) } else { "inf".into() };
            let fd = r.feat_dist.map(|v| format!("{v:.6}")).unwrap_or_default();
            s.push_str(&format!("{},{psnr},{:.6},{fd}\n", r.transform, r.ssim));
        }
        s
    }

    pub fn row(&self, transform: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.transform == transform)
    }
}

/// Compare `results_dir/<name>/reconstruction.png` against
/// `originals_dir/<name>.png`, grouping by the suite label in
/// `originals_dir/<name>.json` (or `identity` when that record is missing).
pub fn eval_suite(results_dir: &Path, originals_dir: &Path, extractor: &Perceptual<f32>) -> Result<EvalTable> {
    let mut groups: BTreeMap<String, Vec<(Tensor<f32>, Tensor<f32>)>> = BTreeMap::new();
    if results_dir.exists() {
        let mut dirs: Vec<PathBuf> = fs::read_dir(results_dir)
            .map_err(|e| Error::io(results_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(RECONSTRUCTION_PNG).is_file())
            .collect();
        dirs.sort();
        for d in dirs {
            let name = d.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let original = originals_dir.join(format!("{name}.png"));
            if !original.is_file() {
                return Err(Error::Missing(format!("original for result {name}: {}", original.display())));
            }
            let label = match fs::read(originals_dir.join(format!("{name}.json"))) {
                Ok(bytes) => {
                    serde_json::from_slice::<SuiteItem>(&bytes)
                        .map_err(|e| Error::Malformed {
                            path: originals_dir.join(format!("{name}.json")),
                            reason: e.to_string(),
                        })?
                        .label
                }
                Err(_) => "identity".into(),
            };
            let rec = image_io::load_image(&d.join(RECONSTRUCTION_PNG))?;
            let orig = image_io::load_image(&original)?;
            groups.entry(label).or_default().push((rec, orig));
        }
    }
    let mut rows = Vec::new();
    for (label, pairs) in groups {
        let n = pairs.len() as f64;
        let mut psnr = 0.0;
        let mut ssim = 0.0;
        for (a, b) in &pairs {
            psnr += metrics::psnr(a, b)?;
            ssim += metrics::ssim(a, b)?;
        }
        let feat_dist = if pairs.len() >= 2 {
            let (recs, origs): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            Some(metrics::feature_distance(&recs, &origs, extractor)?.value)
        } else {
            None
        };
        rows.push(EvalRow {
            transform: label,
            count: n as usize,
            psnr: psnr / n,
            ssim: ssim / n,
            feat_dist,
        });
    }
    Ok(EvalTable { rows })
}

/// Where checkpoints live under a `--checkpoint-dir` root.
#[derive(Clone, Debug)]
pub struct CheckpointLayout {
    pub root: PathBuf,
}

impl CheckpointLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        CheckpointLayout { root: root.into() }
    }
    pub fn generator(&self) -> PathBuf {
        self.root.join("generator")
    }
    pub fn encoder(&self) -> PathBuf {
        self.root.join("encoder")
    }
    pub fn pnorm(&self) -> PathBuf {
        self.root.join("pnorm")
    }
    pub fn directions(&self) -> PathBuf {
        self.root.join("directions.json")
    }
}

/// Number of sampled latents averaged into the mean base code.
pub const MEAN_BASE_SAMPLES: usize = 200;

/// Checkpoints loaded from a [`CheckpointLayout`], shared read-only.
pub struct Assets {
    pub generator: GeneratorWeights<f32>,
    pub stats: PNormStats,
    pub encoder: Option<EncoderWeights<f32>>,
    pub perceptual: Perceptual<f32>,
    pub mean_base: Tensor<f32>,
    pub directions: Vec<EditDirection>,
}

impl Assets {
    /// The generator and P-norm statistics are required; the encoder and the
    /// direction file are optional.
    pub fn load(layout: &CheckpointLayout) -> Result<Self> {
        let gdir = layout.generator();
        if !gdir.join(checkpoint::MANIFEST).is_file() {
            return Err(Error::Missing(format!("generator checkpoint at {}", gdir.display())));
        }
        let generator = generator::load_weights(&gdir, None)?;
        let checksum = generator.checksum();
        let pdir = layout.pnorm();
        if !pdir.join(checkpoint::MANIFEST).is_file() {
            return Err(Error::Missing(format!("P-norm statistics at {}", pdir.display())));
        }
        let stats = PNormStats::load(&pdir, Some(&checksum))?;
        let edir = layout.encoder();
        let encoder = if edir.join(checkpoint::MANIFEST).is_file() {
            Some(encoder::load_encoder(&edir, Some(&checksum))?)
        } else {
            None
        };
        let dpath = layout.directions();
        let directions = if dpath.is_file() { editor::load_directions(&dpath)? } else { Vec::new() };
        let mean_base = inversion::mean_base_code(&generator, MEAN_BASE_SAMPLES, 0)?;
        Ok(Assets {
            generator,
            stats,
            encoder,
            perceptual: Perceptual::new(PerceptualConfig::default()),
            mean_base,
            directions,
        })
    }

    pub fn models(&self) -> Models<'_> {
        Models {
            generator: &self.generator,
            encoder: self.encoder.as_ref(),
            stats: &self.stats,
            perceptual: &self.perceptual,
            mean_base: Some(&self.mean_base),
        }
    }

    pub fn checksums(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("generator".into(), self.generator.checksum());
        m.insert("pnorm".into(), self.stats.checksum());
        if let Some(e) = &self.encoder {
            m.insert("encoder".into(), e.checksum());
        }
        m
    }
}

/// Record written by every artifact-producing command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// Checkpoint name to payload checksum.
    pub checkpoints: BTreeMap<String, String>,
    pub metrics: serde_json::Value,
    /// Seconds since the Unix epoch.
    pub started_at: f64,
    pub finished_at: f64,
    pub tool_version: String,
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl RunManifest {
    pub fn start(command: &str, config: serde_json::Value) -> Self {
        RunManifest {
            command: command.into(),
            config,
            seeds: BTreeMap::new(),
            checkpoints: BTreeMap::new(),
            metrics: serde_json::Value::Null,
            started_at: unix_now(),
            finished_at: 0.0,
            tool_version: env!("CARGO_PKG_VERSION").into(),
        }
    }

    pub fn finish(&mut self, metrics: serde_json::Value) {
        self.metrics = metrics;
        self.finished_at = unix_now();
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RUN_MANIFEST);
        write_atomic(&path, &serde_json::to_vec_pretty(self)?)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}
