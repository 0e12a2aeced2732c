//! Ultrasound-like phantom images with known shadows, standing in for
//! clinical recordings.
//!
//! A phantom is a fan-shaped field of view filled with a background level,
//! bright elliptical tissue blobs, dark elliptical cavities, smoothed
//! multiplicative speckle and (optionally) true acoustic shadows rendered
//! with the same annular-sector model used for injection.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::GrayImage;
use crate::mask::BinaryMask;
use crate::rng::{self, Rng, SeedStreams};
use crate::shadow::{self, rasterize_mask, FanGeometry, Range, SamplingConfig, SectorSpec, ShadowMask};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Where a phantom's true shadows come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TrueShadows {
    None,
    Fixed(Vec<SectorSpec>),
    Sampled(SamplingConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub width: usize,
    pub height: usize,
    pub geometry: FanGeometry,
    pub num_blobs: usize,
    pub blob_intensity: Range,
    /// Semi-axis lengths in pixels.
    pub blob_radius: Range,
    pub num_cavities: usize,
    pub cavity_intensity: Range,
    pub cavity_radius: Range,
    pub speckle_strength: f64,
    pub background_level: f64,
    pub shadows: TrueShadows,
}

impl PhantomSpec {
    /// Default anatomy and shadows for a `width × height` phantom.
    pub fn for_image(width: usize, height: usize) -> Self {
        let scale = height as f64 / 64.0;
        PhantomSpec {
            width,
            height,
            geometry: FanGeometry::for_image(width, height),
            num_blobs: 4,
            blob_intensity: (0.6, 0.95),
            blob_radius: (3.0 * scale, 8.0 * scale),
            num_cavities: 1,
            cavity_intensity: (0.02, 0.12),
            cavity_radius: (4.0 * scale, 8.0 * scale),
            speckle_strength: 0.3,
            background_level: 0.45,
            shadows: TrueShadows::Sampled(SamplingConfig::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("phantom size must be positive".into()));
        }
        self.geometry.validate(self.width, self.height)?;
        let unit = |name: &str, (lo, hi): Range| {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(Error::Config(format!("{name} range [{lo}, {hi}] invalid")));
            }
            Ok(())
        };
        unit("blob_intensity", self.blob_intensity)?;
        unit("cavity_intensity", self.cavity_intensity)?;
        for (name, (lo, hi)) in [("blob_radius", self.blob_radius), ("cavity_radius", self.cavity_radius)] {
            if !(0.0 < lo && lo <= hi && hi.is_finite()) {
                return Err(Error::Config(format!("{name} range [{lo}, {hi}] invalid")));
            }
        }
        if !(self.speckle_strength >= 0.0 && self.speckle_strength.is_finite()) {
            return Err(Error::Config("speckle_strength must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.background_level) {
            return Err(Error::Config("background_level must lie in [0, 1]".into()));
        }
        match &self.shadows {
            TrueShadows::None => {}
            TrueShadows::Fixed(sectors) => sectors.iter().try_for_each(SectorSpec::validate)?,
            TrueShadows::Sampled(cfg) => cfg.validate(&self.geometry)?,
        }
        Ok(())
    }
}

/// One rendered phantom and its ground truth.
#[derive(Clone, Debug)]
pub struct Phantom {
    /// `[1, 1, H, W]` in `[0, 1]`, zero outside the fan.
    pub image: Tensor,
    /// The same render without shadows.
    pub shadow_free: Tensor,
    pub sectors: Vec<SectorSpec>,
    pub mask: ShadowMask,
    /// Shadow region of `mask`.
    pub truth: BinaryMask,
    /// Pixels dominated by a dark cavity.
    pub cavities: BinaryMask,
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    row: f64,
    col: f64,
    a: f64,
    b: f64,
    angle: f64,
    intensity: f64,
}

impl Ellipse {
    fn sample(rng: &mut Rng, geom: &FanGeometry, radius: Range, intensity: Range) -> Self {
        // centre at a random polar position well inside the fan
        let span = geom.r_max - geom.r_min;
        let r = geom.r_min + span * rng.random_range(0.15..0.75);
        let margin = 0.15 * (geom.theta_max - geom.theta_min);
        let t = rng.random_range(geom.theta_min + margin..geom.theta_max - margin);
        Ellipse {
            row: geom.apex_row + r * t.cos(),
            col: geom.apex_col + r * t.sin(),
            a: draw(rng, radius),
            b: draw(rng, radius),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            intensity: draw(rng, intensity),
        }
    }

    /// 1 in the core, smooth fall-off to 0 at the boundary.
    fn weight(&self, row: usize, col: usize) -> f64 {
        let (dy, dx) = (row as f64 - self.row, col as f64 - self.col);
        let (s, c) = self.angle.sin_cos();
        let u = (c * dx + s * dy) / self.a;
        let v = (-s * dx + c * dy) / self.b;
        let d = (u * u + v * v).sqrt();
        let t = ((1.0 - d) / 0.3).clamp(0.0, 1.0);
        t * t * (3.0 - 2.0 * t)
    }
}

fn draw(rng: &mut Rng, (lo, hi): Range) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Zero-mean, unit-variance noise smoothed with a 3×3 box.
fn smoothed_noise(rng: &mut Rng, width: usize, height: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..width * height).map(|_| rng.sample(StandardNormal)).collect();
    let mut out = vec![0.0; width * height];
    for r in 0..height {
        for c in 0..width {
            let mut acc = 0.0;
            let mut n = 0usize;
            for rr in r.saturating_sub(1)..(r + 2).min(height) {
                for cc in c.saturating_sub(1)..(c + 2).min(width) {
                    acc += raw[rr * width + cc];
                    n += 1;
                }
            }
            // a mean of n unit-variance draws has variance 1/n
            out[r * width + c] = acc / (n as f64).sqrt();
        }
    }
    out
}

/// Renders one phantom. Shadows are drawn last from the stream, so the
/// shadow-free render is identical to the shadowed one outside shadows.
pub fn generate_phantom(spec: &PhantomSpec, rng: &mut Rng) -> Result<Phantom> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let geom = &spec.geometry;
    let blobs: Vec<Ellipse> = (0..spec.num_blobs)
        .map(|_| Ellipse::sample(rng, geom, spec.blob_radius, spec.blob_intensity))
        .collect();
    let cavities: Vec<Ellipse> = (0..spec.num_cavities)
        .map(|_| Ellipse::sample(rng, geom, spec.cavity_radius, spec.cavity_intensity))
        .collect();
    let noise = smoothed_noise(rng, w, h);
    let sectors = match &spec.shadows {
        TrueShadows::None => Vec::new(),
        TrueShadows::Fixed(s) => s.clone(),
        TrueShadows::Sampled(cfg) => shadow::sample_sectors(geom, rng, cfg)?,
    };
    let mask = rasterize_mask(&sectors, geom, w, h);
    let fan = geom.region(w, h);

    let mut clean = vec![0f32; w * h];
    let mut cavity_bits = vec![false; w * h];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if !fan.get(r, c) {
                continue;
            }
            let mut v = spec.background_level;
            for e in &blobs {
                let wt = e.weight(r, c);
                v = v * (1.0 - wt) + e.intensity * wt;
            }
            for e in &cavities {
                let wt = e.weight(r, c);
                v = v * (1.0 - wt) + e.intensity * wt;
                cavity_bits[i] |= wt >= 0.5;
            }
            v *= 1.0 + spec.speckle_strength * noise[i];
            clean[i] = v.clamp(0.0, 1.0) as f32;
        }
    }
    let shadowed: Vec<f32> = clean
        .iter()
        .zip(mask.values())
        .map(|(&v, &m)| v * m)
        .collect();

    Ok(Phantom {
        image: Tensor::new([1, 1, h, w], shadowed)?,
        shadow_free: Tensor::new([1, 1, h, w], clean)?,
        truth: shadow::shadow_region(&mask),
        cavities: BinaryMask::new(w, h, cavity_bits)?,
        sectors,
        mask,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub role: Role,
    /// Relative to the manifest's directory.
    pub image_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cavity_path: Option<PathBuf>,
    /// Seed of the generator that rendered this entry.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sectors: Option<Vec<SectorSpec>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub spec: PhantomSpec,
    pub entries: Vec<ManifestEntry>,
}

fn write_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    GrayImage::new(
        mask.width(),
        mask.height(),
        mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect(),
    )?
    .write(path)
}

fn read_mask(path: &Path) -> Result<BinaryMask> {
    let img = GrayImage::read(path)?;
    if let Some(b) = img.pixels.iter().find(|&&b| b != 0 && b != 255) {
        return Err(Error::Corpus(format!(
            "{} is not a binary mask (found byte {b})",
            path.display()
        )));
    }
    BinaryMask::new(img.width, img.height, img.pixels.iter().map(|&b| b == 255).collect())
}

/// Writes `n_train` unlabeled images and `n_eval` images with truth and
/// cavity masks under `out_dir`, plus a JSON manifest. Train and eval draw
/// from disjoint seed streams.
pub fn build_corpus(
    spec: &PhantomSpec,
    n_train: usize,
    n_eval: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Manifest> {
    spec.validate()?;
    if n_train == 0 || n_eval == 0 {
        return Err(Error::InvalidArgument("corpus counts must be positive".into()));
    }
    if let Some(parent) = out_dir.parent().filter(|p| !p.as_os_str().is_empty()) {
        if !parent.is_dir() {
            return Err(Error::io(
                out_dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "parent directory does not exist"),
            ));
        }
    }
    for sub in ["train", "eval"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }

    let streams = SeedStreams::new(seed);
    let mut entries = Vec::with_capacity(n_train + n_eval);
    for i in 0..n_train {
        let item_seed = streams.item_seed(rng::CORPUS_TRAIN, i as u64);
        let p = generate_phantom(spec, &mut Rng::seed_from_u64(item_seed))?;
        let image_path = PathBuf::from(format!("train/train_{i:05}.png"));
        crate::imageio::save(&p.image, &out_dir.join(&image_path))?;
        entries.push(ManifestEntry {
            role: Role::Train,
            image_path,
            truth_path: None,
            cavity_path: None,
            seed: item_seed,
            sectors: None,
        });
    }
    for i in 0..n_eval {
        let item_seed = streams.item_seed(rng::CORPUS_EVAL, i as u64);
        let p = generate_phantom(spec, &mut Rng::seed_from_u64(item_seed))?;
        let image_path = PathBuf::from(format!("eval/eval_{i:05}.png"));
        let truth_path = PathBuf::from(format!("eval/eval_{i:05}_truth.png"));
        let cavity_path = PathBuf::from(format!("eval/eval_{i:05}_cavity.png"));
        crate::imageio::save(&p.image, &out_dir.join(&image_path))?;
        write_mask(&p.truth, &out_dir.join(&truth_path))?;
        write_mask(&p.cavities, &out_dir.join(&cavity_path))?;
        entries.push(ManifestEntry {
            role: Role::Eval,
            image_path,
            truth_path: Some(truth_path),
            cavity_path: Some(cavity_path),
            seed: item_seed,
            sectors: Some(p.sectors),
        });
    }

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed,
        spec: spec.clone(),
        entries,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// An evaluation image with its masks.
#[derive(Clone, Debug)]
pub struct EvalSample {
    pub image: Tensor,
    pub truth: BinaryMask,
    pub cavities: Option<BinaryMask>,
}

/// A manifest together with the directory its paths are relative to.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Corpus {
    /// Opens `path`, which is either a manifest file or a corpus directory.
    pub fn open(path: &Path) -> Result<Self> {
        let manifest_path = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let bytes = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Corpus(format!("{}: {e}", manifest_path.display())))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Corpus(format!(
                "manifest version {} unsupported",
                manifest.version
            )));
        }
        manifest.spec.validate()?;
        let dir = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Ok(Corpus { dir, manifest })
    }

    pub fn entries(&self, role: Role) -> impl Iterator<Item = &ManifestEntry> {
        self.manifest.entries.iter().filter(move |e| e.role == role)
    }

    fn load_image(&self, rel: &Path) -> Result<Tensor> {
        let t = crate::imageio::load(&self.dir.join(rel))?;
        let spec = &self.manifest.spec;
        if t.shape() != [1, 1, spec.height, spec.width] {
            return Err(Error::Corpus(format!(
                "{} has shape {:?}, expected {}x{}",
                rel.display(),
                t.shape(),
                spec.height,
                spec.width
            )));
        }
        Ok(t)
    }

    /// All training images, each `[1, 1, H, W]`.
    pub fn train_images(&self) -> Result<Vec<Tensor>> {
        let images: Vec<Tensor> = self
            .entries(Role::Train)
            .map(|e| self.load_image(&e.image_path))
            .collect::<Result<_>>()?;
        if images.is_empty() {
            return Err(Error::Corpus("corpus has no training images".into()));
        }
        Ok(images)
    }

    pub fn eval_samples(&self) -> Result<Vec<EvalSample>> {
        self.entries(Role::Eval)
            .map(|e| {
                let image = self.load_image(&e.image_path)?;
                let truth_path = e.truth_path.as_ref().ok_or_else(|| {
                    Error::Corpus(format!("{} lacks a truth mask", e.image_path.display()))
                })?;
                let truth = read_mask(&self.dir.join(truth_path))?;
                let cavities = e
                    .cavity_path
                    .as_ref()
                    .map(|p| read_mask(&self.dir.join(p)))
                    .transpose()?;
                Ok(EvalSample {
                    image,
                    truth,
                    cavities,
                })
            })
            .collect()
    }
}

/// Labelled phantoms drawn from a stream no corpus split uses, quantized to
/// 8 bits exactly like corpus images.
pub fn held_out_samples(spec: &PhantomSpec, n: usize, seed: u64) -> Result<Vec<EvalSample>> {
    let streams = SeedStreams::new(seed);
    (0..n as u64)
        .map(|i| {
            let p = generate_phantom(spec, &mut streams.stream(rng::HELD_OUT, i))?;
            Ok(EvalSample {
                image: GrayImage::from_tensor(&p.image)?.to_tensor(),
                truth: p.truth,
                cavities: Some(p.cavities),
            })
        })
        .collect()
}
