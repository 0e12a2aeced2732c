//! Random annular-sector shadow masks for convex probes and their
//! multiplicative injection into images.
//!
//! Angles are measured from the image-down axis about the probe apex,
//! positive towards increasing column; radii are in pixels.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Convex-probe imaging geometry. The apex may lie above the image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FanGeometry {
    pub apex_row: f64,
    pub apex_col: f64,
    pub theta_min: f64,
    pub theta_max: f64,
    pub r_min: f64,
    pub r_max: f64,
}

impl FanGeometry {
    /// Fan used for `width × height` phantoms: apex an eighth of the height
    /// above the top edge, ±0.55 rad, reaching just past the bottom edge.
    pub fn for_image(width: usize, height: usize) -> Self {
        let h = height as f64;
        FanGeometry {
            apex_row: -h / 8.0,
            apex_col: (width as f64 - 1.0) / 2.0,
            theta_min: -0.55,
            theta_max: 0.55,
            r_min: h * 3.0 / 16.0,
            r_max: h * 35.0 / 32.0,
        }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let finite = [
            self.apex_row,
            self.apex_col,
            self.theta_min,
            self.theta_max,
            self.r_min,
            self.r_max,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("fan geometry has non-finite fields".into()));
        }
        if self.theta_min >= self.theta_max {
            return Err(Error::Config(format!(
                "fan theta_min {} must be below theta_max {}",
                self.theta_min, self.theta_max
            )));
        }
        if !(0.0 <= self.r_min && self.r_min < self.r_max) {
            return Err(Error::Config(format!(
                "fan radii need 0 <= r_min < r_max, got {} and {}",
                self.r_min, self.r_max
            )));
        }
        if self.region(width, height).is_empty() {
            return Err(Error::Config(format!(
                "fan does not intersect the {width}x{height} image"
            )));
        }
        Ok(())
    }

    /// `(radius, angle)` of pixel `(row, col)` about the apex.
    pub fn polar(&self, row: usize, col: usize) -> (f64, f64) {
        let dy = row as f64 - self.apex_row;
        let dx = col as f64 - self.apex_col;
        (dy.hypot(dx), dx.atan2(dy))
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        let (r, t) = self.polar(row, col);
        (self.r_min..=self.r_max).contains(&r) && (self.theta_min..=self.theta_max).contains(&t)
    }

    /// Pixels inside the fan.
    pub fn region(&self, width: usize, height: usize) -> BinaryMask {
        BinaryMask::from_fn(width, height, |r, c| self.contains(r, c))
    }

    pub fn angular_span(&self) -> f64 {
        self.theta_max - self.theta_min
    }
}

/// One annular-sector shadow.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SectorSpec {
    pub theta_center: f64,
    pub theta_width: f64,
    pub r_start: f64,
    pub r_end: f64,
    /// Multiplicative intensity left inside the shadow, in `[0, 1)`.
    pub attenuation: f64,
    /// Width of the linear angular ramp outside the sector edges (radians).
    pub edge_softness: f64,
}

impl SectorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_width > 0.0) {
            return Err(Error::Config(format!("sector width {} must be positive", self.theta_width)));
        }
        if !(self.r_start < self.r_end) {
            return Err(Error::Config(format!(
                "sector radii need r_start < r_end, got {} and {}",
                self.r_start, self.r_end
            )));
        }
        if !(0.0..1.0).contains(&self.attenuation) {
            return Err(Error::Config(format!(
                "sector attenuation {} outside [0, 1)",
                self.attenuation
            )));
        }
        if !(self.edge_softness >= 0.0) {
            return Err(Error::Config("sector edge softness must be >= 0".into()));
        }
        Ok(())
    }

    /// Fraction of full shadow at polar position `(radius, angle)`: 1 inside
    /// the sector, ramping to 0 across `edge_softness` beyond either angular
    /// edge, 0 elsewhere.
    pub fn coverage(&self, radius: f64, angle: f64) -> f64 {
        if radius < self.r_start || radius > self.r_end {
            return 0.0;
        }
        let beyond = (angle - self.theta_center).abs() - self.theta_width / 2.0;
        if beyond <= 0.0 {
            1.0
        } else if beyond < self.edge_softness {
            1.0 - beyond / self.edge_softness
        } else {
            0.0
        }
    }
}

/// Inclusive `[lo, hi]` bounds.
pub type Range = (f64, f64);

/// Ranges from which [`sample_sectors`] draws each sector field. Radii are
/// fractions of the fan's radial span measured from `r_min`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub count: (usize, usize),
    pub theta_width: Range,
    pub attenuation: Range,
    pub r_start: Range,
    pub r_end: Range,
    pub edge_softness: Range,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            count: (1, 3),
            theta_width: (0.05, 0.35),
            attenuation: (0.05, 0.6),
            r_start: (0.0, 0.0),
            r_end: (1.0, 1.0),
            edge_softness: (0.02, 0.02),
        }
    }
}

fn check_range(name: &str, (lo, hi): Range, min: f64, max: f64) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite()) || lo > hi {
        return Err(Error::Config(format!("{name} range [{lo}, {hi}] is empty or inverted")));
    }
    if lo < min || hi > max {
        return Err(Error::Config(format!(
            "{name} range [{lo}, {hi}] outside allowed [{min}, {max}]"
        )));
    }
    Ok(())
}

impl SamplingConfig {
    pub fn validate(&self, geom: &FanGeometry) -> Result<()> {
        if self.count.0 > self.count.1 {
            return Err(Error::Config(format!(
                "count range {}..{} is inverted",
                self.count.0, self.count.1
            )));
        }
        check_range("theta_width", self.theta_width, f64::MIN_POSITIVE, geom.angular_span())?;
        check_range("attenuation", self.attenuation, 0.0, 1.0 - f64::EPSILON)?;
        check_range("r_start", self.r_start, 0.0, 1.0)?;
        check_range("r_end", self.r_end, 0.0, 1.0)?;
        check_range("edge_softness", self.edge_softness, 0.0, f64::MAX)?;
        if self.r_start.1 >= self.r_end.0 {
            return Err(Error::Config(format!(
                "r_start range {:?} must lie below r_end range {:?}",
                self.r_start, self.r_end
            )));
        }
        Ok(())
    }
}

fn uniform(rng: &mut Rng, (lo, hi): Range) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Draws a random list of sectors lying inside the fan's angular span.
pub fn sample_sectors(
    geom: &FanGeometry,
    rng: &mut Rng,
    cfg: &SamplingConfig,
) -> Result<Vec<SectorSpec>> {
    cfg.validate(geom)?;
    let n = rng.random_range(cfg.count.0..=cfg.count.1);
    let span = geom.r_max - geom.r_min;
    Ok((0..n)
        .map(|_| {
            let theta_width = uniform(rng, cfg.theta_width);
            let half = theta_width / 2.0;
            let theta_center = uniform(rng, (geom.theta_min + half, geom.theta_max - half));
            let r_start = geom.r_min + span * uniform(rng, cfg.r_start);
            let r_end = geom.r_min + span * uniform(rng, cfg.r_end);
            let attenuation = uniform(rng, cfg.attenuation);
            let edge_softness = uniform(rng, cfg.edge_softness);
            SectorSpec {
                theta_center,
                theta_width,
                r_start,
                r_end,
                attenuation,
                edge_softness,
            }
        })
        .collect())
}

/// Multiplicative attenuation map in `[0, 1]`; exactly 1 where unshadowed.
#[derive(Clone, Debug, PartialEq)]
pub struct ShadowMask {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl ShadowMask {
    pub fn ones(width: usize, height: usize) -> Self {
        ShadowMask {
            width,
            height,
            values: vec![1.0; width * height],
        }
    }

    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::shape(
                "ShadowMask::new",
                format!("{width}x{height} mask needs {} values", width * height),
            ));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("mask value {v} outside [0, 1]")));
        }
        Ok(ShadowMask {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// As a `[1, 1, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([1, 1, self.height, self.width], self.values.clone())
            .expect("mask length checked at construction")
    }
}

/// Renders sectors onto a `width × height` mask: each pixel takes the
/// darkest of `1 − (1 − attenuation) · coverage` over all sectors.
pub fn rasterize_mask(
    sectors: &[SectorSpec],
    geom: &FanGeometry,
    width: usize,
    height: usize,
) -> ShadowMask {
    let mut values = vec![1.0f32; width * height];
    if sectors.is_empty() {
        return ShadowMask {
            width,
            height,
            values,
        };
    }
    for row in 0..height {
        for col in 0..width {
            let (r, t) = geom.polar(row, col);
            let v = sectors
                .iter()
                .map(|s| 1.0 - (1.0 - s.attenuation) * s.coverage(r, t))
                .fold(1.0f64, f64::min);
            values[row * width + col] = v.clamp(0.0, 1.0) as f32;
        }
    }
    ShadowMask {
        width,
        height,
        values,
    }
}

/// `x ∘ mask` for a single-plane image tensor.
pub fn inject(x: &Tensor, mask: &ShadowMask) -> Result<Tensor> {
    let shape = x.shape();
    let matches = shape.len() >= 2
        && shape[shape.len() - 2] == mask.height
        && shape[shape.len() - 1] == mask.width
        && x.numel() == mask.values.len();
    if !matches {
        return Err(Error::shape(
            "inject",
            format!("image {shape:?} vs mask {}x{}", mask.height, mask.width),
        ));
    }
    let data = x
        .data()
        .iter()
        .zip(&mask.values)
        .map(|(&v, &m)| v * m)
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Pixels where the mask attenuates at all (value below 1).
pub fn shadow_region(mask: &ShadowMask) -> BinaryMask {
    BinaryMask::new(
        mask.width,
        mask.height,
        mask.values.iter().map(|&v| v < 1.0).collect(),
    )
    .expect("mask dimensions are consistent")
}
