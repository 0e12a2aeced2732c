//! Binarization, overlap metrics, the intensity-threshold baseline and
//! evaluation reports.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::write_rgb_png;
use crate::mask::BinaryMask;
use crate::model::{infer_shadow, ModelParams};
use crate::phantom::EvalSample;
use crate::shadow::FanGeometry;
use crate::tensor::Tensor;

/// Threshold grid used when none is given: 0.1, 0.2, ..., 0.9.
pub fn default_grid() -> Vec<f64> {
    (1..=9).map(|i| f64::from(i) / 10.0).collect()
}

fn plane(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] | [1, h, w] | [1, 1, h, w] => Ok((h, w)),
        _ => Err(Error::shape("eval", format!("expected a single-image map, got {:?}", t.shape()))),
    }
}

fn check_open_unit(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} = {v} must lie in (0, 1)")))
    }
}

/// Shadow iff the predicted attenuation is below `tau`.
pub fn binarize(pred: &Tensor, tau: f64) -> Result<BinaryMask> {
    check_open_unit("tau", tau)?;
    let (h, w) = plane(pred)?;
    let bits = pred.data().iter().map(|&v| f64::from(v) < tau).collect();
    BinaryMask::new(w, h, bits)
}

fn same_shape(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if (a.width(), a.height()) == (b.width(), b.height()) {
        Ok(())
    } else {
        Err(Error::shape(
            "metric",
            format!("{}x{} vs {}x{}", a.width(), a.height(), b.width(), b.height()),
        ))
    }
}

/// Intersection over union. Two empty masks agree perfectly and score 1.
pub fn iou(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    same_shape(pred, truth)?;
    let (inter, union) = pred.overlap(truth)?;
    if union == 0 {
        log::warn!("iou of two empty masks; scoring 1");
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Dice coefficient, with the same both-empty convention as [`iou`].
pub fn dice(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    same_shape(pred, truth)?;
    let (inter, _) = pred.overlap(truth)?;
    let total = pred.count() + truth.count();
    if total == 0 {
        log::warn!("dice of two empty masks; scoring 1");
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Pixels inside the fan darker than `t`.
pub fn threshold_baseline(image: &Tensor, t: f64, fan: &FanGeometry) -> Result<BinaryMask> {
    let (h, w) = plane(image)?;
    let data = image.data();
    Ok(BinaryMask::from_fn(w, h, |r, c| {
        f64::from(data[r * w + c]) < t && fan.contains(r, c)
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    /// Population standard deviation across images.
    pub std: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Result<Stats> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("no values to summarize".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(Stats { mean, std: var.sqrt() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub iou: f64,
    pub dice: f64,
}

/// Dark non-shadow structures predicted as shadow.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CavityStats {
    pub cavity_pixels: usize,
    /// Cavity pixels (outside true shadow) predicted as shadow.
    pub flagged_pixels: usize,
    pub flagged_fraction: f64,
    /// Images with at least one flagged cavity pixel.
    pub images_flagged: usize,
    pub images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    /// Binarization threshold (model) or intensity threshold (baseline).
    pub threshold: f64,
    pub per_image: Vec<ImageScore>,
    pub iou: Stats,
    pub dice: Stats,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cavities: Option<CavityStats>,
}

/// Scores already-binarized predictions.
pub fn score_masks(method: &str, threshold: f64, preds: &[BinaryMask], truths: &[BinaryMask]) -> Result<EvalReport> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    if preds.len() != truths.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} ground-truth masks",
            preds.len(),
            truths.len()
        )));
    }
    let per_image = preds
        .iter()
        .zip(truths)
        .map(|(p, t)| Ok(ImageScore { iou: iou(p, t)?, dice: dice(p, t)? }))
        .collect::<Result<Vec<_>>>()?;
    let ious: Vec<f64> = per_image.iter().map(|s| s.iou).collect();
    let dices: Vec<f64> = per_image.iter().map(|s| s.dice).collect();
    Ok(EvalReport {
        method: method.to_string(),
        threshold,
        iou: Stats::of(&ious)?,
        dice: Stats::of(&dices)?,
        per_image,
        cavities: None,
    })
}

/// Binarizes each predicted shadow map at `tau` and scores it.
pub fn evaluate(preds: &[Tensor], truths: &[BinaryMask], tau: f64) -> Result<EvalReport> {
    evaluate_within(preds, truths, tau, None)
}

/// [`evaluate`], with predictions outside `region` discarded.
pub fn evaluate_within(
    preds: &[Tensor],
    truths: &[BinaryMask],
    tau: f64,
    region: Option<&BinaryMask>,
) -> Result<EvalReport> {
    let masks = binarize_all(preds, tau, region)?;
    score_masks("model", tau, &masks, truths)
}

fn binarize_all(preds: &[Tensor], tau: f64, region: Option<&BinaryMask>) -> Result<Vec<BinaryMask>> {
    preds
        .iter()
        .map(|p| {
            let m = binarize(p, tau)?;
            match region {
                Some(r) => m.and(r),
                None => Ok(m),
            }
        })
        .collect()
}

/// Best candidate by mean IoU; ties go to the smaller value.
fn pick_best(mut scored: Vec<EvalReport>) -> Result<EvalReport> {
    scored.sort_by(|a, b| a.threshold.total_cmp(&b.threshold));
    let mut best: Option<EvalReport> = None;
    for r in scored {
        if best.as_ref().is_none_or(|b| r.iou.mean > b.iou.mean) {
            best = Some(r);
        }
    }
    best.ok_or_else(|| Error::InvalidArgument("empty threshold grid".into()))
}

/// Exhaustive search for the binarization threshold with the best mean IoU.
pub fn select_threshold(preds: &[Tensor], truths: &[BinaryMask], grid: &[f64]) -> Result<EvalReport> {
    select_threshold_within(preds, truths, grid, None)
}

pub fn select_threshold_within(
    preds: &[Tensor],
    truths: &[BinaryMask],
    grid: &[f64],
    region: Option<&BinaryMask>,
) -> Result<EvalReport> {
    let scored = grid
        .iter()
        .map(|&tau| evaluate_within(preds, truths, tau, region))
        .collect::<Result<Vec<_>>>()?;
    pick_best(scored)
}

/// Baseline scored at intensity threshold `t`.
pub fn evaluate_baseline(images: &[Tensor], truths: &[BinaryMask], t: f64, fan: &FanGeometry) -> Result<EvalReport> {
    let masks = images
        .iter()
        .map(|x| threshold_baseline(x, t, fan))
        .collect::<Result<Vec<_>>>()?;
    score_masks("threshold", t, &masks, truths)
}

/// Baseline with its intensity threshold chosen by mean IoU over `grid`.
pub fn select_baseline(images: &[Tensor], truths: &[BinaryMask], fan: &FanGeometry, grid: &[f64]) -> Result<EvalReport> {
    let scored = grid
        .iter()
        .map(|&t| evaluate_baseline(images, truths, t, fan))
        .collect::<Result<Vec<_>>>()?;
    pick_best(scored)
}

/// Counts cavity pixels that lie outside the true shadow but were predicted
/// as shadow.
pub fn cavity_stats(preds: &[BinaryMask], truths: &[BinaryMask], cavities: &[BinaryMask]) -> Result<CavityStats> {
    if preds.len() != truths.len() || preds.len() != cavities.len() {
        return Err(Error::InvalidArgument("prediction, truth and cavity lists differ in length".into()));
    }
    let mut stats = CavityStats {
        cavity_pixels: 0,
        flagged_pixels: 0,
        flagged_fraction: 0.0,
        images_flagged: 0,
        images: preds.len(),
    };
    for ((p, t), c) in preds.iter().zip(truths).zip(cavities) {
        same_shape(p, c)?;
        same_shape(t, c)?;
        let dark = c.and_not(t)?;
        let flagged = p.and(&dark)?.count();
        stats.cavity_pixels += dark.count();
        stats.flagged_pixels += flagged;
        stats.images_flagged += usize::from(flagged > 0);
    }
    if stats.cavity_pixels > 0 {
        stats.flagged_fraction = stats.flagged_pixels as f64 / stats.cavity_pixels as f64;
    }
    Ok(stats)
}

/// Red where predicted, green where true, yellow where both, over a dimmed
/// copy of the grayscale input.
pub fn overlay(image: &Tensor, pred: &BinaryMask, truth: Option<&BinaryMask>) -> Result<Vec<u8>> {
    let (h, w) = plane(image)?;
    if (pred.width(), pred.height()) != (w, h) {
        return Err(Error::shape("overlay", "prediction does not match image"));
    }
    if let Some(t) = truth {
        same_shape(pred, t)?;
    }
    let mut rgb = Vec::with_capacity(w * h * 3);
    for (i, &v) in image.data().iter().enumerate() {
        let g = (f64::from(v).clamp(0.0, 1.0) * 255.0).round() as u8;
        let (r, c) = (i / w, i % w);
        let p = pred.get(r, c);
        let t = truth.is_some_and(|t| t.get(r, c));
        if p || t {
            let d = g / 2;
            rgb.extend([if p { 255 } else { d }, if t { 255 } else { d }, d]);
        } else {
            rgb.extend([g, g, g]);
        }
    }
    Ok(rgb)
}

pub fn write_overlay(path: &Path, image: &Tensor, pred: &BinaryMask, truth: Option<&BinaryMask>) -> Result<()> {
    write_rgb_png(path, pred.width(), pred.height(), &overlay(image, pred, truth)?)
}

/// Pixels an overlay marks as predicted shadow.
pub fn overlay_prediction(rgb: &[u8], width: usize, height: usize) -> Result<BinaryMask> {
    if rgb.len() != width * height * 3 {
        return Err(Error::InvalidArgument("overlay buffer size mismatch".into()));
    }
    BinaryMask::new(width, height, rgb.chunks(3).map(|p| p[0] == 255 && p[2] <= 127).collect())
}

/// Intensity thresholds tried for the baseline: 0.01, 0.02, ..., 0.99.
pub fn fine_grid() -> Vec<f64> {
    (1..100).map(|i| f64::from(i) / 100.0).collect()
}

/// How a checkpoint is compared against the baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Fixed binarization threshold; when absent it is selected from `grid`.
    pub tau: Option<f64>,
    pub grid: Vec<f64>,
    /// Fixed baseline threshold; when absent it is selected from
    /// `baseline_grid`.
    pub baseline_threshold: Option<f64>,
    pub baseline_grid: Vec<f64>,
    pub include_baseline: bool,
    /// Ignore predicted shadow outside the imaging fan, where the input
    /// carries no signal.
    pub restrict_to_fan: bool,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            tau: None,
            grid: default_grid(),
            baseline_threshold: None,
            baseline_grid: fine_grid(),
            include_baseline: true,
            restrict_to_fan: true,
            batch_size: 25,
        }
    }
}

/// Shadow maps for a list of single images, computed in batches.
pub fn predict_shadows(params: &ModelParams, images: &[Tensor], batch_size: usize) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let shadow = infer_shadow(params, &Tensor::stack(chunk)?)?;
        let (n, c, h, w) = shadow.dims4()?;
        let per = c * h * w;
        let data = shadow.into_data();
        for i in 0..n {
            out.push(Tensor::new([1, c, h, w], data[i * per..(i + 1) * per].to_vec())?);
        }
    }
    Ok(out)
}

/// Model and baseline masks alongside their reports.
#[derive(Clone, Debug)]
pub struct Comparison {
    pub model: EvalReport,
    pub model_masks: Vec<BinaryMask>,
    pub baseline: Option<EvalReport>,
    pub baseline_masks: Vec<BinaryMask>,
    pub shadows: Vec<Tensor>,
}

impl Comparison {
    pub fn report_file(&self, opts: &EvalOptions) -> ReportFile {
        let mut reports = vec![self.model.clone()];
        reports.extend(self.baseline.clone());
        let mut file = ReportFile::new(reports);
        file.restricted_to_fan = opts.restrict_to_fan;
        file
    }
}

/// Scores a trained model, and optionally the intensity baseline, on
/// labelled samples.
pub fn compare(params: &ModelParams, samples: &[EvalSample], fan: &FanGeometry, opts: &EvalOptions) -> Result<Comparison> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("no evaluation samples".into()))?;
    let (w, h) = (first.truth.width(), first.truth.height());
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let truths: Vec<BinaryMask> = samples.iter().map(|s| s.truth.clone()).collect();
    let region = fan.region(w, h);
    let region = opts.restrict_to_fan.then_some(&region);

    let shadows = predict_shadows(params, &images, opts.batch_size)?;
    let mut model = match opts.tau {
        Some(tau) => evaluate_within(&shadows, &truths, tau, region)?,
        None => select_threshold_within(&shadows, &truths, &opts.grid, region)?,
    };
    let model_masks = binarize_all(&shadows, model.threshold, region)?;

    let cavities: Option<Vec<BinaryMask>> = samples.iter().map(|s| s.cavities.clone()).collect();
    if let Some(c) = &cavities {
        model.cavities = Some(cavity_stats(&model_masks, &truths, c)?);
    }

    let (baseline, baseline_masks) = if opts.include_baseline {
        let mut b = match opts.baseline_threshold {
            Some(t) => evaluate_baseline(&images, &truths, t, fan)?,
            None => select_baseline(&images, &truths, fan, &opts.baseline_grid)?,
        };
        let masks = images
            .iter()
            .map(|x| threshold_baseline(x, b.threshold, fan))
            .collect::<Result<Vec<_>>>()?;
        if let Some(c) = &cavities {
            b.cavities = Some(cavity_stats(&masks, &truths, c)?);
        }
        (Some(b), masks)
    } else {
        (None, Vec::new())
    };
    Ok(Comparison {
        model,
        model_masks,
        baseline,
        baseline_masks,
        shadows,
    })
}

/// Report file: one or more method reports plus run metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportFile {
    pub format_version: u32,
    pub images: usize,
    /// Whether model predictions were limited to the imaging fan.
    pub restricted_to_fan: bool,
    pub reports: Vec<EvalReport>,
}

pub const REPORT_FORMAT_VERSION: u32 = 1;

impl ReportFile {
    pub fn new(reports: Vec<EvalReport>) -> Self {
        ReportFile {
            format_version: REPORT_FORMAT_VERSION,
            images: reports.first().map_or(0, |r| r.per_image.len()),
            restricted_to_fan: false,
            reports,
        }
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec_pretty(self)?;
        out.push(b'\n');
        Ok(out)
    }

    /// One row per method: method, IoU mean, IoU std, DICE mean, DICE std,
    /// threshold.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "iou_mean", "iou_std", "dice_mean", "dice_std", "threshold"])?;
        for r in &self.reports {
            w.write_record([
                r.method.clone(),
                format!("{:.6}", r.iou.mean),
                format!("{:.6}", r.iou.std),
                format!("{:.6}", r.dice.mean),
                format!("{:.6}", r.dice.std),
                format!("{}", r.threshold),
            ])?;
        }
        w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("report.csv");
        fs::write(&csv, self.to_csv()?).map_err(|e| Error::io(&csv, e))
    }
}
