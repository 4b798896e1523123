//! Evaluation, prediction and mask diagnostics on top of a trained model.

use std::fmt::Write as _;

use super::config::RunConfig;
use crate::densitymap::{gt_pyramid, level_stride, DensityMap, PointSet};
use crate::error::{Error, Result};
use crate::metrics::{
    count_from_density, counting_metrics, extract_maxima, match_points, prf, MatchSigma,
};
use crate::model::SteererModel;
use crate::steering::{build_mask_pyramid, pwsp_select, MaskPyramid, SelectionGrid};
use crate::synth::{GrayImage, LoadedScene, Split};
use crate::tensor::Tape;

/// Localization match radii are clamped below at 4 image pixels.
pub const LOCALIZE_SIGMA_MIN: f64 = 4.0;

/// Zero-pad an image on the bottom/right to a multiple of `multiple`.
pub fn pad_to_multiple(img: &GrayImage, multiple: usize) -> GrayImage {
    let ph = img.h.div_ceil(multiple) * multiple;
    let pw = img.w.div_ceil(multiple) * multiple;
    if ph == img.h && pw == img.w {
        return img.clone();
    }
    let mut out = GrayImage::zeros(ph, pw);
    for r in 0..img.h {
        out.data[r * pw..r * pw + img.w].copy_from_slice(&img.data[r * img.w..(r + 1) * img.w]);
    }
    out
}

/// Finest-level density prediction for one image: pad to stride
/// divisibility, run the model in eval mode, divide the scaled regression
/// target back out, and crop the map to the unpadded region.
pub fn predict_density(
    model: &mut SteererModel,
    image: &GrayImage,
    density_scale: f64,
) -> Result<DensityMap> {
    let stride = level_stride(model.levels());
    let padded = pad_to_multiple(image, stride);
    let mut tape = Tape::new();
    let input = tape.constant(padded.to_tensor());
    let out = model.forward(&mut tape, input, false)?;
    let full = DensityMap::from_tensor(tape.value(out.preds[0]), 0)?;
    // Keep every level-0 cell that intersects the unpadded region.
    let (ch, cw) = (image.h.div_ceil(4), image.w.div_ceil(4));
    let mut cropped = DensityMap::zeros(0, ch, cw);
    for r in 0..ch {
        for (dst, src) in cropped.data[r * cw..(r + 1) * cw]
            .iter_mut()
            .zip(&full.data[r * full.w..r * full.w + cw])
        {
            *dst = src / density_scale;
        }
    }
    Ok(cropped)
}

/// Predicted count for one image (mass of the finest map).
pub fn count_level0(
    model: &mut SteererModel,
    image: &GrayImage,
    density_scale: f64,
) -> Result<f64> {
    Ok(count_from_density(&predict_density(
        model,
        image,
        density_scale,
    )?))
}

/// Density prediction plus extracted object centers.
pub fn localize_image(
    model: &mut SteererModel,
    cfg: &RunConfig,
    image: &GrayImage,
) -> Result<(DensityMap, PointSet)> {
    let density = predict_density(model, image, cfg.density.scale)?;
    let points = extract_maxima(&density, cfg.localize.threshold, cfg.localize.window)?;
    Ok((density, points))
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub split: Split,
    pub images: usize,
    pub mae: f64,
    pub mse: f64,
    pub nae: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Fraction of patches each level wins on this split (diagnostic).
    pub pwsp_shares: Vec<f64>,
    pub per_image_counts: Vec<(f64, f64)>,
}

impl EvalReport {
    /// UTF-8 `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "split={}", self.split.as_str());
        let _ = writeln!(s, "images={}", self.images);
        let _ = writeln!(s, "mae={:.6}", self.mae);
        let _ = writeln!(s, "mse={:.6}", self.mse);
        let _ = writeln!(s, "nae={:.6}", self.nae);
        let _ = writeln!(s, "precision={:.6}", self.precision);
        let _ = writeln!(s, "recall={:.6}", self.recall);
        let _ = writeln!(s, "f1={:.6}", self.f1);
        for (j, share) in self.pwsp_shares.iter().enumerate() {
            let _ = writeln!(s, "pwsp.share.{j}={share:.6}");
        }
        s
    }
}

/// Counting and localization metrics over a split, plus the winner-selection
/// shares of the current predictions.
pub fn evaluate(
    model: &mut SteererModel,
    cfg: &RunConfig,
    scenes: &[LoadedScene],
    split: Split,
) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::EmptyInput("evaluation split"));
    }
    let levels = model.levels();
    let mut pairs = Vec::with_capacity(scenes.len());
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fnn = 0usize;
    let mut share_counts = vec![0usize; levels + 1];
    let mut share_total = 0usize;

    for scene in scenes {
        let (grid_opt, pred0) = prediction_with_selection(model, cfg, scene)?;
        let count = count_from_density(&pred0);
        pairs.push((count, scene.points.len() as f64));

        let found = extract_maxima(&pred0, cfg.localize.threshold, cfg.localize.window)?;
        let m = match_points(
            &found,
            &scene.points,
            MatchSigma::PerPointRadius {
                min: LOCALIZE_SIGMA_MIN,
            },
        )?;
        tp += m.true_positives;
        fp += m.false_positives;
        fnn += m.false_negatives;

        if let Some(grid) = grid_opt {
            for &l in &grid.labels {
                share_counts[l] += 1;
            }
            share_total += grid.labels.len();
        }
    }

    let (mae, mse, nae) = counting_metrics(&pairs)?;
    let agg = crate::metrics::MatchResult {
        true_positives: tp,
        false_positives: fp,
        false_negatives: fnn,
        pairs: Vec::new(),
    };
    let (precision, recall, f1) = prf(&agg);
    let pwsp_shares = if share_total > 0 {
        share_counts
            .iter()
            .map(|&c| c as f64 / share_total as f64)
            .collect()
    } else {
        Vec::new()
    };
    Ok(EvalReport {
        split,
        images: scenes.len(),
        mae,
        mse,
        nae,
        precision,
        recall,
        f1,
        pwsp_shares,
        per_image_counts: pairs,
    })
}

/// Run one scene through the model; in addition to the finest prediction,
/// return the winner-selection grid when the model predicts several levels.
fn prediction_with_selection(
    model: &mut SteererModel,
    cfg: &RunConfig,
    scene: &LoadedScene,
) -> Result<(Option<SelectionGrid>, DensityMap)> {
    let levels = model.levels();
    let pad = lcm(level_stride(levels), cfg.loss.patch_px);
    let padded = pad_to_multiple(&scene.image, pad);
    let mut tape = Tape::new();
    let input = tape.constant(padded.to_tensor());
    let out = model.forward(&mut tape, input, false)?;

    let full0 = DensityMap::from_tensor(tape.value(out.preds[0]), 0)?;
    let (ch, cw) = (scene.image.h.div_ceil(4), scene.image.w.div_ceil(4));
    let mut pred0 = DensityMap::zeros(0, ch, cw);
    for r in 0..ch {
        for (dst, src) in pred0.data[r * cw..(r + 1) * cw]
            .iter_mut()
            .zip(&full0.data[r * full0.w..r * full0.w + cw])
        {
            *dst = src / cfg.density.scale;
        }
    }

    let grid = if out.preds.len() == levels + 1 {
        // Winner selection compares in canonical density units.
        let gt = gt_pyramid(
            &scene.points,
            (padded.h, padded.w),
            levels,
            cfg.density.sigma0,
        )?;
        let preds: Vec<DensityMap> = (0..=levels)
            .map(|j| {
                DensityMap::from_tensor(tape.value(out.preds[j]), j).map(|mut m| {
                    for v in &mut m.data {
                        *v /= cfg.density.scale;
                    }
                    m
                })
            })
            .collect::<Result<_>>()?;
        Some(pwsp_select(&gt, &preds, cfg.loss.patch_px, cfg.loss.epsilon)?)
    } else {
        None
    };
    Ok((grid, pred0))
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

/// Winner selection and mask pyramid for one annotated image, for the
/// diagnostics command.
pub struct MaskDiagnostics {
    pub grid: SelectionGrid,
    pub masks: MaskPyramid,
}

pub fn diagnose_masks(
    model: &mut SteererModel,
    cfg: &RunConfig,
    image: &GrayImage,
    points: &PointSet,
) -> Result<MaskDiagnostics> {
    let levels = model.levels();
    let pad = lcm(level_stride(levels), cfg.loss.patch_px);
    let padded = pad_to_multiple(image, pad);
    let mut tape = Tape::new();
    let input = tape.constant(padded.to_tensor());
    let out = model.forward(&mut tape, input, false)?;
    if out.preds.len() != levels + 1 {
        return Err(Error::invalid(
            "diagnose_masks",
            "winner selection needs predictions at every level (steerer mode)",
        ));
    }
    let gt = gt_pyramid(points, (padded.h, padded.w), levels, cfg.density.sigma0)?;
    let preds: Vec<DensityMap> = (0..=levels)
        .map(|j| {
            DensityMap::from_tensor(tape.value(out.preds[j]), j).map(|mut m| {
                for v in &mut m.data {
                    *v /= cfg.density.scale;
                }
                m
            })
        })
        .collect::<Result<_>>()?;
    let grid = pwsp_select(&gt, &preds, cfg.loss.patch_px, cfg.loss.epsilon)?;
    let shapes: Vec<(usize, usize)> = gt.iter().map(|m| (m.h, m.w)).collect();
    let masks = build_mask_pyramid(&grid, levels, &shapes)?;
    Ok(MaskDiagnostics { grid, masks })
}
