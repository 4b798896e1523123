//! Region steering: patch-winner selection, mask construction/inheritance,
//! and the masked selection-and-inheritance loss.
//!
//! For each patch of the padded image, every resolution is scored by the sum
//! of an area-normalized and a mass-normalized squared error on its own
//! sub-grid; the level with the least cost wins the patch. Winning patches
//! form one-hot masks, and each level additionally inherits the patches of
//! every coarser level, so the finest level is always supervised everywhere.

use crate::densitymap::{level_stride, DensityMap};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tape, Tensor, Var};

/// Default numerical floor for the mass-normalized cost term.
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Per-level loss weights 1/2^j, finest first.
pub fn default_alphas(levels: usize) -> Vec<f64> {
    (0..=levels).map(|j| 1.0 / (1u64 << j) as f64).collect()
}

/// Per-patch winning-resolution labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionGrid {
    pub rows: usize,
    pub cols: usize,
    /// Row-major labels, each in `0..=max_level`.
    pub labels: Vec<usize>,
    /// Patch edge length in image pixels.
    pub patch_px: usize,
}

impl SelectionGrid {
    pub fn label(&self, p: usize, q: usize) -> usize {
        self.labels[p * self.cols + q]
    }

    /// Fraction of patches assigned to each level.
    pub fn level_shares(&self, max_level: usize) -> Vec<f64> {
        let mut counts = vec![0usize; max_level + 1];
        for &l in &self.labels {
            counts[l] += 1;
        }
        let total = self.labels.len().max(1) as f64;
        counts.iter().map(|&c| c as f64 / total).collect()
    }

    pub fn to_text_grid(&self) -> String {
        let mut out = String::new();
        for p in 0..self.rows {
            for q in 0..self.cols {
                if q > 0 {
                    out.push(' ');
                }
                out.push_str(&self.label(p, q).to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// Binary grid with entries exactly 0.0 or 1.0.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskGrid {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl MaskGrid {
    pub fn zeros(h: usize, w: usize) -> Self {
        MaskGrid {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.w + c]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// View as a (1, 1, h, w) tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(Shape::new(1, 1, self.h, self.w), self.data.clone()).expect("mask shape")
    }

    pub fn to_text_grid(&self) -> String {
        let mut out = String::new();
        for r in 0..self.h {
            for c in 0..self.w {
                if c > 0 {
                    out.push(' ');
                }
                out.push(if self.at(r, c) == 1.0 { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }
}

/// One-hot selection masks, inherited masks, and the inherited masks
/// upsampled to each level's density resolution. All indexed by level.
#[derive(Clone, Debug)]
pub struct MaskPyramid {
    pub onehot: Vec<MaskGrid>,
    pub inherited: Vec<MaskGrid>,
    pub upsampled: Vec<MaskGrid>,
}

/// Patch cost at one level: area-normalized squared error plus
/// mass-normalized squared error over the level's sub-grid.
fn patch_cost(
    gt: &DensityMap,
    pred: &DensityMap,
    p: usize,
    q: usize,
    patch_cells: usize,
    epsilon: f64,
) -> f64 {
    let mut sse = 0.0;
    let mut mass = 0.0;
    for r in p * patch_cells..(p + 1) * patch_cells {
        let row = r * gt.w;
        for c in q * patch_cells..(q + 1) * patch_cells {
            let y = gt.data[row + c];
            let d = y - pred.data[row + c];
            sse += d * d;
            mass += y.abs();
        }
    }
    let area = (patch_cells * patch_cells) as f64;
    sse / area + sse / (mass + epsilon)
}

/// Assign each patch to the resolution with the least cost; ties break toward
/// the finest level. Operates on detached values only — nothing is recorded
/// on any tape.
pub fn pwsp_select(
    gt_pyr: &[DensityMap],
    pred_pyr: &[DensityMap],
    patch_px: usize,
    epsilon: f64,
) -> Result<SelectionGrid> {
    if gt_pyr.is_empty() || gt_pyr.len() != pred_pyr.len() {
        return Err(Error::invalid(
            "pwsp_select",
            format!(
                "pyramid lengths differ: {} gt vs {} pred",
                gt_pyr.len(),
                pred_pyr.len()
            ),
        ));
    }
    for (j, (g, d)) in gt_pyr.iter().zip(pred_pyr).enumerate() {
        if g.h != d.h || g.w != d.w {
            return Err(Error::ShapeMismatch {
                op: "pwsp_select level",
                left: [1, j, g.h, g.w],
                right: [1, j, d.h, d.w],
            });
        }
    }
    let levels = gt_pyr.len() - 1;
    for j in 0..=levels {
        let stride = level_stride(j);
        if patch_px == 0 || patch_px % stride != 0 {
            return Err(Error::invalid(
                "pwsp_select",
                format!("patch {patch_px}px is not divisible by level-{j} stride {stride}"),
            ));
        }
        let cells = patch_px / stride;
        if gt_pyr[j].h % cells != 0 || gt_pyr[j].w % cells != 0 {
            return Err(Error::IndivisibleShape {
                what: "pwsp_select level grid",
                h: gt_pyr[j].h,
                w: gt_pyr[j].w,
                divisor: cells,
            });
        }
    }

    let rows = gt_pyr[0].h / (patch_px / level_stride(0));
    let cols = gt_pyr[0].w / (patch_px / level_stride(0));
    let mut labels = Vec::with_capacity(rows * cols);
    for p in 0..rows {
        for q in 0..cols {
            let mut best = 0usize;
            let mut best_cost = f64::INFINITY;
            for j in 0..=levels {
                let cells = patch_px / level_stride(j);
                let cost = patch_cost(&gt_pyr[j], &pred_pyr[j], p, q, cells, epsilon);
                if cost < best_cost {
                    best_cost = cost;
                    best = j;
                }
            }
            labels.push(best);
        }
    }
    Ok(SelectionGrid {
        rows,
        cols,
        labels,
        patch_px,
    })
}

/// One-hot encode a selection grid into per-level binary masks.
pub fn scatter_onehot(grid: &SelectionGrid, levels: usize) -> Result<Vec<MaskGrid>> {
    let mut masks: Vec<MaskGrid> = (0..=levels)
        .map(|_| MaskGrid::zeros(grid.rows, grid.cols))
        .collect();
    for (i, &label) in grid.labels.iter().enumerate() {
        if label > levels {
            return Err(Error::OutOfRangeLabel {
                label,
                max_level: levels,
            });
        }
        masks[label].data[i] = 1.0;
    }
    Ok(masks)
}

/// Inherited masks: level j keeps its own patches plus those of every
/// coarser level, so inherited[0] is all ones and inherited[N] equals the
/// coarsest one-hot mask.
pub fn inherit_masks(onehot: &[MaskGrid]) -> Result<Vec<MaskGrid>> {
    let levels = onehot.len() - 1;
    let (h, w) = (onehot[0].h, onehot[0].w);
    for i in 0..h * w {
        let sum: f64 = onehot.iter().map(|m| m.data[i]).sum();
        if sum != 1.0 {
            return Err(Error::PartitionViolated {
                row: i / w,
                col: i % w,
                sum,
            });
        }
    }
    let mut inherited = vec![MaskGrid::zeros(h, w); levels + 1];
    // Cumulative sum from the coarsest level down.
    let mut acc = vec![0.0; h * w];
    for j in (0..=levels).rev() {
        for i in 0..h * w {
            acc[i] += onehot[j].data[i];
        }
        inherited[j].data.copy_from_slice(&acc);
    }
    Ok(inherited)
}

/// Nearest-neighbor block expansion of a patch mask to a density-map shape.
pub fn upsample_mask(m: &MaskGrid, target: (usize, usize)) -> Result<MaskGrid> {
    let (th, tw) = target;
    if th == 0 || tw == 0 || th % m.h != 0 || tw % m.w != 0 {
        return Err(Error::IndivisibleShape {
            what: "upsample_mask target",
            h: th,
            w: tw,
            divisor: m.h.max(1),
        });
    }
    let (fh, fw) = (th / m.h, tw / m.w);
    let mut out = MaskGrid::zeros(th, tw);
    for r in 0..th {
        let src_row = (r / fh) * m.w;
        for c in 0..tw {
            out.data[r * tw + c] = m.data[src_row + c / fw];
        }
    }
    Ok(out)
}

/// Convenience bundle: one-hot, inherited, and per-level upsampled masks for
/// the given density-map shapes.
pub fn build_mask_pyramid(
    grid: &SelectionGrid,
    levels: usize,
    level_shapes: &[(usize, usize)],
) -> Result<MaskPyramid> {
    let onehot = scatter_onehot(grid, levels)?;
    let inherited = inherit_masks(&onehot)?;
    let upsampled = inherited
        .iter()
        .zip(level_shapes)
        .map(|(m, &shape)| upsample_mask(m, shape))
        .collect::<Result<Vec<_>>>()?;
    Ok(MaskPyramid {
        onehot,
        inherited,
        upsampled,
    })
}

/// The total loss together with the per-level masked terms (before alpha
/// weighting), useful for logging and NaN diagnostics.
pub struct MsilTerms {
    pub total: Var,
    pub per_level: Vec<Var>,
}

/// Folded masked loss: sum over levels of alpha_j times the masked squared
/// error between prediction and ground truth under the upsampled inherited
/// mask. Because the inherited mask splits into the level's own one-hot mask
/// plus the coarser levels' masks on disjoint support, this equals the
/// selection and inheritance terms computed separately and summed.
pub fn msil_loss(
    tape: &mut Tape,
    pred_pyr: &[Var],
    gt_pyr: &[Tensor],
    masks: &[Tensor],
    alphas: &[f64],
) -> Result<MsilTerms> {
    if pred_pyr.is_empty()
        || pred_pyr.len() != gt_pyr.len()
        || pred_pyr.len() != masks.len()
        || pred_pyr.len() > alphas.len()
    {
        return Err(Error::invalid(
            "msil_loss",
            format!(
                "length mismatch: {} preds, {} gts, {} masks, {} alphas",
                pred_pyr.len(),
                gt_pyr.len(),
                masks.len(),
                alphas.len()
            ),
        ));
    }
    let mut per_level = Vec::with_capacity(pred_pyr.len());
    let mut total: Option<Var> = None;
    for (j, &pred) in pred_pyr.iter().enumerate() {
        let target = tape.constant(gt_pyr[j].clone());
        let mask = tape.constant(masks[j].clone());
        let term = tape.masked_mse(pred, target, mask)?;
        per_level.push(term);
        let weighted = tape.scale(term, alphas[j]);
        total = Some(match total {
            Some(acc) => tape.add(acc, weighted)?,
            None => weighted,
        });
    }
    Ok(MsilTerms {
        total: total.expect("nonempty pyramid"),
        per_level,
    })
}
