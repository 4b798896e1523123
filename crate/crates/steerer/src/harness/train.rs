//! Training orchestration: batching, per-step winner selection and mask
//! construction, the masked loss, backward, and the Adam step, with
//! per-epoch validation and scale-assignment logging.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::checkpoint;
use super::config::RunConfig;
use super::eval::count_level0;
use super::schedule::learning_rate;
use crate::densitymap::{gt_pyramid, DensityMap, Point, PointSet};
use crate::error::{Error, Result};
use crate::metrics::counting_metrics;
use crate::model::{FusionMode, SteererModel};
use crate::rng::Rng;
use crate::steering::{build_mask_pyramid, msil_loss, pwsp_select, SelectionGrid};
use crate::synth::{load_scene, read_corpus, GrayImage, LoadedScene, Split};
use crate::tensor::{adam_step, AdamHyper, Shape, Tape, Tensor};

/// What happened inside one training step, in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepEvent {
    Forward,
    PwspSelect,
    BuildMasks,
    Loss,
    Backward,
    OptimizerStep,
}

#[derive(Clone, Debug)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub val_mse: f64,
    pub val_nae: f64,
    /// Fraction of training patches assigned to each level this epoch
    /// (empty for fusion baselines, which train without winner selection).
    pub pwsp_shares: Vec<f64>,
}

impl EpochMetrics {
    pub fn to_line(&self) -> String {
        let mut s = format!(
            "epoch={} loss={:.6} val_mae={:.4} val_mse={:.4} val_nae={:.4}",
            self.epoch, self.train_loss, self.val_mae, self.val_mse, self.val_nae
        );
        if !self.pwsp_shares.is_empty() {
            let shares: Vec<String> = self.pwsp_shares.iter().map(|v| format!("{v:.3}")).collect();
            let _ = write!(s, " shares={}", shares.join("/"));
        }
        s
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions {
    pub verbose: bool,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub history: Vec<EpochMetrics>,
    /// Event order of the last training step, for trace assertions.
    pub last_trace: Vec<StepEvent>,
}

/// Corpus loaded into memory.
pub struct Dataset {
    pub train: Vec<LoadedScene>,
    pub val: Vec<LoadedScene>,
    pub test: Vec<LoadedScene>,
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let manifest = read_corpus(&cfg.corpus_root)?;
    let mut sets = Dataset {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for entry in &manifest.entries {
        let scene = load_scene(&cfg.corpus_root, entry)?;
        match entry.split {
            Split::Train => sets.train.push(scene),
            Split::Val => sets.val.push(scene),
            Split::Test => sets.test.push(scene),
        }
    }
    Ok(sets)
}

/// Crop a scene to `crop`x`crop` at the given offset, keeping points whose
/// centers fall inside.
fn crop_scene(scene: &LoadedScene, r0: usize, c0: usize, crop: usize) -> (GrayImage, PointSet) {
    let mut img = GrayImage::zeros(crop, crop);
    for r in 0..crop {
        let src = (r0 + r) * scene.image.w + c0;
        img.data[r * crop..(r + 1) * crop].copy_from_slice(&scene.image.data[src..src + crop]);
    }
    let points = scene
        .points
        .points
        .iter()
        .filter(|p| {
            p.x >= c0 as f64 && p.x < (c0 + crop) as f64 && p.y >= r0 as f64 && p.y < (r0 + crop) as f64
        })
        .map(|p| Point {
            x: p.x - c0 as f64,
            y: p.y - r0 as f64,
            radius: p.radius,
        })
        .collect();
    (img, PointSet::new(points))
}

fn stack_images(images: &[GrayImage]) -> Tensor {
    let (h, w) = (images[0].h, images[0].w);
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        data.extend_from_slice(&img.data);
    }
    Tensor::new(Shape::new(images.len(), 1, h, w), data).expect("batch shape")
}

fn stack_maps(maps: &[&DensityMap]) -> Tensor {
    let (h, w) = (maps[0].h, maps[0].w);
    let mut data = Vec::with_capacity(maps.len() * h * w);
    for m in maps {
        data.extend_from_slice(&m.data);
    }
    Tensor::new(Shape::new(maps.len(), 1, h, w), data).expect("stacked maps")
}

/// Split a (B,1,H,W) prediction tensor into per-sample density maps.
fn split_batch(pred: &Tensor, level: usize) -> Vec<DensityMap> {
    let s = pred.shape();
    let plane = s.h * s.w;
    (0..s.n)
        .map(|b| DensityMap {
            level,
            h: s.h,
            w: s.w,
            data: pred.data()[b * plane..(b + 1) * plane].to_vec(),
        })
        .collect()
}

pub fn train(cfg: &RunConfig, opts: TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dataset = load_dataset(cfg)?;
    if dataset.train.is_empty() {
        return Err(Error::EmptyInput("training split"));
    }
    let levels = cfg.model.backbone.levels;
    let (img_h, img_w) = (dataset.train[0].image.h, dataset.train[0].image.w);
    for s in dataset.train.iter().chain(&dataset.val) {
        if s.image.h != img_h || s.image.w != img_w {
            return Err(Error::invalid(
                "train",
                "all corpus images must share one size",
            ));
        }
    }
    let step_px = if cfg.crop_px > 0 { cfg.crop_px.min(img_h) } else { img_h };
    if step_px % cfg.loss.patch_px != 0 {
        return Err(Error::IndivisibleShape {
            what: "training crop vs patch size",
            h: step_px,
            w: step_px,
            divisor: cfg.loss.patch_px,
        });
    }

    let mut model = SteererModel::new(cfg.model, cfg.seed)?;
    let mut order_rng = Rng::derive(cfg.seed, "batch-order");
    let mut crop_rng = Rng::derive(cfg.seed, "crop");
    let alphas = cfg.alphas();
    let batch = cfg.optim.batch_size;
    let steps_per_epoch = dataset.train.len().div_ceil(batch);
    let total_steps = steps_per_epoch * cfg.optim.epochs;
    let warmup_steps = steps_per_epoch * cfg.optim.warmup_epochs;

    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let mut history: Vec<EpochMetrics> = Vec::new();
    let mut last_trace = Vec::new();
    let mut global_step = 0usize;

    for epoch in 0..cfg.optim.epochs {
        let mut indices: Vec<usize> = (0..dataset.train.len()).collect();
        order_rng.shuffle(&mut indices);
        let mut epoch_loss = 0.0;
        let mut share_counts = vec![0usize; levels + 1];
        let mut share_total = 0usize;

        for (batch_idx, chunk) in indices.chunks(batch).enumerate() {
            let mut trace = Vec::with_capacity(6);

            // Assemble the batch (crop if configured).
            let mut images = Vec::with_capacity(chunk.len());
            let mut points = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let scene = &dataset.train[i];
                if step_px < img_h || step_px < img_w {
                    let r0 = crop_rng.below(img_h - step_px + 1);
                    let c0 = crop_rng.below(img_w - step_px + 1);
                    let (img, pts) = crop_scene(scene, r0, c0, step_px);
                    images.push(img);
                    points.push(pts);
                } else {
                    images.push(scene.image.clone());
                    points.push(scene.points.clone());
                }
            }

            let mut tape = Tape::new();
            let input = tape.constant(stack_images(&images));
            let out = model.forward(&mut tape, input, true)?;
            trace.push(StepEvent::Forward);
            let avail = out.preds.len();

            // Ground truth per sample (canonical unit-mass densities), for
            // the levels the model predicts. The regression happens in a
            // scaled space, so the loss targets below are multiplied up;
            // winner selection stays in canonical units.
            let gt_pyrs: Vec<Vec<DensityMap>> = points
                .iter()
                .map(|pts| gt_pyramid(pts, (step_px, step_px), levels, cfg.density.sigma0))
                .collect::<Result<_>>()?;

            // Masks: winner selection for the steering mode, full coverage
            // for the fusion baselines.
            // Detached predictions, divided back to canonical units so the
            // per-patch cost comparison is independent of the training scale.
            let detached: Vec<Vec<DensityMap>> = (0..avail)
                .map(|j| {
                    let mut t = tape.detach(out.preds[j]);
                    for v in t.data_mut() {
                        *v /= cfg.density.scale;
                    }
                    split_batch(&t, j)
                })
                .collect();
            let full_masks = epoch < cfg.loss.full_mask_epochs;
            let mut mask_tensors: Vec<Tensor> = Vec::with_capacity(avail);
            if cfg.model.fusion == FusionMode::Steerer {
                let mut grids: Vec<SelectionGrid> = Vec::with_capacity(chunk.len());
                for b in 0..chunk.len() {
                    let gt_refs: Vec<DensityMap> = gt_pyrs[b].clone();
                    let pred_refs: Vec<DensityMap> =
                        (0..avail).map(|j| detached[j][b].clone()).collect();
                    let grid =
                        pwsp_select(&gt_refs, &pred_refs, cfg.loss.patch_px, cfg.loss.epsilon)?;
                    for &l in &grid.labels {
                        share_counts[l] += 1;
                    }
                    share_total += grid.labels.len();
                    grids.push(grid);
                }
                trace.push(StepEvent::PwspSelect);
                if full_masks {
                    for j in 0..avail {
                        let (h, w) = (gt_pyrs[0][j].h, gt_pyrs[0][j].w);
                        mask_tensors.push(Tensor::filled(Shape::new(chunk.len(), 1, h, w), 1.0));
                    }
                } else {
                    let shapes: Vec<(usize, usize)> =
                        gt_pyrs[0].iter().map(|m| (m.h, m.w)).collect();
                    let pyramids = grids
                        .iter()
                        .map(|g| build_mask_pyramid(g, levels, &shapes))
                        .collect::<Result<Vec<_>>>()?;
                    for j in 0..avail {
                        let per_sample: Vec<DensityMap> = pyramids
                            .iter()
                            .map(|p| DensityMap {
                                level: j,
                                h: p.upsampled[j].h,
                                w: p.upsampled[j].w,
                                data: p.upsampled[j].data.clone(),
                            })
                            .collect();
                        let refs: Vec<&DensityMap> = per_sample.iter().collect();
                        mask_tensors.push(stack_maps(&refs));
                    }
                }
                trace.push(StepEvent::BuildMasks);
            } else {
                for j in 0..avail {
                    let (h, w) = (gt_pyrs[0][j].h, gt_pyrs[0][j].w);
                    mask_tensors.push(Tensor::filled(Shape::new(chunk.len(), 1, h, w), 1.0));
                }
                trace.push(StepEvent::BuildMasks);
            }

            let gt_tensors: Vec<Tensor> = (0..avail)
                .map(|j| {
                    let refs: Vec<&DensityMap> = gt_pyrs.iter().map(|p| &p[j]).collect();
                    let mut t = stack_maps(&refs);
                    for v in t.data_mut() {
                        *v *= cfg.density.scale;
                    }
                    t
                })
                .collect();

            let terms = msil_loss(&mut tape, &out.preds, &gt_tensors, &mask_tensors, &alphas)?;
            trace.push(StepEvent::Loss);
            let loss_value = tape.value(terms.total).item();
            let per_level: Vec<f64> = terms
                .per_level
                .iter()
                .map(|&t| tape.value(t).item())
                .collect();
            abort_if_non_finite(loss_value, epoch, batch_idx, &per_level, &cfg.out_dir)?;
            epoch_loss += loss_value;

            tape.backward(terms.total, &mut model.store)?;
            trace.push(StepEvent::Backward);
            let lr = learning_rate(global_step, total_steps, warmup_steps, cfg.optim.peak_lr);
            if lr > 0.0 {
                adam_step(&mut model.store, lr, AdamHyper::default())?;
            } else {
                // Warmup step 0: zero rate, so just drop the gradients.
                model.store.clear_grads();
            }
            trace.push(StepEvent::OptimizerStep);
            global_step += 1;

            debug_assert!(step_trace_is_ordered(&trace));
            if opts.verbose {
                println!("step {global_step}: lr={lr:.3e} loss={loss_value:.6} trace={trace:?}");
            }
            last_trace = trace;
        }

        // Per-epoch validation counts at the finest level.
        let (val_mae, val_mse, val_nae) = if dataset.val.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            let mut pairs = Vec::with_capacity(dataset.val.len());
            for scene in &dataset.val {
                let count = count_level0(&mut model, &scene.image, cfg.density.scale)?;
                pairs.push((count, scene.points.len() as f64));
            }
            counting_metrics(&pairs)?
        };

        let shares = if cfg.model.fusion == FusionMode::Steerer && share_total > 0 {
            share_counts
                .iter()
                .map(|&c| c as f64 / share_total as f64)
                .collect()
        } else {
            Vec::new()
        };
        let metrics = EpochMetrics {
            epoch,
            train_loss: epoch_loss / steps_per_epoch as f64,
            val_mae,
            val_mse,
            val_nae,
            pwsp_shares: shares,
        };
        if opts.verbose {
            println!("{}", metrics.to_line());
        }
        history.push(metrics);
    }

    let history_lines: Vec<String> = history.iter().map(|m| m.to_line()).collect();
    let checkpoint_path = cfg.out_dir.join("checkpoint.bin");
    checkpoint::save(
        &checkpoint_path,
        &model,
        cfg,
        cfg.optim.epochs as u32,
        &history_lines,
    )?;
    fs::write(cfg.out_dir.join("train.log"), history_lines.join("\n") + "\n")
        .map_err(|e| Error::io(cfg.out_dir.join("train.log"), e))?;

    Ok(TrainOutcome {
        checkpoint_path,
        history,
        last_trace,
    })
}

/// A non-finite loss aborts training with a diagnostic dump naming the
/// offending batch and the per-level loss terms.
fn abort_if_non_finite(
    loss: f64,
    epoch: usize,
    batch_idx: usize,
    per_level: &[f64],
    out_dir: &Path,
) -> Result<()> {
    if loss.is_finite() {
        return Ok(());
    }
    let mut dump = format!("non-finite loss at epoch {epoch} batch {batch_idx}: {loss}\n");
    for (j, v) in per_level.iter().enumerate() {
        let _ = writeln!(dump, "level {j} loss = {v}");
    }
    let dump_path = out_dir.join("nan_dump.txt");
    let _ = fs::write(&dump_path, &dump);
    Err(Error::NumericFailure {
        context: format!(
            "loss became {loss} at epoch {epoch} batch {batch_idx} (dump: {})",
            dump_path.display()
        ),
    })
}

/// Winner selection must precede the loss, which must precede backward and
/// the optimizer step.
pub fn step_trace_is_ordered(trace: &[StepEvent]) -> bool {
    let pos = |e: StepEvent| trace.iter().position(|&t| t == e);
    let (Some(f), Some(m), Some(l), Some(b), Some(o)) = (
        pos(StepEvent::Forward),
        pos(StepEvent::BuildMasks),
        pos(StepEvent::Loss),
        pos(StepEvent::Backward),
        pos(StepEvent::OptimizerStep),
    ) else {
        return false;
    };
    let pwsp_ok = match pos(StepEvent::PwspSelect) {
        Some(p) => f < p && p < l,
        None => true, // baselines select nothing
    };
    pwsp_ok && f < m && m < l && l < b && b < o
}
