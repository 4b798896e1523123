//! Finite-difference verification of every differentiable primitive and of
//! one full-model micro instance.
//!
//! Analytic gradients come from the tape's backward pass; the reference is
//! a central difference of forward evaluations only, so the two paths are
//! independent. Relative error is |a - n| / max(|a|, |n|, 1e-3); entries
//! that are exactly equal (both zero, typically) count as zero error.

use std::fmt::Write as _;

use crate::densitymap::DensityMap;
use crate::error::Result;
use crate::model::{BackboneConfig, FusionMode, ModelConfig, SteererModel};
use crate::rng::Rng;
use crate::steering::{build_mask_pyramid, msil_loss, SelectionGrid};
use crate::tensor::{BnStats, ParamStore, Shape, Tape, Tensor, Var};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub trials: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub seed: u64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("gradcheck seed={}\n", self.seed);
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{:<22} trials={:<4} max_rel_err={:.3e} tol={:.0e} {}",
                e.name,
                e.trials,
                e.max_rel_err,
                e.tolerance,
                if e.passed() { "ok" } else { "FAIL" }
            );
        }
        s
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckOptions {
    /// Random instances per primitive.
    pub trials: usize,
    /// Test fixture: name of one op whose analytic gradient is deliberately
    /// corrupted before comparison, to prove the checker catches a broken
    /// backward rule. Never set outside tests.
    pub corrupt: Option<String>,
}

impl GradCheckOptions {
    pub fn standard() -> Self {
        GradCheckOptions {
            trials: 100,
            corrupt: None,
        }
    }
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let d = (a - n).abs();
            if d == 0.0 {
                0.0
            } else {
                d / a.abs().max(n.abs()).max(1e-3)
            }
        })
        .fold(0.0, f64::max)
}

fn fd_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let fp = f(&probe);
            probe[i] = orig - FD_STEP;
            let fm = f(&probe);
            probe[i] = orig;
            (fp - fm) / (2.0 * FD_STEP)
        })
        .collect()
}

fn rand_tensor(rng: &mut Rng, shape: Shape, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform_in(lo, hi))
}

/// One primitive under test: rebuilds the op graph from flat input buffers
/// so the same code path serves the analytic pass and every FD probe.
struct PrimitiveCase {
    name: &'static str,
    /// Input tensors (all differentiable).
    inputs: Vec<Tensor>,
    /// Builds the op output from leaves, given a scratch tape.
    build: Box<dyn Fn(&mut Tape, &[Var]) -> Var>,
    /// Fixed weights folding the output into a scalar.
    weights: Tensor,
}

impl PrimitiveCase {
    fn loss(&self, datas: &[&[f64]]) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self
            .inputs
            .iter()
            .zip(datas)
            .map(|(t, d)| tape.constant(Tensor::new(t.shape(), d.to_vec()).expect("probe shape")))
            .collect();
        let out = (self.build)(&mut tape, &vars);
        let w = tape.constant(self.weights.clone());
        let prod = tape.hadamard(out, w).expect("weight shape");
        let s = tape.sum(prod);
        tape.value(s).item()
    }

    /// Max relative error across all inputs' gradients.
    fn check(&self, corrupt: bool) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = (self.build)(&mut tape, &vars);
        let w = tape.constant(self.weights.clone());
        let prod = tape.hadamard(out, w).expect("weight shape");
        let loss = tape.sum(prod);
        let mut store = ParamStore::new();
        tape.backward(loss, &mut store).expect("scalar loss");

        let mut worst = 0.0f64;
        for (i, input) in self.inputs.iter().enumerate() {
            let mut analytic = tape.grad(vars[i]).expect("leaf gradient").to_vec();
            if corrupt && i == 0 && !analytic.is_empty() {
                analytic[0] += 1e-2;
            }
            let numeric = fd_grad(
                |probe| {
                    let datas: Vec<&[f64]> = self
                        .inputs
                        .iter()
                        .enumerate()
                        .map(|(k, t)| if k == i { probe } else { t.data() })
                        .collect();
                    self.loss(&datas)
                },
                input.data(),
            );
            worst = worst.max(rel_err(&analytic, &numeric));
        }
        worst
    }
}

fn primitive_cases(rng: &mut Rng) -> Vec<PrimitiveCase> {
    let mut cases = Vec::new();

    let x = rand_tensor(rng, Shape::new(2, 2, 5, 5), -1.0, 1.0);
    let w = rand_tensor(rng, Shape::new(3, 2, 3, 3), -0.7, 0.7);
    let b = rand_tensor(rng, Shape::new(1, 3, 1, 1), -0.3, 0.3);
    cases.push(PrimitiveCase {
        name: "conv2d",
        weights: rand_tensor(rng, Shape::new(2, 3, 3, 3), -1.0, 1.0),
        inputs: vec![x, w, b],
        build: Box::new(|tape, v| tape.conv2d(v[0], v[1], v[2], 2, 1).expect("conv")),
    });

    let x = rand_tensor(rng, Shape::new(2, 3, 4, 4), -1.5, 1.5);
    let g = rand_tensor(rng, Shape::new(1, 3, 1, 1), 0.5, 1.5);
    let b = rand_tensor(rng, Shape::new(1, 3, 1, 1), -0.5, 0.5);
    cases.push(PrimitiveCase {
        name: "batch_norm_train",
        weights: rand_tensor(rng, Shape::new(2, 3, 4, 4), -1.0, 1.0),
        inputs: vec![x, g, b],
        build: Box::new(|tape, v| {
            let mut stats = BnStats::new(3);
            tape.batch_norm(v[0], v[1], v[2], &mut stats, true).expect("bn")
        }),
    });

    let x = rand_tensor(rng, Shape::new(2, 3, 4, 4), -1.5, 1.5);
    let g = rand_tensor(rng, Shape::new(1, 3, 1, 1), 0.5, 1.5);
    let b = rand_tensor(rng, Shape::new(1, 3, 1, 1), -0.5, 0.5);
    cases.push(PrimitiveCase {
        name: "batch_norm_eval",
        weights: rand_tensor(rng, Shape::new(2, 3, 4, 4), -1.0, 1.0),
        inputs: vec![x, g, b],
        build: Box::new(|tape, v| {
            let mut stats = BnStats::new(3);
            stats.mean.copy_from_slice(&[0.1, -0.2, 0.3]);
            stats.var.copy_from_slice(&[1.1, 0.6, 0.9]);
            tape.batch_norm(v[0], v[1], v[2], &mut stats, false).expect("bn")
        }),
    });

    // Inputs bounded away from the kink.
    let x = Tensor::from_fn(Shape::new(1, 2, 6, 6), |_| {
        let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        sign * rng.uniform_in(0.05, 1.0)
    });
    cases.push(PrimitiveCase {
        name: "relu",
        weights: rand_tensor(rng, Shape::new(1, 2, 6, 6), -1.0, 1.0),
        inputs: vec![x],
        build: Box::new(|tape, v| tape.relu(v[0])),
    });

    let x = rand_tensor(rng, Shape::new(1, 2, 3, 4), -1.0, 1.0);
    cases.push(PrimitiveCase {
        name: "upsample_bilinear",
        weights: rand_tensor(rng, Shape::new(1, 2, 6, 8), -1.0, 1.0),
        inputs: vec![x],
        build: Box::new(|tape, v| tape.upsample_bilinear(v[0], 2).expect("upsample")),
    });

    let x = rand_tensor(rng, Shape::new(2, 3, 3, 3), -2.0, 2.0);
    cases.push(PrimitiveCase {
        name: "channel_softmax",
        weights: rand_tensor(rng, Shape::new(2, 3, 3, 3), -1.0, 1.0),
        inputs: vec![x],
        build: Box::new(|tape, v| tape.channel_softmax(v[0]).expect("softmax")),
    });

    let a = rand_tensor(rng, Shape::new(1, 2, 4, 4), -1.0, 1.0);
    let b = rand_tensor(rng, Shape::new(1, 3, 4, 4), -1.0, 1.0);
    cases.push(PrimitiveCase {
        name: "concat_channels",
        weights: rand_tensor(rng, Shape::new(1, 5, 4, 4), -1.0, 1.0),
        inputs: vec![a, b],
        build: Box::new(|tape, v| tape.concat_channels(v[0], v[1]).expect("concat")),
    });

    let x = rand_tensor(rng, Shape::new(1, 4, 3, 3), -1.0, 1.0);
    cases.push(PrimitiveCase {
        name: "slice_channels",
        weights: rand_tensor(rng, Shape::new(1, 2, 3, 3), -1.0, 1.0),
        inputs: vec![x],
        build: Box::new(|tape, v| tape.slice_channels(v[0], 1, 3).expect("slice")),
    });

    let a = rand_tensor(rng, Shape::new(1, 3, 4, 4), -1.0, 1.0);
    let b = rand_tensor(rng, Shape::new(1, 3, 4, 4), -1.0, 1.0);
    cases.push(PrimitiveCase {
        name: "hadamard",
        weights: rand_tensor(rng, Shape::new(1, 3, 4, 4), -1.0, 1.0),
        inputs: vec![a, b],
        build: Box::new(|tape, v| tape.hadamard(v[0], v[1]).expect("hadamard")),
    });

    let a = rand_tensor(rng, Shape::new(2, 3, 3, 3), -1.0, 1.0);
    let b = rand_tensor(rng, Shape::new(2, 1, 3, 3), -1.0, 1.0);
    cases.push(PrimitiveCase {
        name: "hadamard_broadcast",
        weights: rand_tensor(rng, Shape::new(2, 3, 3, 3), -1.0, 1.0),
        inputs: vec![a, b],
        build: Box::new(|tape, v| tape.hadamard(v[0], v[1]).expect("hadamard")),
    });

    let a = rand_tensor(rng, Shape::new(1, 2, 4, 4), -1.0, 1.0);
    let b = rand_tensor(rng, Shape::new(1, 2, 4, 4), -1.0, 1.0);
    cases.push(PrimitiveCase {
        name: "add",
        weights: rand_tensor(rng, Shape::new(1, 2, 4, 4), -1.0, 1.0),
        inputs: vec![a, b],
        build: Box::new(|tape, v| tape.add(v[0], v[1]).expect("add")),
    });

    let x = rand_tensor(rng, Shape::new(1, 2, 4, 4), -1.0, 1.0);
    cases.push(PrimitiveCase {
        name: "scale",
        weights: rand_tensor(rng, Shape::new(1, 2, 4, 4), -1.0, 1.0),
        inputs: vec![x],
        build: Box::new(|tape, v| tape.scale(v[0], -1.7)),
    });

    let x = rand_tensor(rng, Shape::new(1, 2, 4, 4), -1.0, 1.0);
    cases.push(PrimitiveCase {
        name: "sum",
        weights: Tensor::filled(Shape::new(1, 1, 1, 1), 0.7),
        inputs: vec![x],
        build: Box::new(|tape, v| tape.sum(v[0])),
    });

    let pred = rand_tensor(rng, Shape::new(1, 1, 6, 6), -1.0, 1.0);
    let target = rand_tensor(rng, Shape::new(1, 1, 6, 6), -1.0, 1.0);
    let mask = Tensor::from_fn(Shape::new(1, 1, 6, 6), |_| {
        if rng.uniform() < 0.5 {
            1.0
        } else {
            0.0
        }
    });
    cases.push(PrimitiveCase {
        name: "masked_mse",
        weights: Tensor::filled(Shape::new(1, 1, 1, 1), 1.0),
        inputs: vec![pred],
        build: Box::new(move |tape, v| {
            let t = tape.constant(target.clone());
            let m = tape.constant(mask.clone());
            tape.masked_mse(v[0], t, m).expect("masked_mse")
        }),
    });

    cases
}

/// Full-model micro instance: a 16x16 input, two levels, mask-weighted loss
/// at every resolution, finite differences over every parameter.
fn model_case(seed: u64) -> Result<GradCheckEntry> {
    let config = ModelConfig {
        backbone: BackboneConfig {
            levels: 2,
            channels: 8,
            ..BackboneConfig::default()
        },
        fusion: FusionMode::Steerer,
    };
    let mut model = SteererModel::new(config, seed)?;
    let mut rng = Rng::derive(seed, "gradcheck-model");
    let levels = 2usize;
    let image = Tensor::from_fn(Shape::new(2, 1, 16, 16), |_| rng.uniform());

    // A fixed valid mask pyramid from a random winner grid (one 16px patch).
    let grid = SelectionGrid {
        rows: 1,
        cols: 1,
        labels: vec![rng.below(levels + 1)],
        patch_px: 16,
    };
    let shapes: Vec<(usize, usize)> = (0..=levels).map(|j| (16 >> (j + 2), 16 >> (j + 2))).collect();
    let masks = build_mask_pyramid(&grid, levels, &shapes)?;
    let gts: Vec<Tensor> = (0..=levels)
        .map(|j| {
            let (h, w) = shapes[j];
            let m = DensityMap {
                level: j,
                h,
                w,
                data: (0..h * w).map(|_| rng.uniform_in(0.0, 0.2)).collect(),
            };
            // Batch of two: same target for both samples.
            let mut data = m.data.clone();
            data.extend_from_slice(&m.data);
            Tensor::new(Shape::new(2, 1, h, w), data).expect("gt shape")
        })
        .collect();
    let mask_tensors: Vec<Tensor> = (0..=levels)
        .map(|j| {
            let up = &masks.upsampled[j];
            let mut data = up.data.clone();
            data.extend_from_slice(&up.data);
            Tensor::new(Shape::new(2, 1, up.h, up.w), data).expect("mask shape")
        })
        .collect();
    let alphas = crate::steering::default_alphas(levels);

    // Training-mode forward mutates running stats; snapshot and restore so
    // every probe differentiates the same function. Returns the total loss
    // and the alpha-weighted finest-branch term: head parameters are trained
    // only by the finest branch (the coarse uses are gradient-gated), so
    // their finite-difference reference is that term, while every other
    // parameter is checked against the total.
    let stats_snapshot = model.named_state();
    let run_loss = |model: &mut SteererModel| -> (f64, f64) {
        let mut tape = Tape::new();
        let input = tape.constant(image.clone());
        let out = model.forward(&mut tape, input, true).expect("micro forward");
        let terms =
            msil_loss(&mut tape, &out.preds, &gts, &mask_tensors, &alphas).expect("micro loss");
        let total = tape.value(terms.total).item();
        let finest = alphas[0] * tape.value(terms.per_level[0]).item();
        model.load_state(&stats_snapshot).expect("stat restore");
        (total, finest)
    };

    // Analytic gradients.
    let mut tape = Tape::new();
    let input = tape.constant(image.clone());
    let out = model.forward(&mut tape, input, true)?;
    let terms = msil_loss(&mut tape, &out.preds, &gts, &mask_tensors, &alphas)?;
    model.store.clear_grads();
    tape.backward(terms.total, &mut model.store)?;
    let analytic: Vec<(String, Vec<f64>)> = model
        .store
        .iter()
        .map(|p| (p.name.clone(), p.grad.clone()))
        .collect();
    model.load_state(&stats_snapshot)?;

    let mut worst = 0.0f64;
    for (name, grads) in &analytic {
        let id = model.store.find(name).expect("param name");
        let gated = name.starts_with("head.");
        let n = grads.len();
        for i in 0..n {
            let orig = model.store.get(id).value.data()[i];
            model.store.get_mut(id).value.data_mut()[i] = orig + FD_STEP;
            let fp = run_loss(&mut model);
            model.store.get_mut(id).value.data_mut()[i] = orig - FD_STEP;
            let fm = run_loss(&mut model);
            model.store.get_mut(id).value.data_mut()[i] = orig;
            let (fp, fm) = if gated { (fp.1, fm.1) } else { (fp.0, fm.0) };
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(&[grads[i]], &[numeric]));
        }
    }

    Ok(GradCheckEntry {
        name: "full_model_micro".to_string(),
        trials: 1,
        max_rel_err: worst,
        tolerance: MODEL_TOLERANCE,
    })
}

/// Run the whole verification suite. Deterministic in `seed`.
pub fn run_gradcheck(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let trials = opts.trials.max(1);
    let mut entries: Vec<GradCheckEntry> = Vec::new();
    let mut rng = Rng::derive(seed, "gradcheck");
    for t in 0..trials {
        for case in primitive_cases(&mut rng) {
            let corrupt = opts.corrupt.as_deref() == Some(case.name);
            let err = case.check(corrupt);
            match entries.iter_mut().find(|e| e.name == case.name) {
                Some(e) => {
                    e.max_rel_err = e.max_rel_err.max(err);
                    e.trials = t + 1;
                }
                None => entries.push(GradCheckEntry {
                    name: case.name.to_string(),
                    trials: 1,
                    max_rel_err: err,
                    tolerance: PRIMITIVE_TOLERANCE,
                }),
            }
        }
    }
    entries.push(model_case(seed)?);
    Ok(GradCheckReport { seed, entries })
}
