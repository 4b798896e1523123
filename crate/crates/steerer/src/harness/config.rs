//! Run configuration: a line-oriented `key = value` format with dotted
//! section prefixes. Every key has a default; unknown keys are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{FusionMode, ModelConfig};
use crate::synth::BlobClass;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Patch edge length in image pixels for the winner selection.
    pub patch_px: usize,
    /// Per-level weight base: alpha_j = alpha_base^j.
    pub alpha_base: f64,
    /// Floor added to the patch mass in the instance cost term.
    pub epsilon: f64,
    /// Initial epochs trained with full-coverage masks before winner
    /// selection gates the loss. Winner selection itself runs (and is
    /// logged) from the first step. Lets every branch learn its scale before
    /// competing; a from-scratch stand-in for a pretrained backbone.
    pub full_mask_epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensityConfig {
    /// Level-0 kernel width in density cells.
    pub sigma0: f64,
    /// Training-time multiplier on ground-truth density values. Unit-mass
    /// kernels produce targets far below the optimizer's step size, so the
    /// model regresses scaled maps; predictions are divided back before
    /// counting or localization.
    pub scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalizeConfig {
    pub threshold: f64,
    pub window: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub noise: f64,
    pub render_width: f64,
    pub min_separation: f64,
    pub placement_margin: f64,
    pub classes: Vec<BlobClass>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub corpus_root: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub density: DensityConfig,
    pub localize: LocalizeConfig,
    /// Random-crop edge length for training; 0 trains on full images.
    pub crop_px: usize,
    pub gen: GenConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus_root: PathBuf::from("corpus"),
            out_dir: PathBuf::from("runs/default"),
            seed: 17,
            model: ModelConfig::default(),
            loss: LossConfig {
                patch_px: 64,
                alpha_base: 0.5,
                epsilon: 1e-8,
                full_mask_epochs: 0,
            },
            optim: OptimConfig {
                peak_lr: 1e-3,
                warmup_epochs: 4,
                epochs: 40,
                batch_size: 4,
            },
            density: DensityConfig {
                sigma0: 2.0,
                scale: 100.0,
            },
            localize: LocalizeConfig {
                threshold: 0.1,
                window: 3,
            },
            crop_px: 0,
            gen: GenConfig {
                image_h: 128,
                image_w: 128,
                train: 200,
                val: 50,
                test: 0,
                noise: 0.05,
                render_width: 0.5,
                min_separation: 10.0,
                placement_margin: 24.0,
                classes: vec![
                    BlobClass {
                        radius: 2.0,
                        count_min: 14,
                        count_max: 22,
                        intensity_min: 0.55,
                        intensity_max: 0.95,
                    },
                    BlobClass {
                        radius: 12.0,
                        count_min: 2,
                        count_max: 4,
                        intensity_min: 0.6,
                        intensity_max: 1.0,
                    },
                ],
            },
        }
    }
}

fn classes_to_text(classes: &[BlobClass]) -> String {
    classes
        .iter()
        .map(|c| {
            format!(
                "r{} n{}-{} i{}-{}",
                c.radius, c.count_min, c.count_max, c.intensity_min, c.intensity_max
            )
        })
        .collect::<Vec<_>>()
        .join(" | ")
}

fn parse_classes(value: &str) -> std::result::Result<Vec<BlobClass>, String> {
    let mut out = Vec::new();
    for part in value.split('|') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let mut radius = None;
        let mut count = None;
        let mut intensity = None;
        for tok in part.split_whitespace() {
            let (tag, body) = tok.split_at(1);
            let parse_range = |body: &str| -> std::result::Result<(f64, f64), String> {
                let (a, b) = body
                    .split_once('-')
                    .ok_or_else(|| format!("expected lo-hi in `{tok}`"))?;
                Ok((
                    a.parse().map_err(|_| format!("bad number in `{tok}`"))?,
                    b.parse().map_err(|_| format!("bad number in `{tok}`"))?,
                ))
            };
            match tag {
                "r" => radius = Some(body.parse().map_err(|_| format!("bad radius `{tok}`"))?),
                "n" => {
                    let (a, b) = parse_range(body)?;
                    count = Some((a as usize, b as usize));
                }
                "i" => intensity = Some(parse_range(body)?),
                _ => return Err(format!("unknown class token `{tok}`")),
            }
        }
        let radius = radius.ok_or_else(|| format!("class `{part}` is missing r<radius>"))?;
        let (count_min, count_max) = count.ok_or_else(|| format!("class `{part}` is missing n<lo>-<hi>"))?;
        let (intensity_min, intensity_max) =
            intensity.unwrap_or((0.6, 1.0));
        out.push(BlobClass {
            radius,
            count_min,
            count_max,
            intensity_min,
            intensity_max,
        });
    }
    Ok(out)
}

impl RunConfig {
    /// All keys in canonical order, as written by [`RunConfig::to_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let bb = &self.model.backbone;
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("corpus.root", self.corpus_root.display().to_string());
        kv("out.dir", self.out_dir.display().to_string());
        kv("seed", self.seed.to_string());
        kv("model.levels", bb.levels.to_string());
        kv("model.channels", bb.channels.to_string());
        kv("model.in_channels", bb.in_channels.to_string());
        kv("model.stem_convs", bb.stem_convs.to_string());
        kv("model.stage_convs", bb.stage_convs.to_string());
        kv("model.fusion_mode", self.model.fusion.to_string());
        kv("loss.patch_px", self.loss.patch_px.to_string());
        kv("loss.alpha_base", self.loss.alpha_base.to_string());
        kv("loss.epsilon", self.loss.epsilon.to_string());
        kv("loss.full_mask_epochs", self.loss.full_mask_epochs.to_string());
        kv("optim.peak_lr", self.optim.peak_lr.to_string());
        kv("optim.warmup_epochs", self.optim.warmup_epochs.to_string());
        kv("optim.epochs", self.optim.epochs.to_string());
        kv("optim.batch_size", self.optim.batch_size.to_string());
        kv("density.sigma0", self.density.sigma0.to_string());
        kv("density.scale", self.density.scale.to_string());
        kv("localize.threshold", self.localize.threshold.to_string());
        kv("localize.window", self.localize.window.to_string());
        kv("train.crop_px", self.crop_px.to_string());
        kv("gen.image_h", self.gen.image_h.to_string());
        kv("gen.image_w", self.gen.image_w.to_string());
        kv("gen.train", self.gen.train.to_string());
        kv("gen.val", self.gen.val.to_string());
        kv("gen.test", self.gen.test.to_string());
        kv("gen.noise", self.gen.noise.to_string());
        kv("gen.render_width", self.gen.render_width.to_string());
        kv("gen.min_sep", self.gen.min_separation.to_string());
        kv("gen.margin", self.gen.placement_margin.to_string());
        kv("gen.classes", classes_to_text(&self.gen.classes));
        s
    }

    pub fn parse_text(text: &str, origin: &Path) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(origin, lineno, "expected `key = value`"))?;
            let (key, value) = (key.trim(), value.trim());
            cfg.apply(key, value)
                .map_err(|msg| Error::parse(origin, lineno, msg))?;
        }
        cfg.validate().map_err(|e| match e {
            Error::InvalidArgument { msg, .. } => Error::parse(origin, 0, msg),
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse_text(&text, path)
    }

    fn apply(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
            value
                .parse()
                .map_err(|_| format!("bad value `{value}` for {key}"))
        }
        let bb = &mut self.model.backbone;
        match key {
            "corpus.root" => self.corpus_root = PathBuf::from(value),
            "out.dir" => self.out_dir = PathBuf::from(value),
            "seed" => self.seed = num(key, value)?,
            "model.levels" => bb.levels = num(key, value)?,
            "model.channels" => bb.channels = num(key, value)?,
            "model.in_channels" => bb.in_channels = num(key, value)?,
            "model.stem_convs" => bb.stem_convs = num(key, value)?,
            "model.stage_convs" => bb.stage_convs = num(key, value)?,
            "model.fusion_mode" => {
                self.model.fusion = value
                    .parse::<FusionMode>()
                    .map_err(|e| e.to_string())?
            }
            "loss.patch_px" => self.loss.patch_px = num(key, value)?,
            "loss.alpha_base" => self.loss.alpha_base = num(key, value)?,
            "loss.epsilon" => self.loss.epsilon = num(key, value)?,
            "loss.full_mask_epochs" => self.loss.full_mask_epochs = num(key, value)?,
            "optim.peak_lr" => self.optim.peak_lr = num(key, value)?,
            "optim.warmup_epochs" => self.optim.warmup_epochs = num(key, value)?,
            "optim.epochs" => self.optim.epochs = num(key, value)?,
            "optim.batch_size" => self.optim.batch_size = num(key, value)?,
            "density.sigma0" => self.density.sigma0 = num(key, value)?,
            "density.scale" => self.density.scale = num(key, value)?,
            "localize.threshold" => self.localize.threshold = num(key, value)?,
            "localize.window" => self.localize.window = num(key, value)?,
            "train.crop_px" => self.crop_px = num(key, value)?,
            "gen.image_h" => self.gen.image_h = num(key, value)?,
            "gen.image_w" => self.gen.image_w = num(key, value)?,
            "gen.train" => self.gen.train = num(key, value)?,
            "gen.val" => self.gen.val = num(key, value)?,
            "gen.test" => self.gen.test = num(key, value)?,
            "gen.noise" => self.gen.noise = num(key, value)?,
            "gen.render_width" => self.gen.render_width = num(key, value)?,
            "gen.min_sep" => self.gen.min_separation = num(key, value)?,
            "gen.margin" => self.gen.placement_margin = num(key, value)?,
            "gen.classes" => self.gen.classes = parse_classes(value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.backbone.validate()?;
        let invalid = |msg: String| Err(Error::invalid("run config", msg));
        if self.loss.patch_px == 0 {
            return invalid("loss.patch_px must be positive".into());
        }
        let max_stride = self.model.backbone.max_stride();
        if self.loss.patch_px % max_stride != 0 {
            return invalid(format!(
                "loss.patch_px {} must be divisible by the coarsest stride {max_stride}",
                self.loss.patch_px
            ));
        }
        if !(self.loss.alpha_base > 0.0) {
            return invalid("loss.alpha_base must be positive".into());
        }
        if !(self.loss.epsilon > 0.0) {
            return invalid("loss.epsilon must be positive".into());
        }
        if !(self.optim.peak_lr > 0.0) {
            return invalid("optim.peak_lr must be positive".into());
        }
        if self.optim.epochs == 0 || self.optim.batch_size == 0 {
            return invalid("optim.epochs and optim.batch_size must be positive".into());
        }
        if self.optim.warmup_epochs > self.optim.epochs {
            return invalid("optim.warmup_epochs cannot exceed optim.epochs".into());
        }
        if !(self.density.sigma0 > 0.0) {
            return invalid("density.sigma0 must be positive".into());
        }
        if !(self.density.scale > 0.0) {
            return invalid("density.scale must be positive".into());
        }
        if !(self.localize.threshold > 0.0) {
            return invalid("localize.threshold must be positive".into());
        }
        if self.localize.window < 3 || self.localize.window % 2 == 0 {
            return invalid("localize.window must be odd and >= 3".into());
        }
        if self.crop_px != 0 && self.crop_px % self.loss.patch_px != 0 {
            return invalid(format!(
                "train.crop_px {} must be a multiple of loss.patch_px {}",
                self.crop_px, self.loss.patch_px
            ));
        }
        Ok(())
    }

    /// Per-level loss weights alpha_base^j for this model depth.
    pub fn alphas(&self) -> Vec<f64> {
        (0..=self.model.backbone.levels)
            .map(|j| self.loss.alpha_base.powi(j as i32))
            .collect()
    }
}
