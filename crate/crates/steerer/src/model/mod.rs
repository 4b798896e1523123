//! The multi-resolution counting model: toy backbone, bottom-up fusion via
//! adaptor blocks, a counting head shared across levels, and two classic
//! fusion baselines for ablation runs.

mod fsia;
mod layers;

use fsia::FsiaBlock;
use layers::{BnLayer, ConvBnRelu, ConvLayer};

use crate::densitymap::level_stride;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Backbone geometry: `levels + 1` resolutions of equal channel width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Number of downsampling levels N; resolutions run 0..=N.
    pub levels: usize,
    /// Channel width shared by all levels.
    pub channels: usize,
    /// Image channels (1 for the grayscale corpus).
    pub in_channels: usize,
    /// Stem convolutions; the first two have stride 2 (total stride 4).
    pub stem_convs: usize,
    /// Convolutions per downsampling stage; the first has stride 2.
    pub stage_convs: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            levels: 3,
            channels: 32,
            in_channels: 1,
            stem_convs: 2,
            stage_convs: 1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::invalid("backbone config", "levels must be >= 1"));
        }
        if self.channels < 2 {
            return Err(Error::invalid("backbone config", "channels must be >= 2"));
        }
        if self.in_channels < 1 {
            return Err(Error::invalid("backbone config", "in_channels must be >= 1"));
        }
        if self.stem_convs < 2 {
            return Err(Error::invalid(
                "backbone config",
                "stem needs at least two (stride-2) convolutions",
            ));
        }
        if self.stage_convs < 1 {
            return Err(Error::invalid("backbone config", "stage_convs must be >= 1"));
        }
        Ok(())
    }

    /// Image-pixel stride of the coarsest level.
    pub fn max_stride(&self) -> usize {
        level_stride(self.levels)
    }
}

/// How multi-resolution features are fused into density predictions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    /// Attention-gated selective inheritance from coarse to fine.
    Steerer,
    /// Upsample every level to the finest and concatenate once.
    Bl1Concat,
    /// Additive top-down feature-pyramid fusion.
    Bl2Fpn,
}

impl FusionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::Steerer => "steerer",
            FusionMode::Bl1Concat => "bl1_concat",
            FusionMode::Bl2Fpn => "bl2_fpn",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "steerer" => Ok(FusionMode::Steerer),
            "bl1_concat" => Ok(FusionMode::Bl1Concat),
            "bl2_fpn" => Ok(FusionMode::Bl2Fpn),
            other => Err(Error::UnknownMode {
                mode: other.to_string(),
            }),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub fusion: FusionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            fusion: FusionMode::Steerer,
        }
    }
}

#[derive(Debug)]
struct Backbone {
    stem: Vec<ConvBnRelu>,
    stages: Vec<Vec<ConvBnRelu>>,
}

/// Shared map-to-density decoder: two convolutions, ReLU-terminated so the
/// output is non-negative. Trained only through the finest branch.
#[derive(Debug)]
struct CountingHead {
    c1: ConvLayer,
    c2: ConvLayer,
}

impl CountingHead {
    fn init(store: &mut ParamStore, rng: &mut Rng, channels: usize) -> Result<Self> {
        Ok(CountingHead {
            c1: ConvLayer::init(store, rng, "head.c1", channels, channels, 3, 1, 1)?,
            c2: ConvLayer::init(store, rng, "head.c2", channels, 1, 3, 1, 1)?,
        })
    }

    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        o: Var,
        final_branch: bool,
    ) -> Result<Var> {
        let x = if final_branch {
            self.c1.forward(tape, store, o)?
        } else {
            self.c1.forward_frozen(tape, store, o)?
        };
        let x = tape.relu(x);
        let y = if final_branch {
            self.c2.forward(tape, store, x)?
        } else {
            self.c2.forward_frozen(tape, store, x)?
        };
        Ok(tape.relu(y))
    }
}

/// Density predictions per level (index = level, finest first) plus the
/// attention maps of the fusion chain tagged with their output level.
pub struct ModelOutput {
    pub preds: Vec<Var>,
    pub attns: Vec<(usize, Var)>,
}

#[derive(Debug)]
pub struct SteererModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    backbone: Backbone,
    /// Fusion blocks ordered from the coarsest consumer down (upper level
    /// N..1); only in steerer mode.
    blocks: Vec<FsiaBlock>,
    head: CountingHead,
    bl1_proj: Option<ConvBnRelu>,
    bl2_smooth: Option<Vec<ConvBnRelu>>,
}

impl SteererModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.backbone.validate()?;
        let mut rng = Rng::derive(seed, "model-init");
        let mut store = ParamStore::new();
        let bb = &config.backbone;
        let c = bb.channels;

        let mut stem = Vec::new();
        for i in 0..bb.stem_convs {
            let in_ch = if i == 0 { bb.in_channels } else { c };
            let stride = if i < 2 { 2 } else { 1 };
            stem.push(ConvBnRelu::init(
                &mut store,
                &mut rng,
                &format!("backbone.stem{i}"),
                in_ch,
                c,
                3,
                stride,
                1,
            )?);
        }
        let mut stages = Vec::new();
        for j in 1..=bb.levels {
            let mut stage = Vec::new();
            for i in 0..bb.stage_convs {
                let stride = if i == 0 { 2 } else { 1 };
                stage.push(ConvBnRelu::init(
                    &mut store,
                    &mut rng,
                    &format!("backbone.stage{j}.{i}"),
                    c,
                    c,
                    3,
                    stride,
                    1,
                )?);
            }
            stages.push(stage);
        }

        let mut blocks = Vec::new();
        if config.fusion == FusionMode::Steerer {
            for upper in (1..=bb.levels).rev() {
                // The block that feeds level 0 forwards nothing further, so
                // it has no uncustomized stream.
                let with_ufn = upper > 1;
                blocks.push(FsiaBlock::init(&mut store, &mut rng, upper, c, with_ufn)?);
            }
        }

        let head = CountingHead::init(&mut store, &mut rng, c)?;

        let bl1_proj = if config.fusion == FusionMode::Bl1Concat {
            Some(ConvBnRelu::init(
                &mut store,
                &mut rng,
                "bl1.proj",
                (bb.levels + 1) * c,
                c,
                1,
                1,
                0,
            )?)
        } else {
            None
        };
        let bl2_smooth = if config.fusion == FusionMode::Bl2Fpn {
            let mut smooth = Vec::new();
            for j in 0..bb.levels {
                smooth.push(ConvBnRelu::init(
                    &mut store,
                    &mut rng,
                    &format!("bl2.smooth{j}"),
                    c,
                    c,
                    3,
                    1,
                    1,
                )?);
            }
            Some(smooth)
        } else {
            None
        };

        Ok(SteererModel {
            config,
            store,
            backbone: Backbone { stem, stages },
            blocks,
            head,
            bl1_proj,
            bl2_smooth,
        })
    }

    pub fn levels(&self) -> usize {
        self.config.backbone.levels
    }

    pub fn channels(&self) -> usize {
        self.config.backbone.channels
    }

    /// Multi-resolution features R_0..R_N, finest first.
    pub fn backbone_forward(&mut self, tape: &mut Tape, image: Var, training: bool) -> Result<Vec<Var>> {
        let shape = tape.shape(image);
        let divisor = self.config.backbone.max_stride();
        if shape.h % divisor != 0 || shape.w % divisor != 0 {
            return Err(Error::IndivisibleShape {
                what: "backbone input",
                h: shape.h,
                w: shape.w,
                divisor,
            });
        }
        let Self {
            store, backbone, ..
        } = self;
        let mut x = image;
        for layer in backbone.stem.iter_mut() {
            x = layer.forward(tape, store, x, training)?;
        }
        let mut feats = vec![x];
        for stage in backbone.stages.iter_mut() {
            let mut y = *feats.last().expect("stem output");
            for layer in stage.iter_mut() {
                y = layer.forward(tape, store, y, training)?;
            }
            feats.push(y);
        }
        Ok(feats)
    }

    /// Shared counting head. With `final_branch` false the head parameters
    /// are bound as constants: the forward value is identical, but backward
    /// leaves the head untouched while still reaching `o`.
    pub fn head_forward(&self, tape: &mut Tape, o: Var, final_branch: bool) -> Result<Var> {
        self.head.forward(tape, &self.store, o, final_branch)
    }

    pub fn forward(&mut self, tape: &mut Tape, image: Var, training: bool) -> Result<ModelOutput> {
        let feats = self.backbone_forward(tape, image, training)?;
        match self.config.fusion {
            FusionMode::Steerer => self.steerer_forward(tape, &feats, training),
            FusionMode::Bl1Concat => self.bl1_forward(tape, &feats, training),
            FusionMode::Bl2Fpn => self.bl2_forward(tape, &feats, training),
        }
    }

    fn steerer_forward(
        &mut self,
        tape: &mut Tape,
        feats: &[Var],
        training: bool,
    ) -> Result<ModelOutput> {
        let levels = self.levels();
        let Self {
            store,
            blocks,
            head,
            ..
        } = self;
        let mut preds = vec![None; levels + 1];
        let mut attns = Vec::new();
        // The chain starts at the coarsest level with the raw feature.
        let mut running = feats[levels];
        preds[levels] = Some(head.forward(tape, store, running, levels == 0)?);
        for block in blocks.iter_mut() {
            let upper = block.upper_level;
            let out = block.fuse(tape, store, feats[upper - 1], running, training)?;
            let level = upper - 1;
            preds[level] = Some(head.forward(tape, store, out.selected, level == 0)?);
            attns.push((level, out.attention));
            match out.inherited {
                Some(r) => running = r,
                None => debug_assert_eq!(level, 0),
            }
        }
        Ok(ModelOutput {
            preds: preds.into_iter().map(|p| p.expect("level covered")).collect(),
            attns,
        })
    }

    fn bl1_forward(&mut self, tape: &mut Tape, feats: &[Var], training: bool) -> Result<ModelOutput> {
        let Self {
            store,
            bl1_proj,
            head,
            ..
        } = self;
        let mut cat = feats[0];
        for (j, &f) in feats.iter().enumerate().skip(1) {
            let up = tape.upsample_bilinear(f, 1 << j)?;
            cat = tape.concat_channels(cat, up)?;
        }
        let proj = bl1_proj.as_mut().expect("bl1 parameters");
        let fused = proj.forward(tape, store, cat, training)?;
        let pred = head.forward(tape, store, fused, true)?;
        Ok(ModelOutput {
            preds: vec![pred],
            attns: Vec::new(),
        })
    }

    fn bl2_forward(&mut self, tape: &mut Tape, feats: &[Var], training: bool) -> Result<ModelOutput> {
        let levels = self.levels();
        let Self {
            store,
            bl2_smooth,
            head,
            ..
        } = self;
        let smooth = bl2_smooth.as_mut().expect("bl2 parameters");
        let mut fused = vec![None; levels + 1];
        fused[levels] = Some(feats[levels]);
        for j in (0..levels).rev() {
            let up = tape.upsample_bilinear(fused[j + 1].expect("top-down order"), 2)?;
            let sum = tape.add(feats[j], up)?;
            fused[j] = Some(smooth[j].forward(tape, store, sum, training)?);
        }
        let mut preds = Vec::with_capacity(levels + 1);
        for (j, f) in fused.iter().enumerate() {
            preds.push(head.forward(tape, store, f.expect("fused"), j == 0)?);
        }
        Ok(ModelOutput {
            preds,
            attns: Vec::new(),
        })
    }

    fn bn_layers(&self) -> Vec<&BnLayer> {
        let mut out = Vec::new();
        for l in &self.backbone.stem {
            out.push(&l.bn);
        }
        for stage in &self.backbone.stages {
            for l in stage {
                out.push(&l.bn);
            }
        }
        for b in &self.blocks {
            b.collect_bn(&mut out);
        }
        if let Some(p) = &self.bl1_proj {
            out.push(&p.bn);
        }
        if let Some(s) = &self.bl2_smooth {
            for l in s {
                out.push(&l.bn);
            }
        }
        out
    }

    fn bn_layers_mut(&mut self) -> Vec<&mut BnLayer> {
        let mut out = Vec::new();
        for l in &mut self.backbone.stem {
            out.push(&mut l.bn);
        }
        for stage in &mut self.backbone.stages {
            for l in stage {
                out.push(&mut l.bn);
            }
        }
        for b in &mut self.blocks {
            b.collect_bn_mut(&mut out);
        }
        if let Some(p) = &mut self.bl1_proj {
            out.push(&mut p.bn);
        }
        if let Some(s) = &mut self.bl2_smooth {
            for l in s {
                out.push(&mut l.bn);
            }
        }
        out
    }

    /// Every tensor needed to reproduce this model bit-exactly: parameter
    /// values, optimizer state, and batch-norm running statistics.
    pub fn named_state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for p in self.store.iter() {
            let shape = p.value.shape();
            out.push((format!("p.{}", p.name), p.value.clone()));
            out.push((
                format!("opt.{}.m", p.name),
                Tensor::new(shape, p.m.clone()).expect("moment shape"),
            ));
            out.push((
                format!("opt.{}.v", p.name),
                Tensor::new(shape, p.v.clone()).expect("moment shape"),
            ));
            out.push((format!("opt.{}.t", p.name), Tensor::scalar(p.step as f64)));
        }
        for bn in self.bn_layers() {
            let c = bn.stats.mean.len();
            let shape = crate::tensor::Shape::new(1, c, 1, 1);
            out.push((
                format!("bn.{}.mean", bn.name),
                Tensor::new(shape, bn.stats.mean.clone()).expect("stat shape"),
            ));
            out.push((
                format!("bn.{}.var", bn.name),
                Tensor::new(shape, bn.stats.var.clone()).expect("stat shape"),
            ));
        }
        out
    }

    /// Restore state saved by [`SteererModel::named_state`]. Every expected
    /// tensor must be present with the right shape, and nothing extra.
    pub fn load_state(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        use std::collections::BTreeMap;
        let mut map: BTreeMap<&str, &Tensor> =
            tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut fetch = |name: &str, expect_len: usize| -> Result<Vec<f64>> {
            let t = map.remove(name).ok_or_else(|| Error::MissingTensor {
                name: name.to_string(),
            })?;
            if t.data().len() != expect_len {
                return Err(Error::invalid(
                    "load_state",
                    format!(
                        "tensor `{name}` has {} values, expected {expect_len}",
                        t.data().len()
                    ),
                ));
            }
            Ok(t.data().to_vec())
        };
        for p in self.store.iter_mut() {
            let len = p.value.data().len();
            let value = fetch(&format!("p.{}", p.name), len)?;
            p.value.data_mut().copy_from_slice(&value);
            p.m = fetch(&format!("opt.{}.m", p.name), len)?;
            p.v = fetch(&format!("opt.{}.v", p.name), len)?;
            p.step = fetch(&format!("opt.{}.t", p.name), 1)?[0] as u64;
        }
        for bn in self.bn_layers_mut() {
            let c = bn.stats.mean.len();
            bn.stats.mean = fetch(&format!("bn.{}.mean", bn.name), c)?;
            bn.stats.var = fetch(&format!("bn.{}.var", bn.name), c)?;
        }
        if let Some((name, _)) = map.into_iter().next() {
            return Err(Error::invalid(
                "load_state",
                format!("unexpected tensor `{name}` in checkpoint"),
            ));
        }
        Ok(())
    }
}

impl FsiaBlock {
    fn collect_bn<'a>(&'a self, out: &mut Vec<&'a BnLayer>) {
        for l in self.cfn_layers() {
            out.push(&l.bn);
        }
        for l in self.ufn_layers() {
            out.push(&l.bn);
        }
    }

    fn collect_bn_mut<'a>(&'a mut self, out: &mut Vec<&'a mut BnLayer>) {
        let (cfn, ufn) = self.layers_mut();
        for l in cfn {
            out.push(&mut l.bn);
        }
        if let Some(ufn) = ufn {
            for l in ufn {
                out.push(&mut l.bn);
            }
        }
    }
}
