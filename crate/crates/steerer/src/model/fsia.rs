//! Feature selection-and-inheritance adaptor.
//!
//! Each block consumes the running fused feature at its level and the raw
//! backbone feature one level finer, disentangles the coarse feature into a
//! customized stream (CFN) and an uncustomized stream (UFN) under a
//! two-channel softmax attention (SMG), and emits the head input for the
//! finer level plus the next running feature. The block feeding the finest
//! level has no UFN: nothing is forwarded past it.

use super::layers::{ConvBnRelu, ConvLayer};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ParamStore, Tape, Var};

#[derive(Debug)]
pub(crate) struct SoftMaskGenerator {
    c1: ConvLayer,
    c2: ConvLayer,
    /// Final 1x1 projection to two attention channels.
    pub c3: ConvLayer,
}

impl SoftMaskGenerator {
    fn init(store: &mut ParamStore, rng: &mut Rng, name: &str, channels: usize) -> Result<Self> {
        Ok(SoftMaskGenerator {
            c1: ConvLayer::init(store, rng, &format!("{name}.c1"), channels, channels, 3, 1, 1)?,
            c2: ConvLayer::init(store, rng, &format!("{name}.c2"), channels, channels, 3, 1, 1)?,
            c3: ConvLayer::init(store, rng, &format!("{name}.c3"), channels, 2, 1, 1, 0)?,
        })
    }

    /// Two-channel attention at the *upper* (finer) resolution: conv stack,
    /// softmax across the two channels, then bilinear x2.
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let a = self.c1.forward(tape, store, x)?;
        let a = tape.relu(a);
        let a = self.c2.forward(tape, store, a)?;
        let a = tape.relu(a);
        let a = self.c3.forward(tape, store, a)?;
        let a = tape.channel_softmax(a)?;
        tape.upsample_bilinear(a, 2)
    }
}

#[derive(Debug)]
pub(crate) struct FsiaBlock {
    /// The level this block consumes; outputs live at `upper_level - 1`.
    pub upper_level: usize,
    cfn: [ConvBnRelu; 2],
    ufn: Option<[ConvBnRelu; 2]>,
    pub smg: SoftMaskGenerator,
    /// Shared 1x1 projection applied after both concatenations, restoring C
    /// channels so one counting head fits every level.
    proj: ConvLayer,
}

pub(crate) struct FsiaOutput {
    /// Head input O_{j-1}: the finer feature joined with the gated
    /// customized stream.
    pub selected: Var,
    /// Next running feature R̄_{j-1}; absent for the block that feeds the
    /// finest level.
    pub inherited: Option<Var>,
    /// Two-channel attention at the output resolution (customized channel
    /// first); the channels sum to one at every position.
    pub attention: Var,
}

impl FsiaBlock {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut Rng,
        upper_level: usize,
        channels: usize,
        with_ufn: bool,
    ) -> Result<Self> {
        let name = format!("fsia{upper_level}");
        let mk_pair = |store: &mut ParamStore, rng: &mut Rng, tag: &str| -> Result<[ConvBnRelu; 2]> {
            Ok([
                ConvBnRelu::init(store, rng, &format!("{name}.{tag}0"), channels, channels, 3, 1, 1)?,
                ConvBnRelu::init(store, rng, &format!("{name}.{tag}1"), channels, channels, 3, 1, 1)?,
            ])
        };
        let cfn = mk_pair(store, rng, "cfn")?;
        let ufn = if with_ufn {
            Some(mk_pair(store, rng, "ufn")?)
        } else {
            None
        };
        let smg = SoftMaskGenerator::init(store, rng, &format!("{name}.smg"), channels)?;
        let proj = ConvLayer::init(store, rng, &format!("{name}.proj"), 2 * channels, channels, 1, 1, 0)?;
        Ok(FsiaBlock {
            upper_level,
            cfn,
            ufn,
            smg,
            proj,
        })
    }

    #[cfg(test)]
    pub fn has_ufn(&self) -> bool {
        self.ufn.is_some()
    }

    pub(crate) fn cfn_layers(&self) -> &[ConvBnRelu] {
        &self.cfn
    }

    pub(crate) fn ufn_layers(&self) -> &[ConvBnRelu] {
        self.ufn.as_ref().map(|u| u.as_slice()).unwrap_or(&[])
    }

    pub(crate) fn layers_mut(&mut self) -> (&mut [ConvBnRelu], Option<&mut [ConvBnRelu]>) {
        (
            self.cfn.as_mut_slice(),
            self.ufn.as_mut().map(|u| u.as_mut_slice()),
        )
    }

    /// Fuse the coarse running feature `r_bar` (level j) into the finer raw
    /// feature `r_prev` (level j-1).
    pub fn fuse(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        r_prev: Var,
        r_bar: Var,
        training: bool,
    ) -> Result<FsiaOutput> {
        let sp = tape.shape(r_prev);
        let sb = tape.shape(r_bar);
        if sp.h != 2 * sb.h || sp.w != 2 * sb.w || sp.c != sb.c || sp.n != sb.n {
            return Err(Error::ShapeMismatch {
                op: "fsia_fuse (r_bar must be half of r_prev)",
                left: sp.dims(),
                right: sb.dims(),
            });
        }

        let attention = self.smg.forward(tape, store, r_bar)?;
        let a_c = tape.slice_channels(attention, 0, 1)?;

        let mut c = r_bar;
        for layer in self.cfn.iter_mut() {
            c = layer.forward(tape, store, c, training)?;
        }
        let c = tape.upsample_bilinear(c, 2)?;
        let gated_c = tape.hadamard(c, a_c)?;

        let cat_sel = tape.concat_channels(r_prev, gated_c)?;
        let selected = self.proj.forward(tape, store, cat_sel)?;

        let inherited = match self.ufn.as_mut() {
            Some(ufn) => {
                let a_u = tape.slice_channels(attention, 1, 2)?;
                let mut u = r_bar;
                for layer in ufn.iter_mut() {
                    u = layer.forward(tape, store, u, training)?;
                }
                let u = tape.upsample_bilinear(u, 2)?;
                let gated_u = tape.hadamard(u, a_u)?;
                let mix = tape.add(gated_u, gated_c)?;
                let cat_inh = tape.concat_channels(r_prev, mix)?;
                Some(self.proj.forward(tape, store, cat_inh)?)
            }
            None => None,
        };

        Ok(FsiaOutput {
            selected,
            inherited,
            attention,
        })
    }
}
