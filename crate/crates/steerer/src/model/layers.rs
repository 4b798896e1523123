//! Conv / norm building blocks with Kaiming fan-in initialization.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{BnStats, ParamId, ParamStore, Shape, Tape, Tensor, Var};

#[derive(Debug)]
pub(crate) struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let fan_in = (in_ch * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w = Tensor::from_fn(Shape::new(out_ch, in_ch, k, k), |_| rng.normal() * std);
        let b = Tensor::zeros(Shape::new(1, out_ch, 1, 1));
        Ok(ConvLayer {
            w: store.register(format!("{name}.w"), w)?,
            b: store.register(format!("{name}.b"), b)?,
            stride,
            pad,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }

    /// Forward with the weights bound as constants: gradient still flows to
    /// the input, but not to the parameters.
    pub fn forward_frozen(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.frozen_param(store, self.w);
        let b = tape.frozen_param(store, self.b);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug)]
pub(crate) struct BnLayer {
    /// Stable path used to name the running-stat buffers in checkpoints.
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: BnStats,
}

impl BnLayer {
    pub fn init(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let gamma = store.register(
            format!("{name}.gamma"),
            Tensor::filled(Shape::new(1, channels, 1, 1), 1.0),
        )?;
        let beta = store.register(
            format!("{name}.beta"),
            Tensor::zeros(Shape::new(1, channels, 1, 1)),
        )?;
        Ok(BnLayer {
            name: name.to_string(),
            gamma,
            beta,
            stats: BnStats::new(channels),
        })
    }

    pub fn forward(&mut self, tape: &mut Tape, store: &ParamStore, x: Var, training: bool) -> Result<Var> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        tape.batch_norm(x, gamma, beta, &mut self.stats, training)
    }
}

/// conv -> batch norm -> relu.
#[derive(Debug)]
pub(crate) struct ConvBnRelu {
    pub conv: ConvLayer,
    pub bn: BnLayer,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        Ok(ConvBnRelu {
            conv: ConvLayer::init(store, rng, &format!("{name}.conv"), in_ch, out_ch, k, stride, pad)?,
            bn: BnLayer::init(store, &format!("{name}.bn"), out_ch)?,
        })
    }

    pub fn forward(&mut self, tape: &mut Tape, store: &ParamStore, x: Var, training: bool) -> Result<Var> {
        let c = self.conv.forward(tape, store, x)?;
        let n = self.bn.forward(tape, store, c, training)?;
        Ok(tape.relu(n))
    }
}
