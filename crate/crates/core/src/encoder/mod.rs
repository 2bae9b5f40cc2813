//! A small convolutional encoder with a projection head, its momentum twin,
//! optimizers, checkpointing and the pretraining loop.

pub mod checkpoint;
pub mod layers;
pub mod optim;
pub mod train;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grid::{FeatureGrid, Provenance};
use crate::viewgeom::FloatImage;
use crate::{Error, Result};

use layers::{BatchNorm2d, Conv2d, Param, Relu, Tensor3};

/// Forward mode: train uses batch statistics in normalization layers, eval
/// uses the running statistics and is fully deterministic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Architecture description: strided conv stages followed by a projection
/// head of two 1x1 convolutions around a normalization and a ReLU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderArch {
    pub input_channels: usize,
    /// (out_channels, stride) per 3x3 conv stage.
    pub stages: Vec<(usize, usize)>,
    pub head_hidden: usize,
    pub head_out: usize,
}

impl Default for EncoderArch {
    fn default() -> Self {
        Self {
            input_channels: 3,
            stages: vec![(8, 2), (16, 2), (32, 2)],
            head_hidden: 64,
            head_out: 16,
        }
    }
}

impl EncoderArch {
    pub fn total_stride(&self) -> usize {
        self.stages.iter().map(|&(_, s)| s).product()
    }

    /// A deliberately tiny variant for gradient checks (at most a couple of
    /// thousand parameters).
    pub fn tiny() -> Self {
        Self {
            input_channels: 3,
            stages: vec![(4, 2), (6, 2)],
            head_hidden: 8,
            head_out: 5,
        }
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv2d,
    bn: BatchNorm2d,
    relu: Relu,
}

/// Backbone plus projection head with hand-written forward and backward.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub arch: EncoderArch,
    blocks: Vec<ConvBlock>,
    head_conv1: Conv2d,
    head_bn: BatchNorm2d,
    head_relu: Relu,
    head_conv2: Conv2d,
}

impl Encoder {
    /// Deterministic Kaiming-style initialization from the seed.
    pub fn new(arch: &EncoderArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::new();
        let mut in_ch = arch.input_channels;
        for (idx, &(out_ch, stride)) in arch.stages.iter().enumerate() {
            let name = format!("stage{idx}");
            blocks.push(ConvBlock {
                conv: Conv2d::new(&format!("{name}.conv"), in_ch, out_ch, 3, stride, 1, &mut rng),
                bn: BatchNorm2d::new(&format!("{name}.bn"), out_ch),
                relu: Relu::new(),
            });
            in_ch = out_ch;
        }
        Self {
            arch: arch.clone(),
            head_conv1: Conv2d::new("head.conv1", in_ch, arch.head_hidden, 1, 1, 0, &mut rng),
            head_bn: BatchNorm2d::new("head.bn", arch.head_hidden),
            head_relu: Relu::new(),
            head_conv2: Conv2d::new(
                "head.conv2",
                arch.head_hidden,
                arch.head_out,
                1,
                1,
                0,
                &mut rng,
            ),
            blocks,
        }
    }

    fn image_to_tensor(view: &FloatImage) -> Tensor3 {
        let mut t = Tensor3::zeros(3, view.height, view.width);
        for r in 0..view.height {
            for c in 0..view.width {
                let p = view.pixel(r, c);
                for ch in 0..3 {
                    *t.at_mut(ch, r, c) = p[ch];
                }
            }
        }
        t
    }

    /// Run the full stack on one view. The view resolution must be divisible
    /// by the total stride.
    pub fn forward(
        &mut self,
        view: &FloatImage,
        mode: Mode,
        provenance: Provenance,
    ) -> Result<FeatureGrid> {
        let stride = self.arch.total_stride();
        if view.height % stride != 0 || view.width % stride != 0 {
            return Err(Error::ShapeMismatch {
                context: "encoder input",
                expected: format!("dimensions divisible by {stride}"),
                got: format!("{}x{}", view.height, view.width),
            });
        }
        let train = mode == Mode::Train;
        let mut t = Self::image_to_tensor(view);
        for block in &mut self.blocks {
            t = block.conv.forward(&t, train)?;
            t = block.bn.forward(&t, train)?;
            t = block.relu.forward(&t, train);
        }
        t = self.head_conv1.forward(&t, train)?;
        t = self.head_bn.forward(&t, train)?;
        t = self.head_relu.forward(&t, train);
        t = self.head_conv2.forward(&t, train)?;

        let (rows, cols, channels) = (t.height, t.width, t.channels);
        let mut values = vec![0.0; rows * cols * channels];
        for c in 0..channels {
            for y in 0..rows {
                for x in 0..cols {
                    values[(y * cols + x) * channels + c] = t.at(c, y, x);
                }
            }
        }
        FeatureGrid::new(rows, cols, channels, values, provenance)
    }

    /// Backpropagate a gradient at the output grid through the whole stack,
    /// accumulating parameter gradients. Must follow a train-mode forward.
    pub fn backward(&mut self, grad_output: &FeatureGrid) -> Result<()> {
        let (rows, cols, channels) = grad_output.shape();
        if channels != self.arch.head_out {
            return Err(Error::ShapeMismatch {
                context: "encoder backward",
                expected: format!("{} channels", self.arch.head_out),
                got: format!("{channels}"),
            });
        }
        let mut dy = Tensor3::zeros(channels, rows, cols);
        for c in 0..channels {
            for y in 0..rows {
                for x in 0..cols {
                    *dy.at_mut(c, y, x) = grad_output.values[(y * cols + x) * channels + c];
                }
            }
        }
        dy = self.head_conv2.backward(&dy);
        dy = self.head_relu.backward(&dy);
        dy = self.head_bn.backward(&dy);
        dy = self.head_conv1.backward(&dy);
        for block in self.blocks.iter_mut().rev() {
            dy = block.relu.backward(&dy);
            dy = block.bn.backward(&dy);
            dy = block.conv.backward(&dy);
        }
        Ok(())
    }

    pub fn for_each_param(&self, f: &mut dyn FnMut(&Param)) {
        for block in &self.blocks {
            f(&block.conv.weight);
            f(&block.conv.bias);
            f(&block.bn.gain);
            f(&block.bn.bias);
        }
        f(&self.head_conv1.weight);
        f(&self.head_conv1.bias);
        f(&self.head_bn.gain);
        f(&self.head_bn.bias);
        f(&self.head_conv2.weight);
        f(&self.head_conv2.bias);
    }

    /// Mutable borrows of every parameter, in the same fixed order as
    /// [`Encoder::for_each_param`].
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for block in &mut self.blocks {
            out.push(&mut block.conv.weight);
            out.push(&mut block.conv.bias);
            out.push(&mut block.bn.gain);
            out.push(&mut block.bn.bias);
        }
        out.push(&mut self.head_conv1.weight);
        out.push(&mut self.head_conv1.bias);
        out.push(&mut self.head_bn.gain);
        out.push(&mut self.head_bn.bias);
        out.push(&mut self.head_conv2.weight);
        out.push(&mut self.head_conv2.bias);
        out
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for p in self.params_mut() {
            f(p);
        }
    }

    /// Running statistics of every normalization layer, in a fixed order.
    pub fn running_stats(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for (idx, block) in self.blocks.iter().enumerate() {
            out.push((format!("stage{idx}.bn.running_mean"), block.bn.running_mean.clone()));
            out.push((format!("stage{idx}.bn.running_var"), block.bn.running_var.clone()));
        }
        out.push(("head.bn.running_mean".into(), self.head_bn.running_mean.clone()));
        out.push(("head.bn.running_var".into(), self.head_bn.running_var.clone()));
        out
    }

    pub fn set_running_stats(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let target = if let Some(rest) = name.strip_prefix("stage") {
            let (idx_text, field) = rest.split_once('.').unwrap_or((rest, ""));
            let idx: usize = idx_text
                .parse()
                .map_err(|_| Error::invalid("running stats", format!("bad name {name}")))?;
            let block = self
                .blocks
                .get_mut(idx)
                .ok_or_else(|| Error::invalid("running stats", format!("no stage {idx}")))?;
            match field {
                "bn.running_mean" => &mut block.bn.running_mean,
                "bn.running_var" => &mut block.bn.running_var,
                _ => return Err(Error::invalid("running stats", format!("bad name {name}"))),
            }
        } else {
            match name {
                "head.bn.running_mean" => &mut self.head_bn.running_mean,
                "head.bn.running_var" => &mut self.head_bn.running_var,
                _ => return Err(Error::invalid("running stats", format!("bad name {name}"))),
            }
        };
        if target.len() != values.len() {
            return Err(Error::ShapeMismatch {
                context: "running stats",
                expected: format!("{}", target.len()),
                got: format!("{}", values.len()),
            });
        }
        target.copy_from_slice(values);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.for_each_param_mut(&mut |p| p.zero_grad());
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |p| n += p.data.len());
        n
    }
}

/// Regular encoder plus its momentum twin. The momentum side never receives
/// gradients; it only moves through [`EncoderPair::ema_update`].
#[derive(Clone, Debug)]
pub struct EncoderPair {
    pub regular: Encoder,
    pub momentum: Encoder,
    pub beta: f64,
}

impl EncoderPair {
    /// Both encoders start from the same weights.
    pub fn new(arch: &EncoderArch, seed: u64, beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::invalid("beta", format!("{beta} not in [0, 1]")));
        }
        let regular = Encoder::new(arch, seed);
        let momentum = regular.clone();
        Ok(Self {
            regular,
            momentum,
            beta,
        })
    }

    pub fn forward_regular(&mut self, view: &FloatImage, mode: Mode) -> Result<FeatureGrid> {
        self.regular.forward(view, mode, Provenance::Regular)
    }

    pub fn forward_momentum(&mut self, view: &FloatImage, mode: Mode) -> Result<FeatureGrid> {
        self.momentum.forward(view, mode, Provenance::Momentum)
    }

    /// Momentum update: every momentum parameter becomes
    /// `beta * old + (1 - beta) * regular`. Running statistics of the
    /// normalization layers are copied verbatim, not averaged.
    pub fn ema_update(&mut self) -> Result<()> {
        let beta = self.beta;
        let mut regular_params = Vec::new();
        self.regular
            .for_each_param(&mut |p| regular_params.push((p.data.clone(), p.data.len())));
        let mut idx = 0;
        let mut err = None;
        self.momentum.for_each_param_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            let (data, len) = &regular_params[idx];
            if p.data.len() != *len {
                err = Some(Error::ShapeMismatch {
                    context: "ema update",
                    expected: format!("{len}"),
                    got: format!("{}", p.data.len()),
                });
                return;
            }
            for (m, r) in p.data.iter_mut().zip(data) {
                *m = *m * beta + (1.0 - beta) * r;
            }
            idx += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        for (name, values) in self.regular.running_stats() {
            self.momentum.set_running_stats(&name, &values)?;
        }
        Ok(())
    }
}
