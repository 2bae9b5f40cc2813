//! Differentiable building blocks: strided convolution, per-channel batch
//! normalization with running statistics, and ReLU. Forward passes cache what
//! the hand-written backward passes need; gradients accumulate into each
//! parameter until explicitly cleared.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Channel-major activation tensor (channels, height, width).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    /// Per-channel plane as a slice.
    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

/// What role a parameter plays; optimizers use this to exclude bias and
/// normalization parameters from trust scaling and weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    NormGain,
    NormBias,
}

/// A named, flat parameter tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, kind: ParamKind, shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let grad = vec![0.0; data.len()];
        Self {
            name: name.into(),
            kind,
            shape,
            data,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Standard normal sample via Box-Muller; two uniform draws per call keeps
/// the stream layout simple and deterministic.
pub fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// 2D convolution with square kernel, stride and zero padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    cached_input: Option<Tensor3>,
}

impl Conv2d {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        let weight: Vec<f64> = (0..out_channels * in_channels * kernel * kernel)
            .map(|_| sample_normal(rng) * std)
            .collect();
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                ParamKind::Weight,
                vec![out_channels, in_channels, kernel, kernel],
                weight,
            ),
            bias: Param::new(
                format!("{name}.bias"),
                ParamKind::Bias,
                vec![out_channels],
                vec![0.0; out_channels],
            ),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            cached_input: None,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn weight_at(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> f64 {
        self.weight.data[((oc * self.in_channels + ic) * self.kernel + ky) * self.kernel + kx]
    }

    pub fn forward(&mut self, x: &Tensor3, keep_cache: bool) -> Result<Tensor3> {
        if x.channels != self.in_channels {
            return Err(Error::ShapeMismatch {
                context: "conv input channels",
                expected: format!("{}", self.in_channels),
                got: format!("{}", x.channels),
            });
        }
        let (oh, ow) = self.out_size(x.height, x.width);
        let mut y = Tensor3::zeros(self.out_channels, oh, ow);
        for oc in 0..self.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = self.bias.data[oc];
                    for ic in 0..self.in_channels {
                        for ky in 0..self.kernel {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= x.height as isize {
                                continue;
                            }
                            for kx in 0..self.kernel {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix < 0 || ix >= x.width as isize {
                                    continue;
                                }
                                acc += self.weight_at(oc, ic, ky, kx)
                                    * x.at(ic, iy as usize, ix as usize);
                            }
                        }
                    }
                    *y.at_mut(oc, oy, ox) = acc;
                }
            }
        }
        self.cached_input = keep_cache.then(|| x.clone());
        Ok(y)
    }

    /// Backpropagate, accumulating parameter gradients and returning the
    /// gradient at the input.
    pub fn backward(&mut self, dy: &Tensor3) -> Tensor3 {
        let x = self
            .cached_input
            .take()
            .expect("conv backward without cached forward");
        let mut dx = Tensor3::zeros(x.channels, x.height, x.width);
        let k = self.kernel;
        for oc in 0..self.out_channels {
            for oy in 0..dy.height {
                for ox in 0..dy.width {
                    let d = dy.at(oc, oy, ox);
                    if d == 0.0 {
                        continue;
                    }
                    self.bias.grad[oc] += d;
                    for ic in 0..self.in_channels {
                        for ky in 0..k {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= x.height as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix < 0 || ix >= x.width as isize {
                                    continue;
                                }
                                let widx = ((oc * self.in_channels + ic) * k + ky) * k + kx;
                                self.weight.grad[widx] += d * x.at(ic, iy as usize, ix as usize);
                                *dx.at_mut(ic, iy as usize, ix as usize) +=
                                    d * self.weight.data[widx];
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

#[derive(Clone, Debug)]
struct BnCache {
    xhat: Tensor3,
    inv_std: Vec<f64>,
}

/// Per-channel batch normalization over the spatial axes, with running
/// statistics for eval mode.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gain: Param,
    pub bias: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    channels: usize,
    cache: Option<BnCache>,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gain: Param::new(
                format!("{name}.gain"),
                ParamKind::NormGain,
                vec![channels],
                vec![1.0; channels],
            ),
            bias: Param::new(
                format!("{name}.bias"),
                ParamKind::NormBias,
                vec![channels],
                vec![0.0; channels],
            ),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
            channels,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor3, train: bool) -> Result<Tensor3> {
        if x.channels != self.channels {
            return Err(Error::ShapeMismatch {
                context: "batchnorm channels",
                expected: format!("{}", self.channels),
                got: format!("{}", x.channels),
            });
        }
        let n = (x.height * x.width) as f64;
        let mut y = Tensor3::zeros(x.channels, x.height, x.width);
        if train {
            let mut xhat = Tensor3::zeros(x.channels, x.height, x.width);
            let mut inv_std = vec![0.0; x.channels];
            for c in 0..x.channels {
                let plane = x.plane(c);
                let mean = plane.iter().sum::<f64>() / n;
                let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let is = 1.0 / (var + self.eps).sqrt();
                inv_std[c] = is;
                self.running_mean[c] = (1.0 - self.momentum) * self.running_mean[c]
                    + self.momentum * mean;
                self.running_var[c] =
                    (1.0 - self.momentum) * self.running_var[c] + self.momentum * var;
                let base = c * x.height * x.width;
                for i in 0..x.height * x.width {
                    let h = (plane[i] - mean) * is;
                    xhat.data[base + i] = h;
                    y.data[base + i] = self.gain.data[c] * h + self.bias.data[c];
                }
            }
            self.cache = Some(BnCache { xhat, inv_std });
        } else {
            for c in 0..x.channels {
                let is = 1.0 / (self.running_var[c] + self.eps).sqrt();
                let base = c * x.height * x.width;
                for i in 0..x.height * x.width {
                    y.data[base + i] =
                        self.gain.data[c] * (x.plane(c)[i] - self.running_mean[c]) * is
                            + self.bias.data[c];
                }
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor3) -> Tensor3 {
        let cache = self
            .cache
            .take()
            .expect("batchnorm backward without train forward");
        let n = (dy.height * dy.width) as f64;
        let mut dx = Tensor3::zeros(dy.channels, dy.height, dy.width);
        for c in 0..dy.channels {
            let base = c * dy.height * dy.width;
            let count = dy.height * dy.width;
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for i in 0..count {
                let d = dy.data[base + i];
                sum_dy += d;
                sum_dy_xhat += d * cache.xhat.data[base + i];
            }
            self.bias.grad[c] += sum_dy;
            self.gain.grad[c] += sum_dy_xhat;
            let g = self.gain.data[c];
            let is = cache.inv_std[c];
            for i in 0..count {
                let d = dy.data[base + i];
                let xh = cache.xhat.data[base + i];
                dx.data[base + i] = g * is / n * (n * d - sum_dy - xh * sum_dy_xhat);
            }
        }
        dx
    }
}

/// ReLU with a cached activation mask.
#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, x: &Tensor3, keep_cache: bool) -> Tensor3 {
        let mut y = x.clone();
        let mut mask = keep_cache.then(|| vec![false; x.data.len()]);
        for (i, v) in y.data.iter_mut().enumerate() {
            if *v > 0.0 {
                if let Some(m) = &mut mask {
                    m[i] = true;
                }
            } else {
                *v = 0.0;
            }
        }
        self.mask = mask;
        y
    }

    pub fn backward(&mut self, dy: &Tensor3) -> Tensor3 {
        let mask = self.mask.take().expect("relu backward without forward");
        let mut dx = dy.clone();
        for (v, keep) in dx.data.iter_mut().zip(mask) {
            if !keep {
                *v = 0.0;
            }
        }
        dx
    }
}
