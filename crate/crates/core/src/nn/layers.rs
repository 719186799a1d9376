use alloc::format;
use alloc::vec::Vec;

use super::params::{xavier_uniform, Mode, ParamId, ParamStore, Pass};
use crate::error::{Error, Result};
use crate::graph::{BnLayout, Var};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply<T: Scalar>(self, pass: &mut Pass<'_, T>, x: Var) -> Var {
        match self {
            Activation::Relu => pass.graph.relu(x),
            Activation::Identity => x,
        }
    }
}

/// Fully connected layer `x · W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let w = xavier_uniform(rng, in_dim, out_dim, in_dim * out_dim);
        let weight = ps.add_param(&format!("{name}.weight"), Tensor::new(alloc::vec![in_dim, out_dim], w).unwrap());
        let bias = ps.add_param(&format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let w = pass.param(self.weight);
        let b = pass.param(self.bias);
        let y = pass.graph.matmul(x, w)?;
        pass.graph.add_bias(y, b)
    }
}

/// Square-kernel convolution over `[N, C, H, W]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        let kk = kernel * kernel;
        let w = xavier_uniform(rng, in_channels * kk, out_channels * kk, out_channels * in_channels * kk);
        let weight = ps.add_param(
            &format!("{name}.weight"),
            Tensor::new(alloc::vec![out_channels, in_channels, kernel, kernel], w).unwrap(),
        );
        let bias = ps.add_param(&format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward<T: Scalar>(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let w = pass.param(self.weight);
        let b = pass.param(self.bias);
        pass.graph.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Batch normalization with learnable scale/shift and running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: ps.add_param(&format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: ps.add_param(&format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: ps.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: ps.add_buffer(&format!("{name}.running_var"), Tensor::full(&[channels], T::one())),
            channels,
        }
    }

    /// Train mode normalizes with batch statistics and records them for the
    /// running-average update; eval mode uses the running statistics only.
    pub fn forward<T: Scalar>(&self, pass: &mut Pass<'_, T>, x: Var, layout: BnLayout) -> Result<Var> {
        let g = pass.param(self.gamma);
        let b = pass.param(self.beta);
        let store = pass.store();
        let running = match pass.mode() {
            Mode::Eval => Some((store.get(self.running_mean).data(), store.get(self.running_var).data())),
            Mode::Train => None,
        };
        let (y, stats) = pass.graph.batch_norm(x, g, b, layout, running, T::lit(BN_EPS))?;
        if let Some(stats) = stats {
            pass.record_bn(self.running_mean, self.running_var, stats);
        }
        Ok(y)
    }
}

#[derive(Debug, Clone)]
pub struct MlpLayer {
    pub linear: Linear,
    pub norm: Option<BatchNorm>,
    pub activation: Activation,
}

/// Per-row MLP: every layer but the last is batch-normed and ReLU-activated,
/// the last one is linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<MlpLayer>,
}

impl Mlp {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, in_dim: usize, widths: &[usize], rng: &mut Rng) -> Result<Self> {
        if widths.is_empty() || widths.iter().any(|&w| w == 0) || in_dim == 0 {
            return Err(Error::Config(format!("invalid MLP widths {widths:?} (input {in_dim})")));
        }
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = in_dim;
        for (i, &w) in widths.iter().enumerate() {
            let last = i + 1 == widths.len();
            let linear = Linear::new(ps, &format!("{name}.layer{}", i + 1), prev, w, rng);
            let norm = (!last).then(|| BatchNorm::new(ps, &format!("{name}.layer{}.bn", i + 1), w));
            layers.push(MlpLayer {
                linear,
                norm,
                activation: if last { Activation::Identity } else { Activation::Relu },
            });
            prev = w;
        }
        Ok(Mlp { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].linear.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().linear.out_dim
    }

    /// `x: [rows, in_dim]` → `[rows, out_dim]`.
    pub fn forward<T: Scalar>(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let s = pass.graph.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.in_dim() {
            return Err(Error::dim("mlp_forward", &s, &[self.in_dim()]));
        }
        let rows = s[0];
        let mut h = x;
        for layer in &self.layers {
            h = layer.linear.forward(pass, h)?;
            if let Some(bn) = &layer.norm {
                h = bn.forward(pass, h, BnLayout::rows(rows, layer.linear.out_dim))?;
            }
            h = layer.activation.apply(pass, h);
        }
        Ok(h)
    }
}

/// Conv stack whose stage outputs feed the hypercolumn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub stage_channels: Vec<usize>,
    /// Indices of stages whose outputs are sampled into the hypercolumn.
    pub taps: Vec<usize>,
    /// Aerial image side length in pixels.
    pub input_size: usize,
}

impl BackboneConfig {
    /// Small backbone for CPU-scale experiments.
    pub fn desk() -> Self {
        BackboneConfig {
            stage_channels: alloc::vec![8, 16, 32, 32],
            taps: alloc::vec![0, 1, 2, 3],
            input_size: 64,
        }
    }

    /// Channel widths of VGG16 conv-{1_2, 2_2, 3_3, 4_3}.
    pub fn paper_scale() -> Self {
        BackboneConfig {
            stage_channels: alloc::vec![64, 128, 256, 512],
            taps: alloc::vec![0, 1, 2, 3],
            input_size: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::Config(format!("stage channels must be ≥ 1: {:?}", self.stage_channels)));
        }
        if self.taps.is_empty() {
            return Err(Error::Config("hypercolumn needs at least one tap".into()));
        }
        if let Some(t) = self.taps.iter().find(|&&t| t >= self.stage_channels.len()) {
            return Err(Error::Config(format!("tap {t} is not a stage")));
        }
        if self.input_size == 0 {
            return Err(Error::Config("input size must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Hypercolumn width: the sum of tapped stage channels.
    pub fn hypercolumn_width(&self) -> usize {
        self.taps.iter().map(|&t| self.stage_channels[t]).sum()
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub conv: Conv2d,
    pub norm: BatchNorm,
}

/// 3×3 conv stages with stride-2 downsampling between stages, each followed
/// by batch norm and ReLU.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stages: Vec<Stage>,
}

impl Backbone {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, in_channels: usize, config: BackboneConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut prev = in_channels;
        let stages = config
            .stage_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let stride = if i == 0 { 1 } else { 2 };
                let conv = Conv2d::new(ps, &format!("{name}.stage{}.conv", i + 1), prev, c, 3, stride, 1, rng);
                let norm = BatchNorm::new(ps, &format!("{name}.stage{}.bn", i + 1), c);
                prev = c;
                Stage { conv, norm }
            })
            .collect();
        Ok(Backbone { config, stages })
    }

    /// Runs the stages and returns the tapped feature maps.
    pub fn forward<T: Scalar>(&self, pass: &mut Pass<'_, T>, image: Var) -> Result<Vec<Var>> {
        let mut h = image;
        let mut outs = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            h = stage.conv.forward(pass, h)?;
            let layout = BnLayout::nchw(pass.graph.shape(h));
            h = stage.norm.forward(pass, h, layout)?;
            h = pass.graph.relu(h);
            outs.push(h);
        }
        Ok(self.config.taps.iter().map(|&t| outs[t]).collect())
    }
}

/// Samples every feature map at the normalized `(y, x)` points and
/// concatenates along channels: `[N · P, Σ C_s]`.
pub fn hypercolumn<T: Scalar>(pass: &mut Pass<'_, T>, maps: &[Var], points: &[(f64, f64)]) -> Result<Var> {
    if maps.is_empty() {
        return Err(Error::Config("hypercolumn needs at least one feature map".into()));
    }
    let sampled = maps
        .iter()
        .map(|&m| pass.graph.bilinear_sample(m, points))
        .collect::<Result<Vec<_>>>()?;
    pass.graph.concat(&sampled)
}
