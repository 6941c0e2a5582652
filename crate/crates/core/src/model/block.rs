use rand::Rng;

use crate::attention::{MhsaConfig, MhsaLayer};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{BnMode, Graph, RunningStats, Tensor, Var};

/// Named running statistics, one entry per batch-norm layer.
pub type BnBank = Vec<(String, RunningStats)>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpatialOp {
    Conv3x3,
    Mhsa,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BottleneckSpec {
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    pub spatial_op: SpatialOp,
    pub stride: usize,
    pub has_projection_shortcut: bool,
}

impl BottleneckSpec {
    pub fn validate(&self) -> Result<()> {
        if self.mid_channels == 0 || self.out_channels != 4 * self.mid_channels {
            return Err(Error::invalid(
                "bottleneck",
                format!("out_channels {} must be 4 x mid_channels {}", self.out_channels, self.mid_channels),
            ));
        }
        if self.stride != 1 && self.stride != 2 {
            return Err(Error::invalid("bottleneck", format!("stride {} not in {{1, 2}}", self.stride)));
        }
        if !self.has_projection_shortcut && (self.stride != 1 || self.in_channels != self.out_channels) {
            return Err(Error::invalid(
                "bottleneck",
                format!(
                    "identity shortcut cannot map {} channels / stride {} to {} channels",
                    self.in_channels, self.stride, self.out_channels
                ),
            ));
        }
        Ok(())
    }
}

/// Batch-norm affine parameters plus the index of its running statistics.
#[derive(Clone, Copy, Debug)]
pub struct BnRef {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: usize,
}

/// Bias-free convolution followed by batch norm.
#[derive(Clone, Copy, Debug)]
pub struct ConvBn {
    pub weight: ParamId,
    pub stride: usize,
    pub padding: usize,
    pub bn: BnRef,
}

/// Registers parameters and running statistics while a network is assembled.
pub struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub bank: &'a mut BnBank,
    pub rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    pub fn bn(&mut self, name: &str, channels: usize) -> Result<BnRef> {
        let gamma = self.store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0))?;
        let beta = self.store.add(format!("{name}.beta"), Tensor::zeros(&[channels]))?;
        self.bank.push((name.to_string(), RunningStats::new(channels)));
        Ok(BnRef { gamma, beta, stats: self.bank.len() - 1 })
    }

    /// Kaiming fan-in initialization, std = sqrt(2 / (cin·k·k)).
    pub fn conv_bn(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<ConvBn> {
        let std = (2.0 / (cin * kernel * kernel) as f64).sqrt();
        let w = Tensor::randn(&[cout, cin, kernel, kernel], std, self.rng);
        let weight = self.store.add(format!("{name}.weight"), w)?;
        let bn = self.bn(&format!("{name}.bn"), cout)?;
        Ok(ConvBn { weight, stride, padding, bn })
    }
}

/// State threaded through one forward pass.
pub struct Pass<'a> {
    pub g: &'a mut Graph,
    pub params: &'a Bound,
    pub bank: &'a BnBank,
    pub mode: BnMode,
    /// `(bank index, batch-norm node)` for every normalization applied.
    pub bn_nodes: Vec<(usize, Var)>,
}

impl<'a> Pass<'a> {
    pub fn new(g: &'a mut Graph, params: &'a Bound, bank: &'a BnBank, mode: BnMode) -> Self {
        Pass { g, params, bank, mode, bn_nodes: Vec::new() }
    }

    pub fn bn(&mut self, x: Var, r: &BnRef) -> Result<Var> {
        let (gamma, beta) = (self.params.var(r.gamma), self.params.var(r.beta));
        let y = self.g.batch_norm2d(x, gamma, beta, &self.bank[r.stats].1, self.mode)?;
        self.bn_nodes.push((r.stats, y));
        Ok(y)
    }

    pub fn conv_bn(&mut self, x: Var, c: &ConvBn, relu: bool) -> Result<Var> {
        let y = self.g.conv2d(x, self.params.var(c.weight), None, c.stride, c.padding)?;
        let y = self.bn(y, &c.bn)?;
        Ok(if relu { self.g.relu(y) } else { y })
    }
}

#[derive(Clone, Debug)]
pub enum Spatial {
    Conv(ConvBn),
    Mhsa { layer: MhsaLayer, bn: BnRef },
}

/// Residual bottleneck: 1×1 reduce, spatial op, 1×1 expand, plus shortcut.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub spec: BottleneckSpec,
    pub reduce: ConvBn,
    pub spatial: Spatial,
    pub expand: ConvBn,
    pub shortcut: Option<ConvBn>,
}

impl Bottleneck {
    /// `in_size` is the spatial extent of the block input; attention tables are
    /// sized for it because the reduce conv keeps the resolution.
    pub fn new<R: Rng>(
        spec: BottleneckSpec,
        in_size: (usize, usize),
        mhsa: Option<MhsaConfig>,
        prefix: &str,
        b: &mut Builder<'_, R>,
    ) -> Result<Self> {
        spec.validate()?;
        let (cin, mid, out) = (spec.in_channels, spec.mid_channels, spec.out_channels);
        let reduce = b.conv_bn(&format!("{prefix}.reduce"), cin, mid, 1, 1, 0)?;
        let spatial = match spec.spatial_op {
            SpatialOp::Conv3x3 => Spatial::Conv(b.conv_bn(&format!("{prefix}.conv3"), mid, mid, 3, spec.stride, 1)?),
            SpatialOp::Mhsa => {
                let cfg = mhsa.ok_or_else(|| Error::invalid("bot block", "attention block needs an MHSA config"))?;
                if cfg.d_model != mid {
                    return Err(Error::invalid(
                        "bot block",
                        format!("MHSA d_model {} != mid_channels {mid}", cfg.d_model),
                    ));
                }
                if spec.stride == 2 && (in_size.0 % 2 != 0 || in_size.1 % 2 != 0) {
                    return Err(Error::invalid("bot block", format!("cannot 2x2-pool a {in_size:?} map")));
                }
                let layer = MhsaLayer::new(cfg, in_size.0, in_size.1, &format!("{prefix}.mhsa"), b.store, b.rng)?;
                let bn = b.bn(&format!("{prefix}.mhsa.bn"), mid)?;
                Spatial::Mhsa { layer, bn }
            }
        };
        let expand = b.conv_bn(&format!("{prefix}.expand"), mid, out, 1, 1, 0)?;
        let shortcut = if spec.has_projection_shortcut {
            Some(b.conv_bn(&format!("{prefix}.proj"), cin, out, 1, spec.stride, 0)?)
        } else {
            None
        };
        Ok(Bottleneck { spec, reduce, spatial, expand, shortcut })
    }

    pub fn mhsa(&self) -> Option<&MhsaLayer> {
        match &self.spatial {
            Spatial::Mhsa { layer, .. } => Some(layer),
            Spatial::Conv(_) => None,
        }
    }

    /// Weights of the last convolution on the residual branch.
    pub fn terminal_conv(&self) -> ParamId {
        self.expand.weight
    }

    pub fn forward(&self, p: &mut Pass<'_>, x: Var) -> Result<Var> {
        let s = p.g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.spec.in_channels {
            return Err(Error::shape(
                "bottleneck",
                format!("input {s:?} for a block with {} input channels", self.spec.in_channels),
            ));
        }
        let y = p.conv_bn(x, &self.reduce, true)?;
        let y = match &self.spatial {
            Spatial::Conv(c) => p.conv_bn(y, c, true)?,
            Spatial::Mhsa { layer, bn } => {
                let a = layer.forward(p.g, p.params, y)?;
                let a = if self.spec.stride == 2 { p.g.avg_pool2d(a, 2, 2)? } else { a };
                let a = p.bn(a, bn)?;
                p.g.relu(a)
            }
        };
        let residual = p.conv_bn(y, &self.expand, false)?;
        let short = match &self.shortcut {
            Some(c) => p.conv_bn(x, c, false)?,
            None => x,
        };
        if p.g.shape(residual) != p.g.shape(short) {
            return Err(Error::shape(
                "bottleneck",
                format!("residual {:?} vs shortcut {:?}", p.g.shape(residual), p.g.shape(short)),
            ));
        }
        let sum = p.g.add(residual, short)?;
        Ok(p.g.relu(sum))
    }
}
