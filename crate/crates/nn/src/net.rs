//! Gated-convolution encoder-decoder with a non-local bottleneck.
//!
//! The network is a flat layer plan interpreted in order. For depth 4:
//! four encoder levels (gated conv, norm, skip, pool) with dilations
//! 1, 1, 2, 2; a dilated gated conv, norm and non-local block at the
//! bottleneck; four decoder levels (deconv, skip concat, gated conv, norm);
//! then concatenation with the network input and a linear 3^3 output conv.
//! Level `l` has `base_channels * 2^l` channels, the bottleneck twice the
//! deepest encoder width.

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{Init, ParamSpec, ParamStore};
use crate::tensor::Tensor;

pub const INPUT_CHANNELS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub base_channels: usize,
    /// Number of pooling levels.
    pub depth: usize,
    pub leaky_slope: f64,
    pub norm_eps: f64,
    /// One dilation per encoder level.
    pub encoder_dilations: Vec<usize>,
    pub bottleneck_dilation: usize,
    /// Spatial input shape `[nx, ny, nz]`.
    pub input_shape: [usize; 3],
    /// Largest bottleneck position count the non-local block accepts.
    pub attention_cap: usize,
    /// Constant factor applied to the field channel on entry (ppm to network units).
    pub field_scale: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            depth: 4,
            leaky_slope: 0.2,
            norm_eps: 1e-5,
            encoder_dilations: vec![1, 1, 2, 2],
            bottleneck_dilation: 2,
            input_shape: [32, 32, 32],
            attention_cap: 4096,
            field_scale: 1.0,
        }
    }
}

impl NetConfig {
    /// Full-size 160^3 input; only the shape differs from the toy default.
    pub fn full_shape() -> Self {
        Self { input_shape: [160, 160, 160], ..Self::default() }
    }

    pub fn multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.depth == 0 {
            return Err(NnError::Config("base_channels and depth must be positive".into()));
        }
        if self.encoder_dilations.len() != self.depth {
            return Err(NnError::Config(format!(
                "{} encoder dilations for depth {}",
                self.encoder_dilations.len(),
                self.depth
            )));
        }
        if self.encoder_dilations.iter().chain([&self.bottleneck_dilation]).any(|&d| d == 0) {
            return Err(NnError::Config("dilations must be >= 1".into()));
        }
        if !(self.field_scale.is_finite() && self.field_scale > 0.0) {
            return Err(NnError::Config(format!("field_scale must be finite and > 0, got {}", self.field_scale)));
        }
        self.check_spatial(self.input_shape)?;
        let bottleneck: usize = self.input_shape.iter().map(|d| d >> self.depth).product();
        if bottleneck > self.attention_cap {
            return Err(NnError::AttentionTooLarge { positions: bottleneck, cap: self.attention_cap });
        }
        Ok(())
    }

    pub fn check_spatial(&self, dims: [usize; 3]) -> Result<()> {
        let m = self.multiple();
        if dims.iter().any(|&d| d == 0 || d % m != 0) {
            return Err(NnError::Shape(format!("spatial dims {dims:?} must be positive multiples of {m}")));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    GatedConv { name: String, cin: usize, cout: usize, dilation: usize },
    Norm { name: String, channels: usize },
    SaveSkip,
    MaxPool,
    NonLocal { name: String, channels: usize, inner: usize },
    Deconv { name: String, cin: usize, cout: usize },
    ConcatSkip,
    ConcatInput,
    OutputConv { name: String, cin: usize },
}

pub fn layer_plan(cfg: &NetConfig) -> Vec<LayerSpec> {
    use LayerSpec::*;
    let mut plan = Vec::new();
    let mut ch = INPUT_CHANNELS;
    for l in 0..cfg.depth {
        let out = cfg.channels(l);
        plan.push(GatedConv { name: format!("enc{l}.conv"), cin: ch, cout: out, dilation: cfg.encoder_dilations[l] });
        plan.push(Norm { name: format!("enc{l}.norm"), channels: out });
        plan.push(SaveSkip);
        plan.push(MaxPool);
        ch = out;
    }
    let bott = cfg.channels(cfg.depth);
    plan.push(GatedConv { name: "bottleneck.conv".into(), cin: ch, cout: bott, dilation: cfg.bottleneck_dilation });
    plan.push(Norm { name: "bottleneck.norm".into(), channels: bott });
    plan.push(NonLocal { name: "bottleneck.nonlocal".into(), channels: bott, inner: (bott / 2).max(1) });
    ch = bott;
    for l in (0..cfg.depth).rev() {
        let out = cfg.channels(l);
        plan.push(Deconv { name: format!("dec{l}.deconv"), cin: ch, cout: out });
        plan.push(ConcatSkip);
        plan.push(GatedConv { name: format!("dec{l}.conv"), cin: 2 * out, cout: out, dilation: 1 });
        plan.push(Norm { name: format!("dec{l}.norm"), channels: out });
        ch = out;
    }
    plan.push(ConcatInput);
    plan.push(OutputConv { name: "out.conv".into(), cin: ch + INPUT_CHANNELS });
    plan
}

fn param_specs(plan: &[LayerSpec]) -> Vec<ParamSpec> {
    let spec = |name: String, shape: Vec<usize>, init: Init| ParamSpec { name, shape, init };
    let he = |fan_in| Init::FanInUniform { fan_in, gain: 6.0 };
    let lecun = |fan_in| Init::FanInUniform { fan_in, gain: 3.0 };
    let mut out = Vec::new();
    for l in plan {
        match l {
            LayerSpec::GatedConv { name, cin, cout, .. } => {
                out.push(spec(format!("{name}.feat.w"), vec![*cout, *cin, 3, 3, 3], he(cin * 27)));
                out.push(spec(format!("{name}.feat.b"), vec![*cout], Init::Zeros));
                out.push(spec(format!("{name}.gate.w"), vec![*cout, *cin, 3, 3, 3], he(cin * 27)));
                out.push(spec(format!("{name}.gate.b"), vec![*cout], Init::Zeros));
            }
            LayerSpec::Norm { name, channels } => {
                out.push(spec(format!("{name}.gamma"), vec![*channels], Init::Ones));
                out.push(spec(format!("{name}.beta"), vec![*channels], Init::Zeros));
            }
            LayerSpec::NonLocal { name, channels, inner } => {
                for part in ["theta", "phi", "g"] {
                    out.push(spec(format!("{name}.{part}"), vec![*inner, *channels], lecun(*channels)));
                }
                out.push(spec(format!("{name}.wz"), vec![*channels, *inner], Init::Zeros));
            }
            LayerSpec::Deconv { name, cin, cout } => {
                out.push(spec(format!("{name}.w"), vec![*cin, *cout, 3, 3, 3], he(cin * 27)));
                out.push(spec(format!("{name}.b"), vec![*cout], Init::Zeros));
            }
            LayerSpec::OutputConv { name, cin } => {
                out.push(spec(format!("{name}.w"), vec![1, *cin, 3, 3, 3], lecun(cin * 27)));
                out.push(spec(format!("{name}.b"), vec![1], Init::Zeros));
            }
            LayerSpec::SaveSkip | LayerSpec::MaxPool | LayerSpec::ConcatSkip | LayerSpec::ConcatInput => {}
        }
    }
    out
}

/// Layer counts by kind.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Census {
    pub gated_conv_dilation1: usize,
    pub gated_conv_dilation2: usize,
    pub max_pools: usize,
    pub deconvs: usize,
    pub nonlocal_blocks: usize,
    pub normalizations: usize,
    pub concatenations: usize,
    pub linear_convs: usize,
}

pub fn census(plan: &[LayerSpec]) -> Census {
    let mut c = Census::default();
    for l in plan {
        match l {
            LayerSpec::GatedConv { dilation: 1, .. } => c.gated_conv_dilation1 += 1,
            LayerSpec::GatedConv { dilation: 2, .. } => c.gated_conv_dilation2 += 1,
            LayerSpec::GatedConv { .. } | LayerSpec::SaveSkip => {}
            LayerSpec::Norm { .. } => c.normalizations += 1,
            LayerSpec::MaxPool => c.max_pools += 1,
            LayerSpec::NonLocal { .. } => c.nonlocal_blocks += 1,
            LayerSpec::Deconv { .. } => c.deconvs += 1,
            LayerSpec::ConcatSkip | LayerSpec::ConcatInput => c.concatenations += 1,
            LayerSpec::OutputConv { .. } => c.linear_convs += 1,
        }
    }
    c
}

#[derive(Clone, Debug, PartialEq)]
pub struct Net {
    pub config: NetConfig,
    plan: Vec<LayerSpec>,
    specs: Vec<ParamSpec>,
    pub params: ParamStore,
}

impl Net {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let plan = layer_plan(&config);
        let specs = param_specs(&plan);
        let params = ParamStore::init(&specs, seed);
        Ok(Self { config, plan, specs, params })
    }

    /// Reuses saved parameters; names and shapes must match the plan.
    pub fn with_params(config: NetConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let plan = layer_plan(&config);
        let specs = param_specs(&plan);
        if specs.len() != params.len() {
            return Err(NnError::Checkpoint(format!("{} parameters for a plan needing {}", params.len(), specs.len())));
        }
        for (i, s) in specs.iter().enumerate() {
            if params.names()[i] != s.name || params.value(i).shape() != s.shape.as_slice() {
                return Err(NnError::Checkpoint(format!(
                    "parameter {} does not match {} {:?}",
                    params.names()[i],
                    s.name,
                    s.shape
                )));
            }
        }
        Ok(Self { config, plan, specs, params })
    }

    pub fn plan(&self) -> &[LayerSpec] {
        &self.plan
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn census(&self) -> Census {
        census(&self.plan)
    }

    /// Builds the forward pass on `g` for a `(batch, 2, z, y, x)` input node.
    pub fn forward(&self, g: &mut Graph, input: NodeId) -> Result<NodeId> {
        let nodes: Vec<NodeId> = (0..self.params.len()).map(|i| g.param(i, self.params.value(i).clone())).collect();
        self.forward_with(g, input, &nodes)
    }

    /// Forward pass using caller-created nodes for the parameters, indexed
    /// like the store (lets gradient checks perturb them as inputs).
    pub fn forward_with(&self, g: &mut Graph, input: NodeId, nodes: &[NodeId]) -> Result<NodeId> {
        if nodes.len() != self.params.len() {
            return Err(NnError::Config(format!(
                "{} parameter nodes for {} parameters",
                nodes.len(),
                self.params.len()
            )));
        }
        let p = |_: &mut Graph, name: &str| -> Result<NodeId> {
            let i = self.params.index_of(name).ok_or_else(|| NnError::Config(format!("missing parameter {name}")))?;
            Ok(nodes[i])
        };
        let (_, c, [nz, ny, nx]) = g.value(input).dims5()?;
        if c != INPUT_CHANNELS {
            return Err(NnError::Shape(format!("network input has {c} channels, expected {INPUT_CHANNELS}")));
        }
        self.config.check_spatial([nx, ny, nz])?;
        let cfg = &self.config;
        let input = if cfg.field_scale == 1.0 { input } else { g.scale_channels(input, &[cfg.field_scale, 1.0])? };
        let mut x = input;
        let mut skips = Vec::new();
        for layer in &self.plan {
            x = match layer {
                LayerSpec::GatedConv { name, dilation, .. } => {
                    let wf = p(g, &format!("{name}.feat.w"))?;
                    let bf = p(g, &format!("{name}.feat.b"))?;
                    let wg = p(g, &format!("{name}.gate.w"))?;
                    let bg = p(g, &format!("{name}.gate.b"))?;
                    g.gated_conv(x, wf, bf, wg, bg, *dilation, cfg.leaky_slope)?
                }
                LayerSpec::Norm { name, .. } => {
                    let gamma = p(g, &format!("{name}.gamma"))?;
                    let beta = p(g, &format!("{name}.beta"))?;
                    g.norm(x, gamma, beta, cfg.norm_eps)?
                }
                LayerSpec::SaveSkip => {
                    skips.push(x);
                    x
                }
                LayerSpec::MaxPool => g.maxpool(x)?,
                LayerSpec::NonLocal { name, .. } => {
                    let w = [
                        p(g, &format!("{name}.theta"))?,
                        p(g, &format!("{name}.phi"))?,
                        p(g, &format!("{name}.g"))?,
                        p(g, &format!("{name}.wz"))?,
                    ];
                    g.nonlocal(x, w, cfg.attention_cap)?
                }
                LayerSpec::Deconv { name, .. } => {
                    let w = p(g, &format!("{name}.w"))?;
                    let b = p(g, &format!("{name}.b"))?;
                    g.deconv(x, w, b)?
                }
                LayerSpec::ConcatSkip => {
                    let s = skips.pop().ok_or_else(|| NnError::Config("skip stack underflow".into()))?;
                    g.concat(x, s)?
                }
                LayerSpec::ConcatInput => g.concat(x, input)?,
                LayerSpec::OutputConv { name, .. } => {
                    let w = p(g, &format!("{name}.w"))?;
                    let b = p(g, &format!("{name}.b"))?;
                    g.conv(x, w, Some(b), 1)?
                }
            };
        }
        Ok(x)
    }

    /// Forward pass without keeping the graph.
    pub fn predict(&self, input: Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let i = g.input(input);
        let out = self.forward(&mut g, i)?;
        Ok(g.value(out).clone())
    }
}
