//! The fractal transformer layer.
//!
//! ```text
//! X'_l = X_{l-1} + FIFM_att(LN(X_{l-1}))
//! X_l  = X'_l    + FIFM_conv(LN(X'_l))
//! ```
//!
//! `FIFM_att` runs window attention (level one) and, on the regrouped tokens,
//! region attention (level two). `FIFM_conv` is the convolutional FFN that
//! provides level three.

use serde::{Deserialize, Serialize};

use crate::attention::{mhsa, AttentionConfig, AttentionKind};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{conv_specs, linear_specs, norm_specs, BoundParams, ParamSpec};
use crate::partition::{
    fractal_regroup_reverse_var, fractal_regroup_var, window_partition_var, window_reverse_var,
    FractalGeometry, WindowSpec,
};
use crate::tensor::{Padding, Scalar};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Spatial block inside the FFN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvKind {
    /// Dense 3×3 convolution.
    Conv1,
    /// Pointwise linear map.
    Linear,
    /// 1×1 reduce to a quarter width, 3×3, 1×1 restore.
    Conv3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerVariant {
    /// Level-one and level-two attention alternate between consecutive layers.
    V1,
    /// Both levels in every layer, no projection between them, halved Q/K width.
    V3,
}

impl LayerVariant {
    pub fn mode_for(self, layer_index: usize) -> AttnMode {
        match self {
            LayerVariant::V3 => AttnMode::Fractal,
            LayerVariant::V1 if layer_index.is_multiple_of(2) => AttnMode::L1Only,
            LayerVariant::V1 => AttnMode::L2Only,
        }
    }
}

/// Which attention levels a layer runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnMode {
    Fractal,
    L1Only,
    L2Only,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    /// Pass-through; used to make the FFN linear in tests.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FifmConfig {
    pub channels: usize,
    pub heads: usize,
    pub window: WindowSpec,
    pub ffn_ratio: usize,
    pub attn_kind: AttentionKind,
    pub conv_kind: ConvKind,
    pub variant: LayerVariant,
    pub mode: AttnMode,
    pub activation: Activation,
    /// Multiplier on both residual branches.
    pub residual_scale: f64,
}

impl FifmConfig {
    /// Dot attention, conv3 FFN with ratio 2, GELU, variant v3.
    pub fn new(channels: usize, heads: usize, window: WindowSpec) -> Self {
        Self {
            channels,
            heads,
            window,
            ffn_ratio: 2,
            attn_kind: AttentionKind::Dot,
            conv_kind: ConvKind::Conv3,
            variant: LayerVariant::V3,
            mode: AttnMode::Fractal,
            activation: Activation::Gelu,
            residual_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ffn_ratio < 1 {
            return Err(Error::Config("ffn_ratio must be >= 1".into()));
        }
        if self.window.p == 0 || self.window.s == 0 {
            return Err(Error::Config(format!("invalid window {:?}", self.window)));
        }
        if self.variant == LayerVariant::V3 && !self.channels.is_multiple_of(2) {
            return Err(Error::Config("variant v3 needs an even channel count".into()));
        }
        if self.conv_kind == ConvKind::Conv3 && !self.ffn_width().is_multiple_of(4) {
            return Err(Error::Config(format!(
                "conv3 needs an FFN width divisible by 4, got {}",
                self.ffn_width()
            )));
        }
        for (_, a) in self.attention_blocks() {
            AttentionConfig::new(a.heads, a.model_dim, a.qk_dim, a.kind, a.output_proj)?;
        }
        Ok(())
    }

    pub fn qk_dim(&self) -> usize {
        match self.variant {
            LayerVariant::V1 => self.channels,
            LayerVariant::V3 => self.channels / 2,
        }
    }

    pub fn ffn_width(&self) -> usize {
        self.channels * self.ffn_ratio
    }

    pub fn geometry(&self, h: usize, w: usize) -> Result<FractalGeometry> {
        FractalGeometry::from_spec(h, w, self.window)
    }

    /// Attention blocks in execution order with their parameter prefixes.
    pub fn attention_blocks(&self) -> Vec<(&'static str, AttentionConfig)> {
        let cfg = |output_proj| AttentionConfig {
            heads: self.heads,
            model_dim: self.channels,
            qk_dim: self.qk_dim(),
            kind: self.attn_kind,
            output_proj,
        };
        match self.mode {
            AttnMode::Fractal => vec![("attn_l1", cfg(false)), ("attn_l2", cfg(true))],
            AttnMode::L1Only => vec![("attn_l1", cfg(true))],
            AttnMode::L2Only => vec![("attn_l2", cfg(true))],
        }
    }

    /// Parameters of the FFN spatial block for `kind` under `{prefix}.ffn.spatial`.
    pub fn spatial_specs(&self, prefix: &str, kind: ConvKind) -> Vec<ParamSpec> {
        let w = self.ffn_width();
        let sp = format!("{prefix}.ffn.spatial");
        match kind {
            ConvKind::Conv1 => conv_specs(&format!("{sp}.conv"), 3, w, w, true).to_vec(),
            ConvKind::Linear => linear_specs(&format!("{sp}.linear"), w, w, true).to_vec(),
            ConvKind::Conv3 => {
                let r = w / 4;
                let mut v = conv_specs(&format!("{sp}.reduce"), 1, w, r, true).to_vec();
                v.extend(conv_specs(&format!("{sp}.conv"), 3, r, r, true));
                v.extend(conv_specs(&format!("{sp}.restore"), 1, r, w, true));
                v
            }
        }
    }

    /// Every parameter of one layer under `prefix`.
    pub fn param_specs(&self, prefix: &str) -> Vec<ParamSpec> {
        let c = self.channels;
        let mut specs = Vec::new();
        specs.extend(norm_specs(&format!("{prefix}.ln1"), c));
        specs.extend(norm_specs(&format!("{prefix}.ln2"), c));
        for (name, a) in self.attention_blocks() {
            specs.extend(a.param_specs(&format!("{prefix}.{name}")));
        }
        specs.extend(linear_specs(&format!("{prefix}.ffn.expand"), c, self.ffn_width(), true));
        specs.extend(self.spatial_specs(prefix, self.conv_kind));
        specs.extend(linear_specs(&format!("{prefix}.ffn.project"), self.ffn_width(), c, true));
        specs
    }

    /// Pixels the FFN can reach beyond a pixel's own position.
    pub fn ffn_halo(&self) -> usize {
        match self.conv_kind {
            ConvKind::Linear => 0,
            ConvKind::Conv1 | ConvKind::Conv3 => 1,
        }
    }
}

fn activate<T: Scalar>(g: &mut Graph<T>, x: Var, act: Activation) -> Var {
    match act {
        Activation::Gelu => g.gelu(x),
        Activation::Identity => x,
    }
}

/// Level-one and/or level-two attention on a `[B, H, W, C]` feature map.
pub fn fifm_att<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    cfg: &FifmConfig,
    params: &BoundParams,
    prefix: &str,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || shape[3] != cfg.channels {
        return Err(Error::Config(format!(
            "fifm_att expects [B, H, W, {}], got {shape:?}",
            cfg.channels
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let geo = cfg.geometry(h, w)?;
    let blocks = cfg.attention_blocks();
    let name = |i: usize| format!("{prefix}.{}", blocks[i].0);

    let windows = window_partition_var(g, x, geo.p)?;
    let y1 = match cfg.mode {
        AttnMode::Fractal => {
            let y1 = mhsa(g, windows, &blocks[0].1, params, &name(0))?;
            let groups = fractal_regroup_var(g, y1, &geo)?;
            let y2 = mhsa(g, groups, &blocks[1].1, params, &name(1))?;
            fractal_regroup_reverse_var(g, y2, &geo)?
        }
        AttnMode::L1Only => mhsa(g, windows, &blocks[0].1, params, &name(0))?,
        AttnMode::L2Only => {
            let groups = fractal_regroup_var(g, windows, &geo)?;
            let y2 = mhsa(g, groups, &blocks[0].1, params, &name(0))?;
            fractal_regroup_reverse_var(g, y2, &geo)?
        }
    };
    window_reverse_var(g, y1, geo.p, h, w)
}

fn spatial_block<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    cfg: &FifmConfig,
    params: &BoundParams,
    prefix: &str,
) -> Result<Var> {
    let p = |n: &str| params.get(&format!("{prefix}.ffn.spatial.{n}"));
    match cfg.conv_kind {
        ConvKind::Conv1 => g.conv2d(x, p("conv.weight")?, Some(p("conv.bias")?), 1, Padding::Same),
        ConvKind::Linear => g.linear(x, p("linear.weight")?, Some(p("linear.bias")?)),
        ConvKind::Conv3 => {
            let r = g.conv2d(x, p("reduce.weight")?, Some(p("reduce.bias")?), 1, Padding::Same)?;
            let c = g.conv2d(r, p("conv.weight")?, Some(p("conv.bias")?), 1, Padding::Same)?;
            g.conv2d(c, p("restore.weight")?, Some(p("restore.bias")?), 1, Padding::Same)
        }
    }
}

/// Convolutional FFN: expand, activate, spatial block, activate, project.
pub fn fifm_conv<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    cfg: &FifmConfig,
    params: &BoundParams,
    prefix: &str,
) -> Result<Var> {
    let p = |n: &str| params.get(&format!("{prefix}.ffn.{n}"));
    let e = g.linear(x, p("expand.weight")?, Some(p("expand.bias")?))?;
    let e = activate(g, e, cfg.activation);
    let s = spatial_block(g, e, cfg, params, prefix)?;
    let s = activate(g, s, cfg.activation);
    g.linear(s, p("project.weight")?, Some(p("project.bias")?))
}

fn residual<T: Scalar>(g: &mut Graph<T>, x: Var, branch: Var, scale: f64) -> Result<Var> {
    let branch = if scale == 1.0 { branch } else { g.scale(branch, scale) };
    g.add(x, branch)
}

/// One pre-norm fractal transformer layer.
pub fn fractal_ir_layer<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    cfg: &FifmConfig,
    params: &BoundParams,
    prefix: &str,
) -> Result<Var> {
    let p = |n: &str| params.get(&format!("{prefix}.{n}"));
    let n1 = g.layer_norm(x, p("ln1.gain")?, p("ln1.bias")?, LAYER_NORM_EPS)?;
    let a = fifm_att(g, n1, cfg, params, prefix)?;
    let x1 = residual(g, x, a, cfg.residual_scale)?;
    let n2 = g.layer_norm(x1, p("ln2.gain")?, p("ln2.bias")?, LAYER_NORM_EPS)?;
    let f = fifm_conv(g, n2, cfg, params, prefix)?;
    residual(g, x1, f, cfg.residual_scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_for(cfg: &FifmConfig, seed: u64, std: f64) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        for spec in cfg.param_specs("l") {
            s.insert(spec.name.clone(), Tensor::randn(&spec.shape, std, &mut rng));
        }
        s
    }

    fn zeroed(mut s: ParamStore<f64>) -> ParamStore<f64> {
        for (_, t) in s.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        s
    }

    #[test]
    fn param_specs_are_unique() {
        for kind in [ConvKind::Conv1, ConvKind::Linear, ConvKind::Conv3] {
            for mode in [AttnMode::Fractal, AttnMode::L1Only, AttnMode::L2Only] {
                let cfg = FifmConfig {
                    conv_kind: kind,
                    mode,
                    ..FifmConfig::new(8, 2, WindowSpec { p: 2, s: 2 })
                };
                cfg.validate().unwrap();
                let specs = cfg.param_specs("x");
                let mut names: Vec<_> = specs.iter().map(|s| &s.name).collect();
                names.sort();
                names.dedup();
                assert_eq!(names.len(), specs.len());
            }
        }
    }

    #[test]
    fn v1_parity() {
        assert_eq!(LayerVariant::V1.mode_for(0), AttnMode::L1Only);
        assert_eq!(LayerVariant::V1.mode_for(3), AttnMode::L2Only);
        assert_eq!(LayerVariant::V3.mode_for(1), AttnMode::Fractal);
    }

    #[test]
    fn zero_value_and_output_weights_give_zero_attention() {
        let cfg = FifmConfig::new(4, 2, WindowSpec { p: 2, s: 2 });
        let mut s = store_for(&cfg, 1, 0.5);
        for name in ["l.attn_l2.v.weight", "l.attn_l2.v.bias", "l.attn_l2.out.weight", "l.attn_l2.out.bias"] {
            s.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let b = s.bind(&mut g, false);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = g.constant(Tensor::randn(&[1, 4, 4, 4], 1.0, &mut rng));
        let y = fifm_att(&mut g, x, &cfg, &b, "l").unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_ffn_is_zero() {
        let cfg = FifmConfig::new(4, 2, WindowSpec { p: 2, s: 2 });
        let s = zeroed(store_for(&cfg, 1, 0.5));
        let mut g = Graph::new();
        let b = s.bind(&mut g, false);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = g.constant(Tensor::randn(&[2, 4, 4, 4], 1.0, &mut rng));
        let y = fifm_conv(&mut g, x, &cfg, &b, "l").unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_ffn_with_bypass_activation() {
        let cfg = FifmConfig {
            ffn_ratio: 1,
            conv_kind: ConvKind::Linear,
            activation: Activation::Identity,
            ..FifmConfig::new(4, 2, WindowSpec { p: 2, s: 2 })
        };
        let mut s = zeroed(store_for(&cfg, 1, 0.5));
        for name in ["l.ffn.expand.weight", "l.ffn.spatial.linear.weight", "l.ffn.project.weight"] {
            let t = s.get_mut(name).unwrap();
            for i in 0..4 {
                t.data_mut()[i * 4 + i] = 1.0;
            }
        }
        let mut g = Graph::new();
        let b = s.bind(&mut g, false);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = g.constant(Tensor::randn(&[1, 4, 4, 4], 1.0, &mut rng));
        let y = fifm_conv(&mut g, x, &cfg, &b, "l").unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn zero_layer_is_identity_and_shape_preserving() {
        for kind in [ConvKind::Conv1, ConvKind::Linear, ConvKind::Conv3] {
            let cfg = FifmConfig {
                conv_kind: kind,
                ..FifmConfig::new(8, 2, WindowSpec { p: 2, s: 2 })
            };
            let s = zeroed(store_for(&cfg, 4, 0.5));
            let mut g = Graph::new();
            let b = s.bind(&mut g, false);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let x = g.constant(Tensor::randn(&[2, 8, 4, 8], 1.0, &mut rng));
            let y = fractal_ir_layer(&mut g, x, &cfg, &b, "l").unwrap();
            assert_eq!(g.value(y), g.value(x));
        }
    }

    #[test]
    fn layer_rejects_bad_geometry() {
        let cfg = FifmConfig::new(4, 2, WindowSpec { p: 2, s: 2 });
        let s = store_for(&cfg, 1, 0.5);
        let mut g = Graph::new();
        let b = s.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[1, 6, 6, 4]));
        assert!(matches!(
            fractal_ir_layer(&mut g, x, &cfg, &b, "l"),
            Err(Error::Geometry(_))
        ));
    }
}
