//! Columnar and U-shaped restoration networks built from fractal layers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionKind;
use crate::error::{Error, Result};
use crate::fifm::{fractal_ir_layer, Activation, ConvKind, FifmConfig, LayerVariant};
use crate::graph::{Graph, Var};
use crate::init::{init_params, init_tensor, InitScheme};
use crate::params::{conv_specs, BoundParams, ParamSpec, ParamStore};
use crate::partition::WindowSpec;
use crate::tensor::{Padding, Scalar, Tensor};

/// Number of down-sampling stages of the U-shaped network.
pub const USHAPE_LEVELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Columnar,
    Ushape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskHead {
    /// 1×1 conv back to image channels plus a global input residual.
    Denoise,
    /// 3×3 conv to `4·ch` channels, pixel shuffle ×2, plus nearest-upsampled input.
    Sr2x,
}

impl TaskHead {
    pub fn scale(self) -> usize {
        match self {
            TaskHead::Denoise => 1,
            TaskHead::Sr2x => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Columnar: number of stages. U-shape: number of down-sampling stages (3).
    pub stages: usize,
    pub layers_per_stage: usize,
    pub channels: usize,
    pub image_channels: usize,
    pub heads: usize,
    /// Columnar: one entry per stage. U-shape: one per level, latent last.
    pub windows: Vec<WindowSpec>,
    pub ffn_ratio: usize,
    pub attn_kind: AttentionKind,
    pub conv_kind: ConvKind,
    pub variant: LayerVariant,
    pub head: TaskHead,
    pub init_scheme: InitScheme,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::columnar()
    }
}

impl ModelConfig {
    /// 2 stages × 2 layers at 16 channels, 2×2 windows grouped 2×2.
    pub fn columnar() -> Self {
        Self {
            arch: Arch::Columnar,
            stages: 2,
            layers_per_stage: 2,
            channels: 16,
            image_channels: 1,
            heads: 2,
            windows: vec![WindowSpec { p: 2, s: 2 }; 2],
            ffn_ratio: 2,
            attn_kind: AttentionKind::Dot,
            conv_kind: ConvKind::Conv3,
            variant: LayerVariant::V3,
            head: TaskHead::Sr2x,
            init_scheme: InitScheme::KaimingFanIn,
        }
    }

    /// Three down stages, a latent stage and three up stages, one layer each, 16 channels.
    pub fn ushape() -> Self {
        Self {
            arch: Arch::Ushape,
            stages: USHAPE_LEVELS,
            layers_per_stage: 1,
            windows: vec![
                WindowSpec { p: 2, s: 2 },
                WindowSpec { p: 2, s: 2 },
                WindowSpec { p: 2, s: 2 },
                WindowSpec { p: 1, s: 2 },
            ],
            head: TaskHead::Denoise,
            ..Self::columnar()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.image_channels == 0 || self.layers_per_stage == 0 {
            return Err(Error::Config("channels and layer counts must be positive".into()));
        }
        match self.arch {
            Arch::Columnar => {
                if self.stages == 0 || self.windows.len() != self.stages {
                    return Err(Error::Config(format!(
                        "columnar model needs one window per stage ({} stages, {} windows)",
                        self.stages,
                        self.windows.len()
                    )));
                }
            }
            Arch::Ushape => {
                if self.stages != USHAPE_LEVELS || self.windows.len() != USHAPE_LEVELS + 1 {
                    return Err(Error::Config(format!(
                        "u-shape model needs {USHAPE_LEVELS} stages and {} windows",
                        USHAPE_LEVELS + 1
                    )));
                }
            }
        }
        for (_, cfg) in self.stage_layers() {
            cfg.validate()?;
        }
        Ok(())
    }

    fn layer_config(&self, channels: usize, window: WindowSpec, index: usize) -> FifmConfig {
        FifmConfig {
            channels,
            heads: self.heads,
            window,
            ffn_ratio: self.ffn_ratio,
            attn_kind: self.attn_kind,
            conv_kind: self.conv_kind,
            variant: self.variant,
            mode: self.variant.mode_for(index),
            activation: Activation::Gelu,
            residual_scale: self.init_scheme.residual_scale(),
        }
    }

    /// Channels at U-shape level `i`.
    pub fn level_channels(&self, level: usize) -> usize {
        self.channels << level
    }

    /// Every transformer layer as `(parameter prefix, config)`.
    pub fn stage_layers(&self) -> Vec<(String, FifmConfig)> {
        let mut out = Vec::new();
        let mut stage = |name: String, c: usize, w: WindowSpec| {
            for j in 0..self.layers_per_stage {
                out.push((format!("{name}.layers.{j}"), self.layer_config(c, w, j)));
            }
        };
        match self.arch {
            Arch::Columnar => {
                for (i, &w) in self.windows.iter().enumerate() {
                    stage(format!("stages.{i}"), self.channels, w);
                }
            }
            Arch::Ushape => {
                for i in 0..USHAPE_LEVELS {
                    stage(format!("encoder.{i}"), self.level_channels(i), self.windows[i]);
                }
                stage(
                    "latent".into(),
                    self.level_channels(USHAPE_LEVELS),
                    self.windows[USHAPE_LEVELS],
                );
                for i in 0..USHAPE_LEVELS {
                    stage(format!("decoder.{i}"), self.level_channels(i), self.windows[i]);
                }
            }
        }
        out
    }

    /// Declared parameter layout, in construction order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let c = self.channels;
        let ch = self.image_channels;
        let mut specs = Vec::new();
        specs.extend(conv_specs("shallow", 3, ch, c, false));
        for (prefix, cfg) in self.stage_layers() {
            specs.extend(cfg.param_specs(&prefix));
        }
        if self.arch == Arch::Ushape {
            for i in 0..USHAPE_LEVELS {
                let (ci, cn) = (self.level_channels(i), self.level_channels(i + 1));
                specs.extend(conv_specs(&format!("down.{i}"), 3, ci, cn, false));
                specs.extend(conv_specs(&format!("up.{i}"), 3, cn, 2 * cn, false));
                specs.extend(conv_specs(&format!("fuse.{i}"), 1, 2 * ci, ci, false));
            }
        }
        match self.head {
            TaskHead::Denoise => specs.extend(conv_specs("head", 1, c, ch, false)),
            TaskHead::Sr2x => specs.extend(conv_specs("head", 3, c, 4 * ch, false)),
        }
        specs
    }

    pub fn parameter_count(&self) -> usize {
        self.param_specs().iter().map(ParamSpec::numel).sum()
    }

    /// Input height and width must be multiples of this.
    pub fn input_multiple(&self) -> usize {
        match self.arch {
            Arch::Columnar => self.windows.iter().map(WindowSpec::region).fold(1, lcm),
            Arch::Ushape => self
                .windows
                .iter()
                .enumerate()
                .map(|(i, w)| w.region() << i)
                .fold(1, lcm),
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Initialises every parameter of `cfg` from `seed`.
pub fn build<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(init_params(&cfg.param_specs(), cfg.init_scheme, &mut rng))
}

/// Swaps the FFN spatial block of every layer for `new_kind`, re-initialising
/// only those tensors.
pub fn substitute_conv_kind<T: Scalar>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    new_kind: ConvKind,
    seed: u64,
) -> Result<(ModelConfig, ParamStore<T>)> {
    if new_kind == cfg.conv_kind {
        return Ok((cfg.clone(), params.clone()));
    }
    let new_cfg = ModelConfig {
        conv_kind: new_kind,
        ..cfg.clone()
    };
    new_cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ParamStore::new();
    for spec in new_cfg.param_specs() {
        let t = if spec.name.contains(".ffn.spatial.") {
            init_tensor(&spec, new_cfg.init_scheme, &mut rng)
        } else {
            params.get(&spec.name)?.clone()
        };
        out.insert(spec.name, t);
    }
    Ok((new_cfg, out))
}

/// Switches for wiring experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    /// U-shape skip connections, shallowest level first.
    pub skips: [bool; USHAPE_LEVELS],
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            skips: [true; USHAPE_LEVELS],
        }
    }
}

fn conv<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &BoundParams,
    name: &str,
    stride: usize,
) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    g.conv2d(x, w, Some(b), stride, Padding::Same)
}

fn run_stage<T: Scalar>(
    g: &mut Graph<T>,
    mut x: Var,
    layers: &[(String, FifmConfig)],
    stage: &str,
    p: &BoundParams,
) -> Result<Var> {
    let prefix = format!("{stage}.layers.");
    for (name, cfg) in layers.iter().filter(|(n, _)| n.starts_with(&prefix)) {
        x = fractal_ir_layer(g, x, cfg, p, name)?;
    }
    Ok(x)
}

/// Restores `x: [B, H, W, image_channels]`.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &BoundParams,
    x: Var,
) -> Result<Var> {
    forward_with(g, cfg, p, x, ForwardOptions::default())
}

pub fn forward_with<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &BoundParams,
    x: Var,
    opts: ForwardOptions,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let m = cfg.input_multiple();
    if shape.len() != 4 || shape[3] != cfg.image_channels || !shape[1].is_multiple_of(m) || !shape[2].is_multiple_of(m) {
        return Err(Error::Shape {
            op: "model forward",
            detail: format!(
                "input {shape:?} must be [B, H, W, {}] with H, W multiples of {m}",
                cfg.image_channels
            ),
        });
    }
    let layers = cfg.stage_layers();
    let mut f = conv(g, x, p, "shallow", 1)?;
    match cfg.arch {
        Arch::Columnar => {
            for i in 0..cfg.stages {
                f = run_stage(g, f, &layers, &format!("stages.{i}"), p)?;
            }
        }
        Arch::Ushape => {
            let mut skips = Vec::with_capacity(USHAPE_LEVELS);
            for i in 0..USHAPE_LEVELS {
                f = run_stage(g, f, &layers, &format!("encoder.{i}"), p)?;
                skips.push(f);
                f = conv(g, f, p, &format!("down.{i}"), 2)?;
            }
            f = run_stage(g, f, &layers, "latent", p)?;
            for i in (0..USHAPE_LEVELS).rev() {
                let u = conv(g, f, p, &format!("up.{i}"), 1)?;
                let u = g.pixel_shuffle(u, 2)?;
                let skip = if opts.skips[i] {
                    skips[i]
                } else {
                    g.constant(Tensor::zeros(g.shape(skips[i])))
                };
                let cat = g.concat_last(&[u, skip])?;
                f = conv(g, cat, p, &format!("fuse.{i}"), 1)?;
                f = run_stage(g, f, &layers, &format!("decoder.{i}"), p)?;
            }
        }
    }
    match cfg.head {
        TaskHead::Denoise => {
            let r = conv(g, f, p, "head", 1)?;
            g.add(x, r)
        }
        TaskHead::Sr2x => {
            let r = conv(g, f, p, "head", 1)?;
            let r = g.pixel_shuffle(r, 2)?;
            let base = g.upsample_nearest(x, 2)?;
            g.add(base, r)
        }
    }
}

/// Runs the model without recording gradients.
pub fn predict<T: Scalar>(cfg: &ModelConfig, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let y = forward(&mut g, cfg, &p, xv)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::columnar().validate().unwrap();
        ModelConfig::ushape().validate().unwrap();
        assert_eq!(ModelConfig::columnar().input_multiple(), 4);
        assert_eq!(ModelConfig::ushape().input_multiple(), 16);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = ModelConfig::ushape();
        c.stages = 2;
        assert!(matches!(build::<f32>(&c, 0), Err(Error::Config(_))));
        let mut c = ModelConfig::columnar();
        c.windows.pop();
        assert!(build::<f32>(&c, 0).is_err());
        let mut c = ModelConfig::columnar();
        c.heads = 3;
        assert!(build::<f32>(&c, 0).is_err());
    }

    #[test]
    fn build_is_deterministic_with_stable_keys() {
        let c = ModelConfig::ushape();
        let a = build::<f32>(&c, 7).unwrap();
        let b = build::<f32>(&c, 7).unwrap();
        assert_eq!(a, b);
        let other = build::<f32>(&c, 8).unwrap();
        assert_eq!(a.names().collect::<Vec<_>>(), other.names().collect::<Vec<_>>());
        assert_ne!(a, other);
        a.check_against(&c.param_specs()).unwrap();
    }

    #[test]
    fn input_shape_is_checked() {
        let c = ModelConfig::columnar();
        let p = build::<f32>(&c, 0).unwrap();
        let x = Tensor::zeros(&[1, 6, 8, 1]);
        assert!(predict(&c, &p, &x).is_err());
    }
}
