//! Analytic cost formulas for attention schemes and the probes that check them.
//!
//! All time figures are FLOPs with one multiply-accumulate counted as 2, so a
//! term `k·BHWC²` in multiply-accumulate units becomes `2k·BHWC²` here.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fifm::{fifm_att, fractal_ir_layer, FifmConfig};
use crate::graph::{FlopCount, Graph, Var};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::Tensor;

/// Gradient magnitudes at or below this count as outside the receptive field.
pub const SUPPORT_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "global")]
    Global,
    #[serde(rename = "window_p")]
    WindowP,
    #[serde(rename = "window_8P")]
    Window8P,
    #[serde(rename = "fractal")]
    Fractal,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Global, Method::WindowP, Method::Window8P, Method::Fractal];

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "global" => Ok(Method::Global),
            "window_p" => Ok(Method::WindowP),
            "window_8P" | "window_8p" => Ok(Method::Window8P),
            "fractal" => Ok(Method::Fractal),
            other => Err(Error::Config(format!("unknown attention method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityDims {
    pub b: u64,
    pub h: u64,
    pub w: u64,
    pub c: u64,
    pub heads: u64,
    pub p: u64,
    pub s: u64,
    pub gamma: u64,
}

impl ComplexityDims {
    pub fn validate(&self) -> Result<()> {
        let all = [self.b, self.h, self.w, self.c, self.heads, self.p, self.s, self.gamma];
        if all.contains(&0) {
            return Err(Error::Config(format!("complexity dims must be positive: {self:?}")));
        }
        Ok(())
    }

    /// `P = s·p`.
    pub fn region(&self) -> u64 {
        self.s * self.p
    }

    fn tokens(&self) -> u64 {
        self.b * self.h * self.w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub method: Method,
    pub dims: ComplexityDims,
    pub time_flops: u64,
    /// Attention and projection part of `time_flops`; excludes the FFN.
    pub attention_flops: u64,
    /// Small term dropped from the simplified formula, not part of `time_flops`.
    pub omitted_flops: u64,
    pub space_values: u64,
    /// Side in pixels of the largest receptive field of two layers.
    pub rf_bound: u64,
    pub rf_measured: Option<u64>,
}

/// Evaluates the closed-form cost of one transformer layer under `method`.
pub fn analytic_complexity(method: Method, dims: ComplexityDims) -> Result<ComplexityReport> {
    dims.validate()?;
    let d = dims;
    let n = d.tokens();
    let c2 = n * d.c * d.c;
    let ffn = 2 * 2 * d.gamma * c2;
    let (p2, s2) = (d.p * d.p, d.s * d.s);
    // Multiply-accumulate counts are doubled into FLOPs.
    let (attention, space, rf, omitted) = match method {
        Method::Global => (
            2 * (4 * c2 + 2 * d.b * (d.h * d.w) * (d.h * d.w) * d.c),
            4 * n * d.c + d.b * (d.h * d.w) * (d.h * d.w) * d.heads,
            d.h.max(d.w),
            0,
        ),
        Method::WindowP => (
            2 * (4 * c2 + 2 * n * p2 * d.c),
            4 * n * d.c + n * d.heads * p2,
            2 * d.p,
            0,
        ),
        Method::Window8P => (
            2 * (4 * c2 + 128 * n * p2 * s2 * d.c),
            4 * n * d.c + 64 * n * d.heads * p2 * s2,
            16 * d.region(),
            0,
        ),
        Method::Fractal => (
            2 * 5 * c2 + 3 * n * (p2 + s2) * d.c,
            3 * n * d.c + n * d.heads * p2.max(s2),
            16 * d.region(),
            2 * 9 * d.gamma * n * d.c,
        ),
    };
    Ok(ComplexityReport {
        method,
        dims,
        time_flops: attention + ffn,
        attention_flops: attention,
        omitted_flops: omitted,
        space_values: space,
        rf_bound: rf,
        rf_measured: None,
    })
}

/// Ratio of the window attention term (token mixing only) for window sides `a` and `b`.
pub fn window_attention_ratio(dims: ComplexityDims, a: u64, b: u64) -> f64 {
    let term = |p: u64| (2 * 2 * dims.tokens() * p * p * dims.c) as f64;
    term(b) / term(a)
}

fn random_params(cfg: &FifmConfig, prefix: &str, seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in cfg.param_specs(prefix) {
        store.insert(spec.name.clone(), Tensor::randn(&spec.shape, 0.5, &mut rng));
    }
    store
}

/// Counts the FLOPs recorded while running one `fifm_att` on a `[b, h, w, C]` input.
pub fn fifm_att_flops(cfg: &FifmConfig, b: usize, h: usize, w: usize) -> Result<FlopCount> {
    measure(cfg, b, h, w, false)
}

/// Same as [`fifm_att_flops`] for a full layer.
pub fn layer_flops(cfg: &FifmConfig, b: usize, h: usize, w: usize) -> Result<FlopCount> {
    measure(cfg, b, h, w, true)
}

fn measure(cfg: &FifmConfig, b: usize, h: usize, w: usize, full: bool) -> Result<FlopCount> {
    cfg.validate()?;
    let store = random_params(cfg, "l", 0);
    let mut g = Graph::<f64>::new();
    let p = store.bind(&mut g, false);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = g.constant(Tensor::randn(&[b, h, w, cfg.channels], 1.0, &mut rng));
    let before = g.flops();
    if full {
        fractal_ir_layer(&mut g, x, cfg, &p, "l")?;
    } else {
        fifm_att(&mut g, x, cfg, &p, "l")?;
    }
    Ok(g.flops() - before)
}

/// Input pixels whose value influences one output pixel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RfProbe {
    pub height: usize,
    pub width: usize,
    /// Row-major `height × width` membership.
    pub support: Vec<bool>,
    /// Inclusive `(y0, x0, y1, x1)`, `None` for empty support.
    pub bbox: Option<(usize, usize, usize, usize)>,
}

impl RfProbe {
    pub fn count(&self) -> usize {
        self.support.iter().filter(|&&v| v).count()
    }

    /// Longer side of the bounding box, 0 when empty.
    pub fn bbox_side(&self) -> usize {
        self.bbox
            .map(|(y0, x0, y1, x1)| (y1 - y0 + 1).max(x1 - x0 + 1))
            .unwrap_or(0)
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        self.support[y * self.width + x]
    }

    /// True when the support is exactly the square `[y0, y0+side) × [x0, x0+side)`.
    pub fn is_square(&self, y0: usize, x0: usize, side: usize) -> bool {
        (0..self.height).all(|y| {
            (0..self.width).all(|x| {
                let inside = y >= y0 && y < y0 + side && x >= x0 && x < x0 + side;
                self.contains(y, x) == inside
            })
        })
    }
}

/// Differentiates a randomly weighted sum of the channels of output pixel
/// `(oy, ox)` of `f` with respect to `input: [1, H, W, C]`.
pub fn receptive_field_probe<F>(input: &Tensor<f64>, oy: usize, ox: usize, seed: u64, f: F) -> Result<RfProbe>
where
    F: FnOnce(&mut Graph<f64>, Var) -> Result<Var>,
{
    let shape = input.shape().to_vec();
    if shape.len() != 4 || shape[0] != 1 {
        return Err(Error::Shape {
            op: "receptive_field_probe",
            detail: format!("input must be [1, H, W, C], got {shape:?}"),
        });
    }
    let (h, w) = (shape[1], shape[2]);
    let mut g = Graph::new();
    let x = g.leaf(input.clone(), true);
    let y = f(&mut g, x)?;
    let ys = g.shape(y).to_vec();
    if ys.len() != 4 || oy >= ys[1] || ox >= ys[2] {
        return Err(Error::Shape {
            op: "receptive_field_probe",
            detail: format!("pixel ({oy}, {ox}) outside output {ys:?}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = Tensor::<f64>::zeros(&ys);
    let c_out = ys[3];
    let base = (oy * ys[2] + ox) * c_out;
    let weights = Tensor::<f64>::rand_uniform(&[c_out], 0.5, 1.5, &mut rng);
    mask.data_mut()[base..base + c_out].copy_from_slice(weights.data());
    let m = g.constant(mask);
    let prod = g.mul(y, m)?;
    let loss = g.sum(prod);
    let grads = g.backward(loss)?;
    let grad = grads
        .get(x)
        .ok_or_else(|| Error::Usage("probe input received no gradient".into()))?;
    let c = shape[3];
    let support: Vec<bool> = grad
        .data()
        .chunks(c)
        .map(|px| px.iter().any(|v| v.abs() > SUPPORT_THRESHOLD))
        .collect();
    let mut bbox: Option<(usize, usize, usize, usize)> = None;
    for (i, _) in support.iter().enumerate().filter(|(_, &s)| s) {
        let (y, x) = (i / w, i % w);
        bbox = Some(match bbox {
            None => (y, x, y, x),
            Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
        });
    }
    Ok(RfProbe {
        height: h,
        width: w,
        support,
        bbox,
    })
}

/// What each stacked layer runs during a probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeDepth {
    /// `fifm_att` only, no residual or FFN.
    Attention,
    /// Complete pre-norm layers.
    Layer,
}

/// Probes a stack of layers with random non-zero weights (one seed per layer).
pub fn probe_stack(
    cfgs: &[FifmConfig],
    depth: ProbeDepth,
    h: usize,
    w: usize,
    oy: usize,
    ox: usize,
    seed: u64,
) -> Result<RfProbe> {
    let c = cfgs
        .first()
        .ok_or_else(|| Error::Config("probe needs at least one layer".into()))?
        .channels;
    let stores: Vec<ParamStore<f64>> = cfgs
        .iter()
        .enumerate()
        .map(|(i, cfg)| random_params(cfg, &format!("l{i}"), seed.wrapping_add(i as u64 + 1)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = Tensor::randn(&[1, h, w, c], 1.0, &mut rng);
    receptive_field_probe(&input, oy, ox, seed, |g, x| {
        let mut cur = x;
        for (i, (cfg, store)) in cfgs.iter().zip(&stores).enumerate() {
            let p: BoundParams = store.bind(g, false);
            let name = format!("l{i}");
            cur = match depth {
                ProbeDepth::Attention => fifm_att(g, cur, cfg, &p, &name)?,
                ProbeDepth::Layer => fractal_ir_layer(g, cur, cfg, &p, &name)?,
            };
        }
        Ok(cur)
    })
}
