//! Central finite-difference verification of [`Graph::backward`].

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{numel, Padding, Tensor};
use crate::attention::{mhsa, AttentionConfig, AttentionKind};
use crate::fifm::{fractal_ir_layer, ConvKind, FifmConfig, LayerVariant};
use crate::params::{BoundParams, Role};
use crate::partition::{
    fractal_regroup_reverse_var, fractal_regroup_var, window_partition_var, window_reverse_var,
    FractalGeometry, WindowSpec,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Largest relative disagreement between autodiff and central differences,
/// `|analytic − fd| / max(1, |analytic|)` over every coordinate of every input.
///
/// `f` builds a scalar from the supplied leaves on a fresh graph; it is called
/// once with gradients enabled and twice per coordinate without.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (slot, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[slot].len()]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = inputs[slot].data()[i];
            probe[slot].data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe[slot].data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe[slot].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let err = (a - fd).abs() / a.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Single-input form of [`finite_diff_check_many`].
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    finite_diff_check_many(|g, v| f(g, v[0]), std::slice::from_ref(x), h)
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::Usage(format!(
            "finite difference check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Contracts a tensor-valued output against fixed weights so it can be checked as a scalar.
pub fn weighted_sum(g: &mut Graph<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Finite-difference step used by [`suite`].
pub const STEP: f64 = 1e-6;
pub const OP_TOLERANCE: f64 = 1e-5;
pub const LAYER_TOLERANCE: f64 = 1e-4;

/// Result of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: String,
    inputs: Vec<Tensor<f64>>,
    tolerance: f64,
    f: Build,
}

fn case<F>(name: &str, inputs: Vec<Tensor<f64>>, f: F) -> Case
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
{
    Case {
        name: name.to_string(),
        inputs,
        tolerance: OP_TOLERANCE,
        f: Box::new(f),
    }
}

/// Reduces a tensor output with fixed pseudo-random weights.
fn reduce(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n = numel(&shape);
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919 % 23) as f64 - 11.0) / 7.0).collect();
    weighted_sum(g, y, &Tensor::from_f64(&shape, &w)?)
}

fn layer_case(name: &str, cfg: FifmConfig, rng: &mut ChaCha8Rng) -> Case {
    let specs = cfg.param_specs("l");
    let mut inputs = vec![Tensor::randn(&[1, 4, 4, cfg.channels], 1.0, rng)];
    inputs.extend(specs.iter().map(|s| match s.role {
        Role::NormGain => Tensor::<f64>::randn(&s.shape, 0.2, rng).map(|v| v + 1.0),
        Role::LogScale => Tensor::randn(&s.shape, 0.2, rng).map(|v| v + 1.0),
        _ => Tensor::randn(&s.shape, 0.4, rng),
    }));
    let names: Vec<String> = specs.into_iter().map(|s| s.name).collect();
    Case {
        name: name.to_string(),
        inputs,
        tolerance: LAYER_TOLERANCE,
        f: Box::new(move |g, v| {
            let p = BoundParams::from_pairs(names.iter().cloned().zip(v[1..].iter().copied()));
            let y = fractal_ir_layer(g, v[0], &cfg, &p, "l")?;
            reduce(g, y)
        }),
    }
}

fn cases() -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let r = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::<f64>::randn(shape, 1.0, rng);
    let mut v = vec![
        case("add", vec![r(&[2, 3], &mut rng), r(&[2, 3], &mut rng)], |g, x| {
            let y = g.add(x[0], x[1])?;
            reduce(g, y)
        }),
        case("sub", vec![r(&[2, 3], &mut rng), r(&[2, 3], &mut rng)], |g, x| {
            let y = g.sub(x[0], x[1])?;
            reduce(g, y)
        }),
        case("mul", vec![r(&[2, 3], &mut rng), r(&[2, 3], &mut rng)], |g, x| {
            let y = g.mul(x[0], x[1])?;
            reduce(g, y)
        }),
        case("scale", vec![r(&[4], &mut rng)], |g, x| {
            let y = g.scale(x[0], -1.7);
            reduce(g, y)
        }),
        case("matmul", vec![r(&[2, 3, 4], &mut rng), r(&[2, 4, 5], &mut rng)], |g, x| {
            let y = g.matmul(x[0], x[1])?;
            reduce(g, y)
        }),
        case(
            "linear",
            vec![r(&[2, 3, 4], &mut rng), r(&[4, 5], &mut rng), r(&[5], &mut rng)],
            |g, x| {
                let y = g.linear(x[0], x[1], Some(x[2]))?;
                reduce(g, y)
            },
        ),
    ];
    for (k, stride) in [(3, 1), (3, 2), (1, 1)] {
        v.push(case(
            &format!("conv2d_k{k}_s{stride}"),
            vec![r(&[2, 4, 4, 3], &mut rng), r(&[k, k, 3, 2], &mut rng), r(&[2], &mut rng)],
            move |g, x| {
                let y = g.conv2d(x[0], x[1], Some(x[2]), stride, Padding::Same)?;
                reduce(g, y)
            },
        ));
    }
    v.extend([
        case("softmax", vec![r(&[3, 5], &mut rng)], |g, x| {
            let y = g.softmax_last(x[0]);
            reduce(g, y)
        }),
        case(
            "layer_norm",
            vec![r(&[3, 6], &mut rng), r(&[6], &mut rng), r(&[6], &mut rng)],
            |g, x| {
                let y = g.layer_norm(x[0], x[1], x[2], 1e-6)?;
                reduce(g, y)
            },
        ),
        case("gelu", vec![r(&[10], &mut rng)], |g, x| {
            let y = g.gelu(x[0]);
            reduce(g, y)
        }),
        case("reshape_permute", vec![r(&[2, 3, 4], &mut rng)], |g, x| {
            let y = g.reshape(x[0], &[6, 4])?;
            let y = g.permute(y, &[1, 0])?;
            reduce(g, y)
        }),
        case("transpose_last", vec![r(&[2, 3, 4], &mut rng)], |g, x| {
            let y = g.transpose_last(x[0])?;
            reduce(g, y)
        }),
        case("pixel_shuffle", vec![r(&[1, 2, 3, 8], &mut rng)], |g, x| {
            let y = g.pixel_shuffle(x[0], 2)?;
            reduce(g, y)
        }),
        case("pixel_unshuffle", vec![r(&[1, 4, 2, 3], &mut rng)], |g, x| {
            let y = g.pixel_unshuffle(x[0], 2)?;
            reduce(g, y)
        }),
        case("upsample_nearest", vec![r(&[1, 2, 3, 2], &mut rng)], |g, x| {
            let y = g.upsample_nearest(x[0], 2)?;
            reduce(g, y)
        }),
        case("sum", vec![r(&[3, 2], &mut rng)], |g, x| Ok(g.sum(x[0]))),
        case("mean", vec![r(&[3, 2], &mut rng)], |g, x| Ok(g.mean(x[0]))),
        case(
            "l1_loss",
            vec![
                Tensor::from_f64(&[4], &[0.5, -1.0, 2.0, 0.3])?,
                Tensor::from_f64(&[4], &[-0.5, 1.0, 1.0, 0.9])?,
            ],
            |g, x| g.l1_loss(x[0], x[1]),
        ),
        case("normalize_last", vec![r(&[3, 4], &mut rng)], |g, x| {
            let y = g.normalize_last(x[0], 1e-12);
            reduce(g, y)
        }),
        case("exp_clamp_max", vec![r(&[5], &mut rng)], |g, x| {
            let y = g.exp_clamp_max(x[0], 100.0);
            reduce(g, y)
        }),
        case("scale_heads", vec![r(&[2, 3, 2, 2], &mut rng), r(&[3], &mut rng)], |g, x| {
            let y = g.scale_heads(x[0], x[1])?;
            reduce(g, y)
        }),
        case("concat_last", vec![r(&[2, 3], &mut rng), r(&[2, 1], &mut rng)], |g, x| {
            let y = g.concat_last(&[x[0], x[1]])?;
            reduce(g, y)
        }),
    ]);
    let geo = FractalGeometry::new(4, 4, 2, 2)?;
    v.push(case("window_partition_regroup", vec![r(&[1, 4, 4, 3], &mut rng)], move |g, x| {
        let w = window_partition_var(g, x[0], 2)?;
        let y = fractal_regroup_var(g, w, &geo)?;
        let y2 = g.scale(y, 2.0);
        let back = fractal_regroup_reverse_var(g, y2, &geo)?;
        let y = window_reverse_var(g, back, 2, 4, 4)?;
        reduce(g, y)
    }));
    for kind in [AttentionKind::Dot, AttentionKind::Cosine] {
        let cfg = AttentionConfig::new(2, 4, 4, kind, true)?;
        let specs = cfg.param_specs("a");
        let mut inputs = vec![r(&[2, 4, 4], &mut rng)];
        inputs.extend(specs.iter().map(|s| Tensor::randn(&s.shape, 0.5, &mut rng)));
        let names: Vec<String> = specs.into_iter().map(|s| s.name).collect();
        v.push(case(&format!("mhsa_{kind:?}").to_lowercase(), inputs, move |g, x| {
            let p = BoundParams::from_pairs(names.iter().cloned().zip(x[1..].iter().copied()));
            let y = mhsa(g, x[0], &cfg, &p, "a")?;
            reduce(g, y)
        }));
    }
    let base = FifmConfig::new(4, 2, WindowSpec { p: 2, s: 2 });
    v.push(layer_case("layer_v3", base, &mut rng));
    for conv_kind in [ConvKind::Conv1, ConvKind::Linear] {
        let cfg = FifmConfig { conv_kind, ..base };
        v.push(layer_case(&format!("layer_v3_{conv_kind:?}").to_lowercase(), cfg, &mut rng));
    }
    let cosine = FifmConfig {
        attn_kind: AttentionKind::Cosine,
        ..base
    };
    v.push(layer_case("layer_v3_cosine", cosine, &mut rng));
    for index in 0..2 {
        let cfg = FifmConfig {
            variant: LayerVariant::V1,
            mode: LayerVariant::V1.mode_for(index),
            ..base
        };
        v.push(layer_case(&format!("layer_v1_{index}"), cfg, &mut rng));
    }
    Ok(v)
}

/// Finite-difference checks of every differentiable op and of full layers, in 64-bit.
pub fn suite() -> Result<Vec<CheckOutcome>> {
    cases()?
        .into_iter()
        .map(|c| {
            let err = finite_diff_check_many(&c.f, &c.inputs, STEP)?;
            Ok(CheckOutcome {
                name: c.name,
                max_rel_error: err,
                tolerance: c.tolerance,
            })
        })
        .collect()
}
