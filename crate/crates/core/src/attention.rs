//! Multi-head self-attention over token groups, plus the closed-form
//! gradients of dot-product and cosine-similarity scores.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{linear_specs, BoundParams, ParamSpec, Role};
use crate::tensor::Scalar;

/// Upper clamp on the cosine-attention temperature.
pub const COSINE_SCALE_MAX: f64 = 100.0;
/// Initial cosine-attention temperature (stored as its logarithm).
pub const COSINE_SCALE_INIT: f64 = 10.0;
const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Dot,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub model_dim: usize,
    /// Width of the query/key projections.
    pub qk_dim: usize,
    pub kind: AttentionKind,
    /// Whether the block ends with its own output projection.
    pub output_proj: bool,
}

impl AttentionConfig {
    pub fn new(
        heads: usize,
        model_dim: usize,
        qk_dim: usize,
        kind: AttentionKind,
        output_proj: bool,
    ) -> Result<Self> {
        if heads == 0 || !qk_dim.is_multiple_of(heads) || qk_dim == 0 {
            return Err(Error::Config(format!(
                "qk_dim {qk_dim} must be a positive multiple of heads {heads}"
            )));
        }
        if !model_dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model_dim {model_dim} must be a multiple of heads {heads}"
            )));
        }
        Ok(Self {
            heads,
            model_dim,
            qk_dim,
            kind,
            output_proj,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.qk_dim / self.heads
    }

    pub fn value_head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// Parameters under `prefix`: `q`, `k`, `v`, optional `out`, and `log_scale` for cosine.
    pub fn param_specs(&self, prefix: &str) -> Vec<ParamSpec> {
        let c = self.model_dim;
        let mut specs = Vec::new();
        specs.extend(linear_specs(&format!("{prefix}.q"), c, self.qk_dim, true));
        specs.extend(linear_specs(&format!("{prefix}.k"), c, self.qk_dim, true));
        specs.extend(linear_specs(&format!("{prefix}.v"), c, c, true));
        if self.output_proj {
            specs.extend(linear_specs(&format!("{prefix}.out"), c, c, true));
        }
        if self.kind == AttentionKind::Cosine {
            specs.push(ParamSpec {
                name: format!("{prefix}.log_scale"),
                shape: vec![self.heads],
                role: Role::LogScale,
                residual_branch: true,
            });
        }
        specs
    }
}

/// `[G, n, C] → [G, h, n, d]`
fn split_heads<T: Scalar>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let r = g.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    g.permute(r, &[0, 2, 1, 3])
}

/// Self-attention within each of the `G` groups of `n` tokens.
pub fn mhsa<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    cfg: &AttentionConfig,
    params: &BoundParams,
    prefix: &str,
) -> Result<Var> {
    mhsa_with_weights(g, x, cfg, params, prefix).map(|(y, _)| y)
}

/// As [`mhsa`], also returning the attention map `[G, h, n, n]`.
pub fn mhsa_with_weights<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    cfg: &AttentionConfig,
    params: &BoundParams,
    prefix: &str,
) -> Result<(Var, Var)> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 || shape[2] != cfg.model_dim {
        return Err(Error::Config(format!(
            "attention `{prefix}` expects [G, n, {}], got {shape:?}",
            cfg.model_dim
        )));
    }
    let p = |name: &str| params.get(&format!("{prefix}.{name}"));

    let q = g.linear(x, p("q.weight")?, Some(p("q.bias")?))?;
    let k = g.linear(x, p("k.weight")?, Some(p("k.bias")?))?;
    let v = g.linear(x, p("v.weight")?, Some(p("v.bias")?))?;
    let q = split_heads(g, q, cfg.heads)?;
    let k = split_heads(g, k, cfg.heads)?;
    let v = split_heads(g, v, cfg.heads)?;

    let scores = match cfg.kind {
        AttentionKind::Dot => {
            let kt = g.transpose_last(k)?;
            let s = g.matmul(q, kt)?;
            g.scale(s, 1.0 / (cfg.head_dim() as f64).sqrt())
        }
        AttentionKind::Cosine => {
            let qn = g.normalize_last(q, NORMALIZE_EPS);
            let kn = g.normalize_last(k, NORMALIZE_EPS);
            let kt = g.transpose_last(kn)?;
            let s = g.matmul(qn, kt)?;
            let temp = g.exp_clamp_max(p("log_scale")?, COSINE_SCALE_MAX);
            g.scale_heads(s, temp)?
        }
    };
    let attn = g.softmax_last(scores);
    let y = g.matmul(attn, v)?;
    let y = g.permute(y, &[0, 2, 1, 3])?;
    let y = g.reshape(y, &shape)?;
    let y = if cfg.output_proj {
        g.linear(y, p("out.weight")?, Some(p("out.bias")?))?
    } else {
        y
    };
    Ok((y, attn))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradients of `q·k` with respect to `q` and `k`.
pub fn grad_dot_closed_form(q: &[f64], k: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (k.to_vec(), q.to_vec())
}

/// Gradients of `cos(q, k)`: `(k̂ − cos·q̂)/‖q‖` and `(q̂ − cos·k̂)/‖k‖`.
pub fn grad_cos_closed_form(q: &[f64], k: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (nq, nk) = (norm(q), norm(k));
    if nq == 0.0 || nk == 0.0 {
        return Err(Error::Domain(
            "cosine similarity gradient is undefined for a zero vector".into(),
        ));
    }
    let qh: Vec<f64> = q.iter().map(|x| x / nq).collect();
    let kh: Vec<f64> = k.iter().map(|x| x / nk).collect();
    let cos = dot(&qh, &kh);
    let gq = kh.iter().zip(&qh).map(|(a, b)| (a - cos * b) / nq).collect();
    let gk = qh.iter().zip(&kh).map(|(a, b)| (a - cos * b) / nk).collect();
    Ok((gq, gk))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Independent random directions.
    Random,
    /// `k` orthogonal to `q`.
    Orthogonal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradExperiment {
    pub n_samples: usize,
    pub dim: usize,
    /// Norms of `q` and `k` are drawn log-uniformly from this closed range.
    pub norm_range: (f64, f64),
    pub pairing: Pairing,
    pub seed: u64,
}

impl Default for GradExperiment {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            dim: 16,
            norm_range: (1e-3, 1.0),
            pairing: Pairing::Random,
            seed: 0,
        }
    }
}

/// Distribution of `‖∂score/∂q‖` for one score kind.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradSummary {
    pub kind: AttentionKind,
    pub n: usize,
    pub min: f64,
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
}

impl GradSummary {
    fn from_samples(kind: AttentionKind, mut v: Vec<f64>) -> Self {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let q = |f: f64| v[((f * n as f64).ceil() as usize).clamp(1, n) - 1];
        Self {
            kind,
            n,
            min: v[0],
            mean: v.iter().sum::<f64>() / n as f64,
            p50: q(0.5),
            p90: q(0.9),
            p99: q(0.99),
            max: v[n - 1],
        }
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn sample_norm(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo >= hi {
        return lo;
    }
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

/// Samples query/key pairs and summarises the gradient norm of both score kinds.
/// Returns an empty list when `n_samples == 0`.
pub fn gradient_magnitude_experiment(cfg: &GradExperiment) -> Result<Vec<GradSummary>> {
    let (lo, hi) = cfg.norm_range;
    if !(lo > 0.0 && hi >= lo) {
        return Err(Error::Config(format!("norm range ({lo}, {hi}) must satisfy 0 < lo <= hi")));
    }
    if cfg.dim < 2 {
        return Err(Error::Config("experiment dimension must be at least 2".into()));
    }
    if cfg.n_samples == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dots = Vec::with_capacity(cfg.n_samples);
    let mut coss = Vec::with_capacity(cfg.n_samples);
    for _ in 0..cfg.n_samples {
        let qd = unit_vector(&mut rng, cfg.dim);
        let mut kd = unit_vector(&mut rng, cfg.dim);
        if cfg.pairing == Pairing::Orthogonal {
            let c = dot(&kd, &qd);
            kd.iter_mut().zip(&qd).for_each(|(k, q)| *k -= c * q);
            let n = norm(&kd);
            kd.iter_mut().for_each(|k| *k /= n);
        }
        let nq = sample_norm(&mut rng, cfg.norm_range);
        let nk = sample_norm(&mut rng, cfg.norm_range);
        let q: Vec<f64> = qd.iter().map(|x| x * nq).collect();
        let k: Vec<f64> = kd.iter().map(|x| x * nk).collect();
        dots.push(norm(&grad_dot_closed_form(&q, &k).0));
        coss.push(norm(&grad_cos_closed_form(&q, &k)?.0));
    }
    Ok(vec![
        GradSummary::from_samples(AttentionKind::Dot, dots),
        GradSummary::from_samples(AttentionKind::Cosine, coss),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    fn random_store(cfg: &AttentionConfig, prefix: &str, seed: u64) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for spec in cfg.param_specs(prefix) {
            store.insert(spec.name.clone(), Tensor::randn(&spec.shape, 0.5, &mut rng));
        }
        store
    }

    #[test]
    fn config_validation() {
        assert!(AttentionConfig::new(3, 8, 8, AttentionKind::Dot, true).is_err());
        assert!(AttentionConfig::new(2, 8, 4, AttentionKind::Dot, true).is_ok());
        let c = AttentionConfig::new(2, 8, 4, AttentionKind::Cosine, false).unwrap();
        let names: Vec<_> = c.param_specs("a").into_iter().map(|s| s.name).collect();
        assert!(names.contains(&"a.log_scale".to_string()));
        assert!(!names.contains(&"a.out.weight".to_string()));
    }

    #[test]
    fn single_token_ignores_queries_and_keys() {
        let cfg = AttentionConfig::new(2, 4, 4, AttentionKind::Dot, true).unwrap();
        let store = random_store(&cfg, "a", 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::randn(&[5, 1, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let b = store.bind(&mut g, false);
        let xv = g.constant(x);
        let y = mhsa(&mut g, xv, &cfg, &b, "a").unwrap();
        let v = g.linear(xv, b.get("a.v.weight").unwrap(), Some(b.get("a.v.bias").unwrap())).unwrap();
        let o = g.linear(v, b.get("a.out.weight").unwrap(), Some(b.get("a.out.bias").unwrap())).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(o)) < 1e-12);
    }

    #[test]
    fn grad_closed_forms_small_cases() {
        let (gq, gk) = grad_dot_closed_form(&[1.0, 0.0], &[0.0, 1.0]);
        assert_eq!(gq, vec![0.0, 1.0]);
        assert_eq!(gk, vec![1.0, 0.0]);
        let (gq, _) = grad_dot_closed_form(&[0.3, 0.2], &[0.0, 0.0]);
        assert_eq!(gq, vec![0.0, 0.0]);

        let (gq, _) = grad_cos_closed_form(&[1e-3, 0.0], &[0.0, 1.0]).unwrap();
        assert!((norm(&gq) - 1000.0).abs() < 1e-9);
        let (gq, gk) = grad_cos_closed_form(&[2.0, 1.0], &[4.0, 2.0]).unwrap();
        assert!(norm(&gq) < 1e-15 && norm(&gk) < 1e-15);
        assert!(matches!(grad_cos_closed_form(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn experiment_unit_orthogonal() {
        let cfg = GradExperiment {
            n_samples: 200,
            dim: 8,
            norm_range: (1.0, 1.0),
            pairing: Pairing::Orthogonal,
            seed: 1,
        };
        let s = gradient_magnitude_experiment(&cfg).unwrap();
        assert!((s[0].max - 1.0).abs() < 1e-12);
        assert!((s[1].max - 1.0).abs() < 1e-12);
        let empty = gradient_magnitude_experiment(&GradExperiment { n_samples: 0, ..cfg }).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn experiment_small_norms_blow_up_cosine() {
        let cfg = GradExperiment {
            n_samples: 1000,
            ..GradExperiment::default()
        };
        let s = gradient_magnitude_experiment(&cfg).unwrap();
        assert!(s[1].max >= 100.0 * s[0].max, "{s:?}");
        // deterministic under a fixed seed
        assert_eq!(s, gradient_magnitude_experiment(&cfg).unwrap());
    }
}
