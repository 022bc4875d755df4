//! Weight initialisation and rescaling schemes, and the statistics used to audit them.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::COSINE_SCALE_INIT;
use crate::params::{ParamSpec, ParamStore, Role};
use crate::tensor::{cast, Scalar, Tensor};

pub const TRUNC_NORMAL_STD: f64 = 0.02;
/// Truncation point in units of the standard deviation.
pub const TRUNC_NORMAL_BOUND: f64 = 2.0;
pub const RESIDUAL_RESCALE: f64 = 0.01;
pub const WEIGHT_RESCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Normal with std `sqrt(2 / fan_in)`.
    #[default]
    KaimingFanIn,
    /// Normal with std 0.02 truncated at ±2σ.
    TruncNormal,
    /// Kaiming weights, layer-norm gain and bias set to 0.
    ZeroLayernorm,
    /// Kaiming weights, residual branch outputs multiplied by 0.01.
    ResidualRescale,
    /// Kaiming weights, residual branch weights multiplied by 0.1.
    WeightRescale,
}

impl InitScheme {
    /// Multiplier applied to residual branch outputs in the forward pass.
    pub fn residual_scale(self) -> f64 {
        match self {
            InitScheme::ResidualRescale => RESIDUAL_RESCALE,
            _ => 1.0,
        }
    }
}

pub fn kaiming_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, std: f64, bound: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= bound {
            return z * std;
        }
    }
}

/// Draws one tensor for `spec` under `scheme`.
pub fn init_tensor<T: Scalar, R: Rng + ?Sized>(spec: &ParamSpec, scheme: InitScheme, rng: &mut R) -> Tensor<T> {
    let shape = &spec.shape;
    match spec.role {
        Role::Weight { fan_in, .. } => {
            if scheme == InitScheme::TruncNormal {
                let n = spec.numel();
                let data = (0..n)
                    .map(|_| cast(trunc_normal(rng, TRUNC_NORMAL_STD, TRUNC_NORMAL_BOUND)))
                    .collect();
                return Tensor::new(shape, data).expect("spec shape");
            }
            let mut t = Tensor::randn(shape, kaiming_std(fan_in), rng);
            if scheme == InitScheme::WeightRescale && spec.residual_branch {
                t = t.scale(cast(WEIGHT_RESCALE));
            }
            t
        }
        Role::Bias | Role::NormBias => Tensor::zeros(shape),
        Role::NormGain => match scheme {
            InitScheme::ZeroLayernorm => Tensor::zeros(shape),
            _ => Tensor::ones(shape),
        },
        Role::LogScale => Tensor::full(shape, cast(COSINE_SCALE_INIT.ln())),
    }
}

pub fn init_params<T: Scalar, R: Rng + ?Sized>(specs: &[ParamSpec], scheme: InitScheme, rng: &mut R) -> ParamStore<T> {
    let mut store = ParamStore::new();
    for spec in specs {
        store.insert(spec.name.clone(), init_tensor(spec, scheme, rng));
    }
    store
}

/// Empirical statistics of one weight tensor next to its Kaiming target.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InitStat {
    pub name: String,
    pub fan_in: usize,
    pub fan_out: usize,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    /// `sqrt(2 / fan_in)`
    pub kaiming_std: f64,
}

/// Mean and population std of every weight tensor, pooled across `stores`.
pub fn init_stats<T: Scalar>(specs: &[ParamSpec], stores: &[ParamStore<T>]) -> Vec<InitStat> {
    specs
        .iter()
        .filter_map(|spec| match spec.role {
            Role::Weight { fan_in, fan_out } => Some((spec, fan_in, fan_out)),
            _ => None,
        })
        .map(|(spec, fan_in, fan_out)| {
            let mut n = 0usize;
            let mut sum = 0.0;
            let mut sq = 0.0;
            for store in stores {
                if let Ok(t) = store.get(&spec.name) {
                    for v in t.data() {
                        let v = v.as_f64();
                        n += 1;
                        sum += v;
                        sq += v * v;
                    }
                }
            }
            let mean = sum / n.max(1) as f64;
            let var = (sq / n.max(1) as f64 - mean * mean).max(0.0);
            InitStat {
                name: spec.name.clone(),
                fan_in,
                fan_out,
                count: n,
                mean,
                std: var.sqrt(),
                kaiming_std: kaiming_std(fan_in),
            }
        })
        .collect()
}
