//! Window partition and fractal regrouping.
//!
//! Level one groups each `p × p` window into an attention group. Level two
//! views the windows of every `P × P` region (`P = s·p`) as an `s × s` grid and,
//! for each in-window offset, gathers the pixel at that offset from every
//! window of the grid into one group of `s²` tokens.
//!
//! Both maps are a reshape followed by an axis permutation and a reshape, so
//! they are expressed once as a [`Plan`] and executed either on plain tensors
//! or on graph variables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{inverse_axes, Scalar, Tensor};

/// Window side `p` and grouping factor `s` of one fractal level pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub p: usize,
    pub s: usize,
}

impl WindowSpec {
    pub fn region(&self) -> usize {
        self.p * self.s
    }
}

/// Image extents together with a [`WindowSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FractalGeometry {
    pub h: usize,
    pub w: usize,
    pub p: usize,
    pub s: usize,
}

impl FractalGeometry {
    pub fn new(h: usize, w: usize, p: usize, s: usize) -> Result<Self> {
        if p == 0 || s == 0 || h == 0 || w == 0 {
            return Err(Error::Geometry(format!("zero extent in h={h} w={w} p={p} s={s}")));
        }
        let big = p * s;
        if !h.is_multiple_of(big) || !w.is_multiple_of(big) {
            return Err(Error::Geometry(format!(
                "{h}x{w} is not tiled by {big}x{big} regions (p={p}, s={s})"
            )));
        }
        Ok(Self { h, w, p, s })
    }

    pub fn from_spec(h: usize, w: usize, spec: WindowSpec) -> Result<Self> {
        Self::new(h, w, spec.p, spec.s)
    }

    /// Region side `P = s·p`.
    pub fn region(&self) -> usize {
        self.p * self.s
    }

    pub fn windows(&self) -> usize {
        (self.h / self.p) * (self.w / self.p)
    }

    pub fn regions(&self) -> usize {
        (self.h / self.region()) * (self.w / self.region())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Step {
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
}

/// A reshape/permute pipeline runnable on tensors or graph variables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plan {
    steps: Vec<Step>,
}

impl Plan {
    pub fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for step in &self.steps {
            cur = match step {
                Step::Reshape(s) => cur.reshape(s)?,
                Step::Permute(a) => cur.permute(a)?,
            };
        }
        Ok(cur)
    }

    pub fn apply_var<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let mut cur = x;
        for step in &self.steps {
            cur = match step {
                Step::Reshape(s) => g.reshape(cur, s)?,
                Step::Permute(a) => g.permute(cur, a)?,
            };
        }
        Ok(cur)
    }
}

fn check_window(op: &'static str, h: usize, w: usize, p: usize) -> Result<()> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(Error::Geometry(format!("{op}: {h}x{w} not divisible by window {p}")));
    }
    Ok(())
}

/// `[B, H, W, C] → [B·HW/p², p², C]`, windows row-major, pixels row-major inside.
pub fn window_partition_plan(shape: &[usize], p: usize) -> Result<Plan> {
    if shape.len() != 4 {
        return Err(Error::Geometry(format!("window_partition: need [B,H,W,C], got {shape:?}")));
    }
    let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    check_window("window_partition", h, w, p)?;
    Ok(Plan {
        steps: vec![
            Step::Reshape(vec![b, h / p, p, w / p, p, c]),
            Step::Permute(vec![0, 1, 3, 2, 4, 5]),
            Step::Reshape(vec![b * (h / p) * (w / p), p * p, c]),
        ],
    })
}

pub fn window_reverse_plan(shape: &[usize], p: usize, h: usize, w: usize) -> Result<Plan> {
    check_window("window_reverse", h, w, p)?;
    if shape.len() != 3 || shape[1] != p * p || !shape[0].is_multiple_of((h / p) * (w / p)) {
        return Err(Error::Geometry(format!(
            "window_reverse: shape {shape:?} inconsistent with {h}x{w}, p={p}"
        )));
    }
    let b = shape[0] / ((h / p) * (w / p));
    let c = shape[2];
    Ok(Plan {
        steps: vec![
            Step::Reshape(vec![b, h / p, w / p, p, p, c]),
            Step::Permute(vec![0, 1, 3, 2, 4, 5]),
            Step::Reshape(vec![b, h, w, c]),
        ],
    })
}

// Window-partitioned axes, viewed as (b, Ry, sy, Rx, sx, oy, ox, c).
const REGROUP_AXES: [usize; 8] = [0, 1, 3, 5, 6, 2, 4, 7];

/// Level-one groups → level-two groups, `[B·(H/P)(W/P)·p², s², C]`.
///
/// Groups are ordered `(b, region row, region col, offset row, offset col)`;
/// tokens inside a group run row-major over the `s × s` window grid.
pub fn fractal_regroup_plan(shape: &[usize], geo: &FractalGeometry) -> Result<Plan> {
    let (p, s) = (geo.p, geo.s);
    if shape.len() != 3 || shape[1] != p * p || !shape[0].is_multiple_of(geo.windows()) {
        return Err(Error::Geometry(format!(
            "fractal_regroup: shape {shape:?} is not a level-one layout for {geo:?}"
        )));
    }
    let b = shape[0] / geo.windows();
    let c = shape[2];
    let (rh, rw) = (geo.h / geo.region(), geo.w / geo.region());
    Ok(Plan {
        steps: vec![
            Step::Reshape(vec![b, rh, s, rw, s, p, p, c]),
            Step::Permute(REGROUP_AXES.to_vec()),
            Step::Reshape(vec![b * rh * rw * p * p, s * s, c]),
        ],
    })
}

pub fn fractal_regroup_reverse_plan(shape: &[usize], geo: &FractalGeometry) -> Result<Plan> {
    let (p, s) = (geo.p, geo.s);
    let groups = geo.regions() * p * p;
    if shape.len() != 3 || shape[1] != s * s || !shape[0].is_multiple_of(groups) {
        return Err(Error::Geometry(format!(
            "fractal_regroup_reverse: shape {shape:?} is not a level-two layout for {geo:?}"
        )));
    }
    let b = shape[0] / groups;
    let c = shape[2];
    let (rh, rw) = (geo.h / geo.region(), geo.w / geo.region());
    Ok(Plan {
        steps: vec![
            Step::Reshape(vec![b, rh, rw, p, p, s, s, c]),
            Step::Permute(inverse_axes(&REGROUP_AXES)),
            Step::Reshape(vec![b * geo.windows(), p * p, c]),
        ],
    })
}

pub fn window_partition<T: Scalar>(x: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    window_partition_plan(x.shape(), p)?.apply(x)
}

pub fn window_reverse<T: Scalar>(x: &Tensor<T>, p: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    window_reverse_plan(x.shape(), p, h, w)?.apply(x)
}

pub fn fractal_regroup<T: Scalar>(y1: &Tensor<T>, geo: &FractalGeometry) -> Result<Tensor<T>> {
    fractal_regroup_plan(y1.shape(), geo)?.apply(y1)
}

pub fn fractal_regroup_reverse<T: Scalar>(y: &Tensor<T>, geo: &FractalGeometry) -> Result<Tensor<T>> {
    fractal_regroup_reverse_plan(y.shape(), geo)?.apply(y)
}

pub fn window_partition_var<T: Scalar>(g: &mut Graph<T>, x: Var, p: usize) -> Result<Var> {
    let plan = window_partition_plan(g.shape(x), p)?;
    plan.apply_var(g, x)
}

pub fn window_reverse_var<T: Scalar>(g: &mut Graph<T>, x: Var, p: usize, h: usize, w: usize) -> Result<Var> {
    let plan = window_reverse_plan(g.shape(x), p, h, w)?;
    plan.apply_var(g, x)
}

pub fn fractal_regroup_var<T: Scalar>(g: &mut Graph<T>, y1: Var, geo: &FractalGeometry) -> Result<Var> {
    let plan = fractal_regroup_plan(g.shape(y1), geo)?;
    plan.apply_var(g, y1)
}

pub fn fractal_regroup_reverse_var<T: Scalar>(
    g: &mut Graph<T>,
    y: Var,
    geo: &FractalGeometry,
) -> Result<Var> {
    let plan = fractal_regroup_reverse_plan(g.shape(y), geo)?;
    plan.apply_var(g, y)
}

/// Which grouping an [`IndexMap`] describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Image → level-one windows.
    L1,
    /// Image → level-two groups (partition followed by regroup).
    L2,
}

/// Flat source pixel `y·W + x` → flat destination position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMap {
    pub permutation: Vec<usize>,
}

impl IndexMap {
    pub fn is_bijection(&self) -> bool {
        let mut seen = vec![false; self.permutation.len()];
        self.permutation
            .iter()
            .all(|&d| d < seen.len() && !std::mem::replace(&mut seen[d], true))
    }

    pub fn inverse(&self) -> IndexMap {
        let mut inv = vec![0; self.permutation.len()];
        for (src, &dst) in self.permutation.iter().enumerate() {
            inv[dst] = src;
        }
        IndexMap { permutation: inv }
    }

    /// Moves the pixels of a single-batch `[1, H, W, C]` (or any `[…, H·W, C]`
    /// layout) so that pixel `src` ends up at position `permutation[src]`.
    pub fn apply_pixels<T: Scalar>(&self, pixels: &[T], channels: usize) -> Vec<T> {
        let mut out = vec![T::zero(); pixels.len()];
        for (src, &dst) in self.permutation.iter().enumerate() {
            out[dst * channels..(dst + 1) * channels]
                .copy_from_slice(&pixels[src * channels..(src + 1) * channels]);
        }
        out
    }
}

/// Brute-force enumeration of the grouping, independent of the tensor pipeline.
pub fn index_map_oracle(geo: &FractalGeometry, stage: Stage) -> IndexMap {
    let FractalGeometry { h, w, p, s } = *geo;
    let big = p * s;
    let mut perm = vec![usize::MAX; h * w];
    match stage {
        Stage::L1 => {
            for wy in 0..h / p {
                for wx in 0..w / p {
                    for oy in 0..p {
                        for ox in 0..p {
                            let (y, x) = (wy * p + oy, wx * p + ox);
                            let window = wy * (w / p) + wx;
                            perm[y * w + x] = window * p * p + oy * p + ox;
                        }
                    }
                }
            }
        }
        Stage::L2 => {
            let mut dst = 0;
            for ry in 0..h / big {
                for rx in 0..w / big {
                    for oy in 0..p {
                        for ox in 0..p {
                            for sy in 0..s {
                                for sx in 0..s {
                                    let y = ry * big + sy * p + oy;
                                    let x = rx * big + sx * p + ox;
                                    perm[y * w + x] = dst;
                                    dst += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    IndexMap { permutation: perm }
}
