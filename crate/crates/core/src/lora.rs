//! Low-rank adapters: the `ΔW = BA` update, merging, stacking and rank-1 splits.
//!
//! An adapter over an `m × n` weight holds `a: r × n` and `b: m × r`. Stacking
//! places the `a` blocks one under another and the `b` blocks side by side, so
//! the product of a stack is the sum of the products of its parts.

use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};
use crate::rng::rng_from_seed;

pub type Matrix = Array2<f64>;

/// Shape of the adapted weight: `m` outputs by `n` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dim {
    pub m: usize,
    pub n: usize,
}

impl Dim {
    pub fn new(m: usize, n: usize) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(invalid(format!("dimensions must be positive, got {m}x{n}")));
        }
        Ok(Dim { m, n })
    }

    pub fn params(&self) -> u64 {
        (self.m * self.n) as u64
    }

    /// Parameters in one rank-`rank` adapter pair.
    pub fn adapter_params(&self, rank: usize) -> u64 {
        (rank * (self.m + self.n)) as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    a: Matrix,
    b: Matrix,
}

impl LoraAdapter {
    /// Builds an adapter from `a: r × n` and `b: m × r`.
    pub fn new(a: Matrix, b: Matrix) -> Result<Self> {
        let rank = a.nrows();
        if rank == 0 {
            return Err(invalid("adapter rank must be at least 1"));
        }
        if b.ncols() != rank {
            return Err(invalid(format!(
                "a has {rank} rows but b has {} columns",
                b.ncols()
            )));
        }
        if a.ncols() == 0 || b.nrows() == 0 {
            return Err(invalid("adapter dimensions must be positive"));
        }
        Ok(LoraAdapter { a, b })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn dim(&self) -> Dim {
        Dim {
            m: self.b.nrows(),
            n: self.a.ncols(),
        }
    }

    pub fn into_parts(self) -> (Matrix, Matrix) {
        (self.a, self.b)
    }

    /// The dense update `b · a`.
    pub fn delta(&self) -> Matrix {
        self.b.dot(&self.a)
    }

    /// Scales the `a` factor by `p`, leaving `b` alone, so the delta scales by `p` once.
    pub fn scale(&self, p: f64) -> Result<Self> {
        if !p.is_finite() || p < 0.0 {
            return Err(invalid(format!("scaling factor must be finite and >= 0, got {p}")));
        }
        Ok(LoraAdapter {
            a: &self.a * p,
            b: self.b.clone(),
        })
    }

    /// Splits into `rank` rank-1 adapters: row `i` of `a` paired with column `i` of `b`.
    pub fn split_rank1(&self) -> Vec<LoraAdapter> {
        (0..self.rank())
            .map(|i| LoraAdapter {
                a: self.a.slice(s![i..i + 1, ..]).to_owned(),
                b: self.b.slice(s![.., i..i + 1]).to_owned(),
            })
            .collect()
    }

    /// Extends to `rank` by appending zero rows to `a` and zero columns to `b`.
    pub fn zero_pad(&self, rank: usize) -> Result<Self> {
        let r = self.rank();
        if rank < r {
            return Err(invalid(format!("cannot pad rank {r} down to {rank}")));
        }
        let Dim { m, n } = self.dim();
        let mut a = Matrix::zeros((rank, n));
        let mut b = Matrix::zeros((m, rank));
        a.slice_mut(s![..r, ..]).assign(&self.a);
        b.slice_mut(s![.., ..r]).assign(&self.b);
        Ok(LoraAdapter { a, b })
    }
}

/// Frozen dense weight `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseWeights {
    w: Matrix,
}

impl BaseWeights {
    pub fn new(w: Matrix) -> Result<Self> {
        if w.nrows() == 0 || w.ncols() == 0 {
            return Err(invalid("base weights must be non-empty"));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(invalid("base weights must be finite"));
        }
        Ok(BaseWeights { w })
    }

    pub fn zeros(dim: Dim) -> Self {
        BaseWeights {
            w: Matrix::zeros((dim.m, dim.n)),
        }
    }

    pub fn w(&self) -> &Matrix {
        &self.w
    }

    pub fn dim(&self) -> Dim {
        Dim {
            m: self.w.nrows(),
            n: self.w.ncols(),
        }
    }

    /// Adds a dense update of matching shape.
    pub fn add_delta(&self, delta: &Matrix) -> Result<Self> {
        if delta.dim() != self.w.dim() {
            return Err(invalid(format!(
                "update shape {:?} does not match base {:?}",
                delta.dim(),
                self.w.dim()
            )));
        }
        Ok(BaseWeights { w: &self.w + delta })
    }

    /// SHA-256 over the shape and the little-endian bit patterns of every entry.
    pub fn fingerprint(&self) -> String {
        crate::digest::matrix_digest(&self.w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitKind {
    /// `a ~ N(0, std²)`, `b = 0`.
    ZeroDeltaGaussian { std: f64 },
    /// `a ~ U(-bound, bound)`, `b = 0`.
    ZeroDeltaUniform { bound: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitPolicy {
    pub kind: InitKind,
    pub seed: u64,
}

impl InitPolicy {
    pub fn gaussian(std: f64, seed: u64) -> Self {
        InitPolicy {
            kind: InitKind::ZeroDeltaGaussian { std },
            seed,
        }
    }

    pub fn uniform(bound: f64, seed: u64) -> Self {
        InitPolicy {
            kind: InitKind::ZeroDeltaUniform { bound },
            seed,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        InitPolicy { seed, ..self }
    }
}

impl Default for InitPolicy {
    fn default() -> Self {
        InitPolicy::gaussian(0.01, 0)
    }
}

/// Fresh adapter with `b = 0`, so its delta is exactly zero.
pub fn init_adapter(dim: Dim, rank: usize, policy: &InitPolicy) -> Result<LoraAdapter> {
    if rank == 0 {
        return Err(invalid("adapter rank must be at least 1"));
    }
    let dim = Dim::new(dim.m, dim.n)?;
    let mut rng = rng_from_seed(policy.seed);
    let a = match policy.kind {
        InitKind::ZeroDeltaGaussian { std } => {
            if !(std.is_finite() && std >= 0.0) {
                return Err(invalid(format!("init std must be finite and >= 0, got {std}")));
            }
            Matrix::from_shape_simple_fn((rank, dim.n), || {
                std * rng.sample::<f64, _>(StandardNormal)
            })
        }
        InitKind::ZeroDeltaUniform { bound } => {
            if !(bound.is_finite() && bound >= 0.0) {
                return Err(invalid(format!("init bound must be finite and >= 0, got {bound}")));
            }
            Matrix::from_shape_simple_fn((rank, dim.n), || {
                bound * (2.0 * rng.random::<f64>() - 1.0)
            })
        }
    };
    let b = Matrix::zeros((dim.m, rank));
    Ok(LoraAdapter { a, b })
}

/// Returns `W + b·a`; `base` is left untouched.
pub fn merge_into_base(base: &BaseWeights, adapter: &LoraAdapter) -> Result<BaseWeights> {
    if base.dim() != adapter.dim() {
        return Err(invalid(format!(
            "adapter {:?} does not match base {:?}",
            adapter.dim(),
            base.dim()
        )));
    }
    base.add_delta(&adapter.delta())
}

/// The `⊕` operator over a list, in list order.
pub fn stack_adapters(adapters: &[LoraAdapter]) -> Result<LoraAdapter> {
    let first = adapters
        .first()
        .ok_or_else(|| invalid("cannot stack an empty adapter list"))?;
    let dim = first.dim();
    if let Some(bad) = adapters.iter().find(|ad| ad.dim() != dim) {
        return Err(invalid(format!(
            "stacked adapters must share dimensions: {:?} vs {:?}",
            dim,
            bad.dim()
        )));
    }
    if adapters.len() == 1 {
        return Ok(first.clone());
    }
    let a_views: Vec<_> = adapters.iter().map(|ad| ad.a.view()).collect();
    let b_views: Vec<_> = adapters.iter().map(|ad| ad.b.view()).collect();
    let a = concatenate(Axis(0), &a_views).map_err(|e| invalid(e.to_string()))?;
    let b = concatenate(Axis(1), &b_views).map_err(|e| invalid(e.to_string()))?;
    Ok(LoraAdapter { a, b })
}

/// Trainable share of a rank-`rank` adapter relative to the dense weight: `r(m+n)/(mn)`.
pub fn trainable_fraction(dim: Dim, rank: usize) -> Result<f64> {
    let dim = Dim::new(dim.m, dim.n)?;
    if rank == 0 {
        return Err(invalid("adapter rank must be at least 1"));
    }
    Ok(dim.adapter_params(rank) as f64 / dim.params() as f64)
}
