//! Per-Gaussian math and the structure-of-arrays point cloud.
//!
//! A Gaussian is `(mu, cov, color)` where `cov` is the symmetric 2×2 matrix
//! `[[a, b], [b, c]]` optimized directly (no Cholesky or rotation/scale
//! factorization) and `color` is the weighted color with opacity folded in.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

/// Default floor for the diagonal entries and determinant after repair (pixel²).
pub const EPS_PSD: f64 = 1e-4;
/// Determinant magnitude below which a covariance is treated as non-invertible.
pub const EPS_DET: f64 = 1e-8;

/// Scalar type used by the math: `f32` on the production path, `f64` for the
/// reference path and gradient checks.
pub trait Real: Float + Send + Sync + Debug + Default + Sum + 'static {
    fn lit(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
    /// `exp(-x)` for `x ≥ 0`. Branch-free so row loops vectorize.
    fn exp_neg(self) -> Self;
}

impl Real for f32 {
    #[inline(always)]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn exp_neg(self) -> Self {
        exp_neg_f32(self)
    }
}

impl Real for f64 {
    #[inline(always)]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64_lossy(self) -> f64 {
        self
    }
    #[inline(always)]
    fn exp_neg(self) -> Self {
        (-self).exp()
    }
}

/// Cephes-style `expf` on `-x`: `2^n · p(r)` with `r = -x - n·ln 2`,
/// `|r| ≤ ln2/2`. Inputs past 87 underflow to 0.
#[inline(always)]
fn exp_neg_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // 1.5·2^23: adding it rounds to an integer held in the low mantissa bits.
    const SHIFTER: f32 = 12_582_912.0;
    let t = (-x).max(-87.0);
    let k = t * LOG2E + SHIFTER;
    let n = k - SHIFTER;
    let r = (t - n * LN2_HI) - n * LN2_LO;
    let mut p = 1.987_569_1e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5.000_000_1e-1;
    let e = p * r * r + r + 1.0;
    let ni = k.to_bits().wrapping_sub(SHIFTER.to_bits()) as i32;
    let scale = f32::from_bits(((ni + 127) << 23) as u32);
    let out = e * scale;
    if x > 87.0 {
        0.0
    } else {
        out
    }
}

/// Upper triangle of a symmetric 2×2 covariance.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CovUT<T> {
    pub a: T,
    pub b: T,
    pub c: T,
}

impl<T: Real> CovUT<T> {
    pub fn new(a: T, b: T, c: T) -> Self {
        Self { a, b, c }
    }

    pub fn isotropic(var: T) -> Self {
        Self::new(var, T::zero(), var)
    }

    #[inline]
    pub fn det(&self) -> T {
        self.a * self.c - self.b * self.b
    }

    pub fn cast<U: Real>(&self) -> CovUT<U> {
        CovUT::new(
            U::lit(self.a.to_f64_lossy()),
            U::lit(self.b.to_f64_lossy()),
            U::lit(self.c.to_f64_lossy()),
        )
    }
}

/// Sylvester criterion for a symmetric 2×2 matrix: leading minor and
/// determinant both at least `eps`.
#[inline]
pub fn is_positive_definite<T: Real>(cov: CovUT<T>, eps: T) -> bool {
    cov.b.is_finite() && cov.c.is_finite() && cov.a.is_finite() && cov.a >= eps && cov.det() >= eps
}

/// Closed-form inverse. Returns `(Σ⁻¹, det Σ)`.
#[inline]
pub fn invert_cov<T: Real>(cov: CovUT<T>) -> Result<(CovUT<T>, T)> {
    let det = cov.det();
    if !(det.abs() >= T::lit(EPS_DET)) {
        return Err(Error::DegenerateCovariance {
            det: det.to_f64_lossy(),
        });
    }
    let inv = T::one() / det;
    Ok((CovUT::new(cov.c * inv, -cov.b * inv, cov.a * inv), det))
}

/// Projects any symmetric matrix onto the set accepted by
/// [`is_positive_definite`] with the same `eps`.
///
/// Inputs that already pass the check are returned unchanged, so the map is
/// idempotent. Otherwise non-finite entries are replaced (diagonal by `eps`,
/// off-diagonal by 0), the diagonal is clamped to `eps`, the off-diagonal
/// magnitude is capped at `(1 - eps) * sqrt(a * c)`, and if the determinant is
/// still below `eps` both diagonal entries are raised by the same amount.
pub fn repair_covariance<T: Real>(cov: CovUT<T>, eps: T) -> CovUT<T> {
    if is_positive_definite(cov, eps) {
        return cov;
    }
    let finite_or = |v: T, alt: T| if v.is_finite() { v } else { alt };
    let a = finite_or(cov.a, eps).max(eps);
    let c = finite_or(cov.c, eps).max(eps);
    let cap = (T::one() - eps) * (a * c).sqrt();
    let b = finite_or(cov.b, T::zero());
    let b = b.abs().min(cap).copysign(b);
    let mut out = CovUT::new(a, b, c);
    if is_positive_definite(out, eps) {
        return out;
    }

    // (a + d)(c + d) - b² = eps
    let two = T::lit(2.0);
    let sum = a + c;
    let disc = sum * sum + T::lit(4.0) * (eps - out.det());
    let mut delta = ((disc.sqrt() - sum) / two).max(T::zero());
    for _ in 0..64 {
        out = CovUT::new(a + delta, b, c + delta);
        if is_positive_definite(out, eps) {
            return out;
        }
        delta = delta * T::lit(1.0 + 1e-4) + eps * T::lit(1e-6);
    }
    // Only reachable when products overflow.
    let m = a.max(c).max(T::one());
    CovUT::new(m, T::zero(), m)
}

/// A single Gaussian, detached from its cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian2D<T> {
    pub mu: [T; 2],
    pub cov: CovUT<T>,
    pub color: Vec<T>,
}

impl<T: Real> Gaussian2D<T> {
    pub fn new(mu: [T; 2], cov: CovUT<T>, color: Vec<T>) -> Self {
        Self { mu, cov, color }
    }
}

/// `σ = ½ dᵀ Σ⁻¹ d` with `d = p - μ`. Negative when `Σ` is indefinite.
pub fn sigma<T: Real>(g: &Gaussian2D<T>, p: [T; 2]) -> Result<T> {
    let (inv, _) = invert_cov(g.cov)?;
    Ok(quad_form(inv, p[0] - g.mu[0], p[1] - g.mu[1]))
}

#[inline(always)]
pub(crate) fn quad_form<T: Real>(inv: CovUT<T>, dx: T, dy: T) -> T {
    T::lit(0.5) * (inv.a * dx * dx + T::lit(2.0) * inv.b * dx * dy + inv.c * dy * dy)
}

/// Structure-of-arrays Gaussian set. All arrays share the same length; colors
/// are stored flat, `channels` entries per Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud<T> {
    channels: usize,
    mu: Vec<[T; 2]>,
    cov: Vec<CovUT<T>>,
    color: Vec<T>,
}

impl<T: Real> GaussianCloud<T> {
    pub fn new(channels: usize) -> Self {
        Self::with_capacity(channels, 0)
    }

    pub fn with_capacity(channels: usize, n: usize) -> Self {
        Self {
            channels,
            mu: Vec::with_capacity(n),
            cov: Vec::with_capacity(n),
            color: Vec::with_capacity(n * channels),
        }
    }

    pub fn from_parts(
        channels: usize,
        mu: Vec<[T; 2]>,
        cov: Vec<CovUT<T>>,
        color: Vec<T>,
    ) -> Result<Self> {
        let n = mu.len();
        if cov.len() != n {
            return Err(Error::dims(format!("{n} covariances"), cov.len()));
        }
        let want = n
            .checked_mul(channels)
            .ok_or(Error::LengthOverflow("color array"))?;
        if color.len() != want {
            return Err(Error::dims(format!("{want} color entries"), color.len()));
        }
        Ok(Self {
            channels,
            mu,
            cov,
            color,
        })
    }

    pub fn push(&mut self, g: Gaussian2D<T>) -> Result<()> {
        if g.color.len() != self.channels {
            return Err(Error::dims(
                format!("{} color channels", self.channels),
                g.color.len(),
            ));
        }
        self.mu.push(g.mu);
        self.cov.push(g.cov);
        self.color.extend_from_slice(&g.color);
        Ok(())
    }

    /// Concatenation, `self` first.
    pub fn union(&self, other: &Self) -> Result<Self> {
        if other.channels != self.channels {
            return Err(Error::dims(self.channels, other.channels));
        }
        let mut out = self.clone();
        out.mu.extend_from_slice(&other.mu);
        out.cov.extend_from_slice(&other.cov);
        out.color.extend_from_slice(&other.color);
        Ok(out)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.mu.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn gaussian(&self, i: usize) -> Gaussian2D<T> {
        Gaussian2D::new(self.mu[i], self.cov[i], self.color_of(i).to_vec())
    }

    #[inline]
    pub fn color_of(&self, i: usize) -> &[T] {
        &self.color[i * self.channels..(i + 1) * self.channels]
    }

    pub fn mu(&self) -> &[[T; 2]] {
        &self.mu
    }

    pub fn cov(&self) -> &[CovUT<T>] {
        &self.cov
    }

    pub fn color(&self) -> &[T] {
        &self.color
    }

    pub fn mu_mut(&mut self) -> &mut [[T; 2]] {
        &mut self.mu
    }

    pub fn cov_mut(&mut self) -> &mut [CovUT<T>] {
        &mut self.cov
    }

    pub fn color_mut(&mut self) -> &mut [T] {
        &mut self.color
    }

    /// Applies [`repair_covariance`] to every Gaussian.
    pub fn repair(&mut self, eps: T) {
        for cov in &mut self.cov {
            *cov = repair_covariance(*cov, eps);
        }
    }

    pub fn cast<U: Real>(&self) -> GaussianCloud<U> {
        let f = |v: T| U::lit(v.to_f64_lossy());
        GaussianCloud {
            channels: self.channels,
            mu: self.mu.iter().map(|m| [f(m[0]), f(m[1])]).collect(),
            cov: self.cov.iter().map(CovUT::cast).collect(),
            color: self.color.iter().copied().map(f).collect(),
        }
    }
}
