//! Lorentz-model primitives for a single hyperboloid and for a product of hyperboloids.
//!
//! A manifold of curvature `-θ` (θ > 0) is the upper sheet
//! `{x ∈ R^{d+1} : <x,x>_L = -1/θ, x_0 > 0}` with the Lorentzian inner product
//! `<a,b>_L = -a_0 b_0 + Σ_{i≥1} a_i b_i`. Coordinate 0 is the time coordinate,
//! the remaining `d` are spatial.
//!
//! The slice-level kernels (`inner`, `distance_raw`, ...) skip shape checks and are
//! used on hot paths; the typed wrappers validate their inputs.

use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, Scalar};

/// Norm below which a tangent vector is treated as zero by the exponential map.
const EXP_ZERO_NORM: f64 = 1e-12;

/// Default bound on the spatial norm of a tangent vector at the origin.
pub const DEFAULT_CLIP_NORM: f64 = 1.5;

/// A point on one Lorentz manifold.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifoldPoint<T> {
    coords: Vec<T>,
    curvature: T,
}

/// A vector in the tangent space of some manifold point.
///
/// The base point is not stored; operations that consume a tangent vector take
/// the base point explicitly and check tangency there.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector<T> {
    coords: Vec<T>,
}

/// A point on the product manifold `H^d_{θ_1} × … × H^d_{θ_M}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProductPoint<T> {
    parts: Vec<ManifoldPoint<T>>,
}

/// Lorentzian inner product without shape checks.
#[inline]
pub fn inner<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = -(a[0] * b[0]);
    for i in 1..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// Lorentzian inner product `-a_0 b_0 + Σ a_i b_i`.
pub fn lorentz_inner<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "lorentz_inner: length mismatch {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::invalid("lorentz_inner: vectors need at least 2 coordinates"));
    }
    Ok(inner(a, b))
}

/// `<a-b, a-b>_L` from the coordinate difference. Exactly zero for identical
/// inputs; on the manifold it equals `-2/θ - 2<a,b>_L`.
#[inline]
pub fn sq_distance_raw<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let d0 = a[0] - b[0];
    let mut acc = -(d0 * d0);
    for i in 1..a.len() {
        let di = a[i] - b[i];
        acc += di * di;
    }
    acc
}

/// Geodesic distance from the squared chord `q = <a-b, a-b>_L`:
/// `acosh(1 + θq/2) / √θ`, which equals `acosh(-θ<a,b>_L) / √θ` on the manifold.
/// The acosh argument is clamped to `[1, ∞)` and evaluated as
/// `ln_1p(x + sqrt(x(x+2)))` to keep precision near coincident points.
#[inline]
pub fn distance_from_sq<T: Scalar>(q: T, theta: T) -> T {
    let x = (theta * q / lit(2.0)).max(T::zero());
    (x + (x * (x + lit(2.0))).sqrt()).ln_1p() / theta.sqrt()
}

/// Geodesic distance on the manifold of curvature `-θ`.
#[inline]
pub fn distance_raw<T: Scalar>(a: &[T], b: &[T], theta: T) -> T {
    distance_from_sq(sq_distance_raw(a, b), theta)
}

/// Time coordinate that places `spatial` on the manifold of curvature `-θ`.
#[inline]
pub fn time_coordinate<T: Scalar>(spatial: &[T], theta: T) -> T {
    let sq: T = spatial.iter().map(|&x| x * x).sum();
    (theta.recip() + sq).sqrt()
}

/// Exponential map at the origin for a tangent vector whose spatial part is
/// `spatial` (the time component of a tangent vector at the origin is zero).
/// Writes `d+1` coordinates into `out`.
pub fn exp_origin_raw<T: Scalar>(spatial: &[T], theta: T, out: &mut [T]) {
    debug_assert_eq!(out.len(), spatial.len() + 1);
    let norm = spatial.iter().map(|&x| x * x).sum::<T>().sqrt();
    let sqrt_theta = theta.sqrt();
    if norm < lit(EXP_ZERO_NORM) {
        out[0] = sqrt_theta.recip();
        for (o, _) in out[1..].iter_mut().zip(spatial) {
            *o = T::zero();
        }
        return;
    }
    let a = sqrt_theta * norm;
    out[0] = a.cosh() / sqrt_theta;
    let scale = a.sinh() / a;
    for (o, &s) in out[1..].iter_mut().zip(spatial) {
        *o = scale * s;
    }
}

/// Rescales `spatial` in place so its Euclidean norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_spatial<T: Scalar>(spatial: &mut [T], max_norm: T) -> T {
    let norm = spatial.iter().map(|&x| x * x).sum::<T>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for x in spatial.iter_mut() {
            *x *= s;
        }
    }
    norm
}

impl<T: Scalar> ManifoldPoint<T> {
    /// Validates the hyperboloid constraint and upper-sheet condition.
    pub fn new(coords: Vec<T>, curvature: T) -> Result<Self> {
        check_curvature(curvature)?;
        if coords.len() < 2 {
            return Err(Error::invalid("manifold point needs at least 2 coordinates"));
        }
        let p = ManifoldPoint { coords, curvature };
        if !p.is_on_manifold() {
            return Err(Error::invalid(format!(
                "point violates <x,x>_L = -1/θ (residual {:e})",
                to_f64(p.residual())
            )));
        }
        Ok(p)
    }

    /// Lifts spatial coordinates onto the manifold by solving for the time coordinate.
    pub fn from_spatial(spatial: &[T], curvature: T) -> Result<Self> {
        check_curvature(curvature)?;
        if spatial.is_empty() {
            return Err(Error::invalid("manifold point needs at least 1 spatial coordinate"));
        }
        let mut coords = Vec::with_capacity(spatial.len() + 1);
        coords.push(time_coordinate(spatial, curvature));
        coords.extend_from_slice(spatial);
        Ok(ManifoldPoint { coords, curvature })
    }

    /// Wraps coordinates without validating them.
    pub fn from_raw(coords: Vec<T>, curvature: T) -> Self {
        ManifoldPoint { coords, curvature }
    }

    pub fn coords(&self) -> &[T] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<T> {
        self.coords
    }

    pub fn curvature(&self) -> T {
        self.curvature
    }

    /// Intrinsic dimension `d` (the ambient vector has `d+1` coordinates).
    pub fn dim(&self) -> usize {
        self.coords.len() - 1
    }

    /// `<x,x>_L + 1/θ`.
    pub fn residual(&self) -> T {
        inner(&self.coords, &self.coords) + self.curvature.recip()
    }

    /// Checks `<x,x>_L = -1/θ` to the scalar type's relative tolerance and `x_0 > 0`.
    pub fn is_on_manifold(&self) -> bool {
        let r = self.residual();
        r.is_finite()
            && r.abs() <= T::manifold_tol() * self.curvature.recip()
            && self.coords[0] > T::zero()
    }

    /// Recomputes the time coordinate from the spatial ones.
    pub fn reproject(&mut self) {
        self.coords[0] = time_coordinate(&self.coords[1..], self.curvature);
    }

    /// Moves the point to a new curvature keeping its spatial coordinates.
    pub fn set_curvature(&mut self, curvature: T) {
        self.curvature = curvature;
        self.reproject();
    }
}

impl<T: Scalar> TangentVector<T> {
    pub fn from_coords(coords: Vec<T>) -> Self {
        TangentVector { coords }
    }

    pub fn coords(&self) -> &[T] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<T> {
        self.coords
    }

    /// `sqrt(<v,v>_L)`; tangent vectors at on-manifold points are spacelike so the
    /// radicand is non-negative up to rounding, which is clamped away.
    pub fn lorentz_norm(&self) -> T {
        inner(&self.coords, &self.coords).max(T::zero()).sqrt()
    }
}

impl<T: Scalar> ProductPoint<T> {
    pub fn new(parts: Vec<ManifoldPoint<T>>) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::invalid("product point needs at least one part"));
        }
        let len = parts[0].coords.len();
        if parts.iter().any(|p| p.coords.len() != len) {
            return Err(Error::invalid("product point parts must share a dimension"));
        }
        Ok(ProductPoint { parts })
    }

    pub fn parts(&self) -> &[ManifoldPoint<T>] {
        &self.parts
    }

    pub fn into_parts(self) -> Vec<ManifoldPoint<T>> {
        self.parts
    }

    pub fn num_parts(&self) -> usize {
        self.parts.len()
    }

    pub fn curvatures(&self) -> Vec<T> {
        self.parts.iter().map(|p| p.curvature).collect()
    }

    pub fn is_on_manifold(&self) -> bool {
        self.parts.iter().all(ManifoldPoint::is_on_manifold)
    }
}

fn check_curvature<T: Scalar>(theta: T) -> Result<()> {
    if theta > T::zero() && theta.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "curvature parameter must be positive and finite, got {}",
            theta
        )))
    }
}

fn check_same_manifold<T: Scalar>(a: &ManifoldPoint<T>, b: &ManifoldPoint<T>) -> Result<()> {
    if a.curvature != b.curvature {
        return Err(Error::invalid(format!(
            "curvature mismatch: {} vs {}",
            a.curvature, b.curvature
        )));
    }
    if a.coords.len() != b.coords.len() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Geodesic distance `sqrt(1/θ) · acosh(-θ <a,b>_L)`, evaluated through the
/// squared chord (see [`distance_from_sq`]).
pub fn lorentz_distance<T: Scalar>(a: &ManifoldPoint<T>, b: &ManifoldPoint<T>) -> Result<T> {
    check_same_manifold(a, b)?;
    Ok(distance_raw(&a.coords, &b.coords, a.curvature))
}

/// Squared Lorentzian distance `<a-b, a-b>_L = -2/θ - 2<a,b>_L`.
pub fn sq_lorentz_distance<T: Scalar>(a: &ManifoldPoint<T>, b: &ManifoldPoint<T>) -> Result<T> {
    check_same_manifold(a, b)?;
    // clamp: rounding can leave a tiny negative chord for nearby points
    Ok(sq_distance_raw(&a.coords, &b.coords).max(T::zero()))
}

/// The hyperbolic origin `(sqrt(1/θ), 0, …, 0)` of `H^d_θ`.
pub fn origin<T: Scalar>(d: usize, theta: T) -> Result<ManifoldPoint<T>> {
    check_curvature(theta)?;
    if d < 1 {
        return Err(Error::invalid("origin: dimension must be at least 1"));
    }
    let mut coords = vec![T::zero(); d + 1];
    coords[0] = theta.recip().sqrt();
    Ok(ManifoldPoint {
        coords,
        curvature: theta,
    })
}

/// Orthogonal projection of an ambient vector onto the tangent space at `p`:
/// `u + θ p <p,u>_L`.
pub fn tangent_project<T: Scalar>(p: &ManifoldPoint<T>, u: &[T]) -> Result<TangentVector<T>> {
    if u.len() != p.coords.len() {
        return Err(Error::invalid(format!(
            "tangent_project: vector has {} coordinates, point has {}",
            u.len(),
            p.coords.len()
        )));
    }
    let s = p.curvature * inner(&p.coords, u);
    let coords = u
        .iter()
        .zip(&p.coords)
        .map(|(&ui, &pi)| ui + s * pi)
        .collect();
    Ok(TangentVector { coords })
}

/// Exponential map `cosh(√θ‖v‖_L) p + sinh(√θ‖v‖_L)/(√θ‖v‖_L) v`.
pub fn exp_map<T: Scalar>(p: &ManifoldPoint<T>, v: &TangentVector<T>) -> Result<ManifoldPoint<T>> {
    if v.coords.len() != p.coords.len() {
        return Err(Error::invalid("exp_map: tangent vector dimension mismatch"));
    }
    let ip = inner(&v.coords, &p.coords);
    if ip.abs() > T::tangent_tol() {
        return Err(Error::invalid(format!(
            "exp_map: vector is not tangent at the base point (<v,p>_L = {:e})",
            to_f64(ip)
        )));
    }
    let norm = v.lorentz_norm();
    if norm < lit(EXP_ZERO_NORM) {
        return Ok(p.clone());
    }
    let a = p.curvature.sqrt() * norm;
    let (ch, sh_over) = (a.cosh(), a.sinh() / a);
    let coords = p
        .coords
        .iter()
        .zip(&v.coords)
        .map(|(&pi, &vi)| ch * pi + sh_over * vi)
        .collect();
    let mut out = ManifoldPoint {
        coords,
        curvature: p.curvature,
    };
    out.reproject();
    Ok(out)
}

/// Clips a tangent vector at the origin so the Euclidean norm of its last `d`
/// coordinates is at most `max_norm`.
pub fn clip_tangent<T: Scalar>(v: &TangentVector<T>, max_norm: T) -> TangentVector<T> {
    let mut coords = v.coords.clone();
    clip_spatial(&mut coords[1..], max_norm);
    TangentVector { coords }
}

/// Sum of the per-part Lorentzian distances.
pub fn product_distance<T: Scalar>(a: &ProductPoint<T>, b: &ProductPoint<T>) -> Result<T> {
    if a.parts.len() != b.parts.len() {
        return Err(Error::invalid(format!(
            "product_distance: {} parts vs {}",
            a.parts.len(),
            b.parts.len()
        )));
    }
    let mut total = T::zero();
    for (pa, pb) in a.parts.iter().zip(&b.parts) {
        total += lorentz_distance(pa, pb)?;
    }
    Ok(total)
}
