//! Hyperbolic codebooks, attention-based soft quantization and hard encoding.
//!
//! Each subspace `m` owns `K` codewords on `H^d_{θ_m}`. Soft quantization weights
//! the codewords by a softmax over negative squared Lorentzian distances and
//! returns the closed-form minimizer of the weighted squared distance, which is
//! the weighted coordinate sum rescaled back onto the hyperboloid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{self, distance_raw, inner, sq_distance_raw, ManifoldPoint, ProductPoint};
use crate::scalar::{lit, to_f64, Scalar};

/// Default temperature of the codebook attention softmax.
pub const DEFAULT_ATTENTION_TAU: f64 = 0.2;

/// Standard deviation of the tangent-space Gaussian used to initialize codewords.
pub const CODEWORD_INIT_STD: f64 = 0.05;

const DEGENERATE_NORM: f64 = 1e-15;

/// `K` codewords on one Lorentz manifold, stored row-major as `K × (d+1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubCodebook<T> {
    index: usize,
    curvature: T,
    num_codewords: usize,
    dim: usize,
    coords: Vec<T>,
}

/// Product of `M` sub-codebooks sharing `K` and `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T> {
    subs: Vec<SubCodebook<T>>,
    tau: T,
}

/// One codeword index per subspace.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct QuantCode {
    indices: Vec<u32>,
    num_codewords: usize,
}

impl<T: Scalar> SubCodebook<T> {
    /// Builds a sub-codebook from codeword points, which must all lie on `H^d_θ`.
    pub fn new(index: usize, curvature: T, codewords: Vec<ManifoldPoint<T>>) -> Result<Self> {
        if codewords.is_empty() {
            return Err(Error::invalid("sub-codebook needs at least one codeword"));
        }
        let width = codewords[0].coords().len();
        let mut coords = Vec::with_capacity(width * codewords.len());
        for (k, c) in codewords.iter().enumerate() {
            if c.coords().len() != width {
                return Err(Error::invalid(format!("codeword {k} has the wrong dimension")));
            }
            if c.curvature() != curvature {
                return Err(Error::invalid(format!("codeword {k} has the wrong curvature")));
            }
            if !c.is_on_manifold() {
                return Err(Error::invalid(format!(
                    "codeword {k} of subspace {index} is off the manifold"
                )));
            }
            coords.extend_from_slice(c.coords());
        }
        Ok(SubCodebook {
            index,
            curvature,
            num_codewords: codewords.len(),
            dim: width - 1,
            coords,
        })
    }

    /// Wraps flat `K × (d+1)` coordinates without validation.
    pub fn from_raw(index: usize, curvature: T, dim: usize, coords: Vec<T>) -> Self {
        debug_assert_eq!(coords.len() % (dim + 1), 0);
        SubCodebook {
            index,
            curvature,
            num_codewords: coords.len() / (dim + 1),
            dim,
            coords,
        }
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn curvature(&self) -> T {
        self.curvature
    }

    pub fn num_codewords(&self) -> usize {
        self.num_codewords
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn codeword(&self, k: usize) -> &[T] {
        let w = self.dim + 1;
        &self.coords[k * w..(k + 1) * w]
    }

    pub fn codeword_mut(&mut self, k: usize) -> &mut [T] {
        let w = self.dim + 1;
        &mut self.coords[k * w..(k + 1) * w]
    }

    pub fn codeword_point(&self, k: usize) -> ManifoldPoint<T> {
        ManifoldPoint::from_raw(self.codeword(k).to_vec(), self.curvature)
    }

    pub fn coords(&self) -> &[T] {
        &self.coords
    }

    pub fn coords_mut(&mut self) -> &mut [T] {
        &mut self.coords
    }

    /// Moves every codeword to a new curvature, recomputing time coordinates.
    pub fn set_curvature(&mut self, curvature: T) {
        self.curvature = curvature;
        self.reproject();
    }

    /// Recomputes every codeword's time coordinate from its spatial part.
    pub fn reproject(&mut self) {
        let (w, theta) = (self.dim + 1, self.curvature);
        for c in self.coords.chunks_exact_mut(w) {
            c[0] = geometry::time_coordinate(&c[1..], theta);
        }
    }

    pub fn all_on_manifold(&self) -> bool {
        (0..self.num_codewords).all(|k| self.codeword_point(k).is_on_manifold())
    }

    fn check_point(&self, h: &ManifoldPoint<T>) -> Result<()> {
        if h.coords().len() != self.dim + 1 {
            return Err(Error::invalid(format!(
                "point has dimension {}, subspace {} has {}",
                h.dim(),
                self.index,
                self.dim
            )));
        }
        if h.curvature() != self.curvature {
            return Err(Error::invalid(format!(
                "point curvature {} differs from subspace {} curvature {}",
                h.curvature(),
                self.index,
                self.curvature
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> Codebook<T> {
    pub fn new(subs: Vec<SubCodebook<T>>, tau: T) -> Result<Self> {
        check_tau(tau)?;
        let first = subs
            .first()
            .ok_or_else(|| Error::invalid("codebook needs at least one subspace"))?;
        let (k, d) = (first.num_codewords, first.dim);
        for (m, s) in subs.iter().enumerate() {
            if s.num_codewords != k || s.dim != d {
                return Err(Error::invalid(format!(
                    "sub-codebook {m} has shape {}x{}, expected {k}x{d}",
                    s.num_codewords, s.dim
                )));
            }
            if s.index != m {
                return Err(Error::invalid(format!("sub-codebook {m} carries index {}", s.index)));
            }
        }
        Ok(Codebook { subs, tau })
    }

    pub fn subs(&self) -> &[SubCodebook<T>] {
        &self.subs
    }

    pub fn subs_mut(&mut self) -> &mut [SubCodebook<T>] {
        &mut self.subs
    }

    pub fn sub(&self, m: usize) -> &SubCodebook<T> {
        &self.subs[m]
    }

    pub fn num_subspaces(&self) -> usize {
        self.subs.len()
    }

    pub fn num_codewords(&self) -> usize {
        self.subs[0].num_codewords
    }

    pub fn dim(&self) -> usize {
        self.subs[0].dim
    }

    pub fn tau(&self) -> T {
        self.tau
    }

    pub fn set_tau(&mut self, tau: T) -> Result<()> {
        check_tau(tau)?;
        self.tau = tau;
        Ok(())
    }

    pub fn curvatures(&self) -> Vec<T> {
        self.subs.iter().map(|s| s.curvature).collect()
    }

    /// Bits per encoded item, `M · log2 K`.
    pub fn code_bits(&self) -> usize {
        self.num_subspaces() * bits_per_index(self.num_codewords())
    }

    fn check_product(&self, h: &ProductPoint<T>) -> Result<()> {
        if h.num_parts() != self.subs.len() {
            return Err(Error::invalid(format!(
                "product point has {} parts, codebook has {} subspaces",
                h.num_parts(),
                self.subs.len()
            )));
        }
        for (p, s) in h.parts().iter().zip(&self.subs) {
            s.check_point(p)?;
        }
        Ok(())
    }
}

impl QuantCode {
    pub fn new(indices: Vec<u32>, num_codewords: usize) -> Result<Self> {
        if !num_codewords.is_power_of_two() {
            return Err(Error::invalid(format!(
                "codeword count {num_codewords} is not a power of two"
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= num_codewords) {
            return Err(Error::invalid(format!(
                "code index {bad} out of range for K = {num_codewords}"
            )));
        }
        Ok(QuantCode {
            indices,
            num_codewords,
        })
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn num_codewords(&self) -> usize {
        self.num_codewords
    }

    /// Total bit width `B = M · log2 K`.
    pub fn bits(&self) -> usize {
        self.indices.len() * bits_per_index(self.num_codewords)
    }
}

/// `log2 K` for a power-of-two `K`.
pub fn bits_per_index(num_codewords: usize) -> usize {
    debug_assert!(num_codewords.is_power_of_two());
    num_codewords.trailing_zeros() as usize
}

fn check_tau<T: Scalar>(tau: T) -> Result<()> {
    if tau > T::zero() && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature must be positive, got {tau}")))
    }
}

/// Writes the softmax of `logits` into `out` using max subtraction.
pub fn softmax_into<T: Scalar>(logits: &[T], out: &mut [T]) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Attention weights and closed-form aggregate for one subspace.
///
/// `weights` receives the K softmax weights, `sum` the weighted coordinate sum
/// `s`, and `out` the normalized point `s / (√θ |‖s‖_L|)`. Returns `<s,s>_L`.
pub fn soft_quantize_raw<T: Scalar>(
    h: &[T],
    cb: &SubCodebook<T>,
    tau: T,
    weights: &mut [T],
    sum: &mut [T],
    out: &mut [T],
) -> Result<T> {
    for (k, w) in weights.iter_mut().enumerate() {
        *w = -sq_distance_raw(cb.codeword(k), h) / tau;
    }
    let logits = weights.to_vec();
    softmax_into(&logits, weights);
    aggregate_raw(cb, weights, sum, out)
}

/// Normalizes `Σ w_k c_k` back onto the manifold. Returns `<s,s>_L`.
pub fn aggregate_raw<T: Scalar>(
    cb: &SubCodebook<T>,
    weights: &[T],
    sum: &mut [T],
    out: &mut [T],
) -> Result<T> {
    sum.iter_mut().for_each(|x| *x = T::zero());
    for (k, &w) in weights.iter().enumerate() {
        for (s, &c) in sum.iter_mut().zip(cb.codeword(k)) {
            *s += w * c;
        }
    }
    let n2 = inner(sum, sum);
    if !(n2.abs() >= lit(DEGENERATE_NORM)) {
        return Err(Error::DegenerateAggregation(to_f64(n2.abs())));
    }
    let mut scale = (cb.curvature.sqrt() * n2.abs().sqrt()).recip();
    if sum[0] < T::zero() {
        scale = -scale;
    }
    for (o, &s) in out.iter_mut().zip(sum.iter()) {
        *o = s * scale;
    }
    Ok(n2)
}

/// Softmax over codewords of `-d²_L(c_k, h) / τ`.
pub fn attention_weights<T: Scalar>(
    h: &ManifoldPoint<T>,
    cb: &SubCodebook<T>,
    tau: T,
) -> Result<Vec<T>> {
    check_tau(tau)?;
    cb.check_point(h)?;
    let logits: Vec<T> = (0..cb.num_codewords)
        .map(|k| -sq_distance_raw(cb.codeword(k), h.coords()) / tau)
        .collect();
    let mut w = vec![T::zero(); logits.len()];
    softmax_into(&logits, &mut w);
    Ok(w)
}

/// Closed-form weighted hyperbolic centroid of the codewords under attention weights.
pub fn soft_quantize_sub<T: Scalar>(
    h: &ManifoldPoint<T>,
    cb: &SubCodebook<T>,
    tau: T,
) -> Result<ManifoldPoint<T>> {
    check_tau(tau)?;
    cb.check_point(h)?;
    let w = cb.dim + 1;
    let mut weights = vec![T::zero(); cb.num_codewords];
    let mut sum = vec![T::zero(); w];
    let mut out = vec![T::zero(); w];
    soft_quantize_raw(h.coords(), cb, tau, &mut weights, &mut sum, &mut out)?;
    Ok(ManifoldPoint::from_raw(out, cb.curvature))
}

/// Index of the codeword nearest to `h`; ties go to the smallest index.
pub fn nearest_codeword<T: Scalar>(h: &[T], cb: &SubCodebook<T>) -> usize {
    let mut best = 0;
    let mut best_d = T::infinity();
    for k in 0..cb.num_codewords {
        let d = distance_raw(cb.codeword(k), h, cb.curvature);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

/// Hard assignment to the nearest codeword under the Lorentzian distance.
pub fn hard_quantize_sub<T: Scalar>(h: &ManifoldPoint<T>, cb: &SubCodebook<T>) -> Result<usize> {
    cb.check_point(h)?;
    Ok(nearest_codeword(h.coords(), cb))
}

/// Soft quantization applied independently in every subspace with the codebook's τ.
pub fn soft_quantize<T: Scalar>(h: &ProductPoint<T>, cb: &Codebook<T>) -> Result<ProductPoint<T>> {
    cb.check_product(h)?;
    let parts = h
        .parts()
        .iter()
        .zip(&cb.subs)
        .map(|(p, s)| soft_quantize_sub(p, s, cb.tau))
        .collect::<Result<Vec<_>>>()?;
    ProductPoint::new(parts)
}

/// Hard-quantizes every subspace.
pub fn encode<T: Scalar>(h: &ProductPoint<T>, cb: &Codebook<T>) -> Result<QuantCode> {
    cb.check_product(h)?;
    let indices = h
        .parts()
        .iter()
        .zip(&cb.subs)
        .map(|(p, s)| nearest_codeword(p.coords(), s) as u32)
        .collect();
    QuantCode::new(indices, cb.num_codewords())
}

/// The tuple of codewords a code refers to.
pub fn decode<T: Scalar>(code: &QuantCode, cb: &Codebook<T>) -> Result<ProductPoint<T>> {
    if code.indices.len() != cb.num_subspaces() || code.num_codewords != cb.num_codewords() {
        return Err(Error::invalid("code shape does not match the codebook"));
    }
    let parts = code
        .indices
        .iter()
        .zip(&cb.subs)
        .map(|(&k, s)| s.codeword_point(k as usize))
        .collect();
    ProductPoint::new(parts)
}

/// Random codebook: each codeword is the exponential map at the origin of a
/// Gaussian tangent vector with spatial std 0.05.
pub fn init_codebooks<T: Scalar>(
    num_subspaces: usize,
    num_codewords: usize,
    dim: usize,
    theta: T,
    seed: u64,
) -> Result<Codebook<T>> {
    if !num_codewords.is_power_of_two() {
        return Err(Error::invalid(format!(
            "codeword count {num_codewords} is not a power of two"
        )));
    }
    if dim < 2 {
        return Err(Error::invalid("codebook dimension must be at least 2"));
    }
    if num_subspaces == 0 {
        return Err(Error::invalid("codebook needs at least one subspace"));
    }
    geometry::origin(dim, theta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = CODEWORD_INIT_STD;
    let w = dim + 1;
    let mut subs = Vec::with_capacity(num_subspaces);
    let mut spatial = vec![T::zero(); dim];
    for m in 0..num_subspaces {
        let mut coords = vec![T::zero(); num_codewords * w];
        for c in coords.chunks_exact_mut(w) {
            for x in spatial.iter_mut() {
                let g: f64 = StandardNormal.sample(&mut rng);
                *x = lit(std * g);
            }
            geometry::exp_origin_raw(&spatial, theta, c);
        }
        subs.push(SubCodebook::from_raw(m, theta, dim, coords));
    }
    Codebook::new(subs, lit(DEFAULT_ATTENTION_TAU))
}
