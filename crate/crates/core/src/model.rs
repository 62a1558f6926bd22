//! The trainable model: a linear projector into `M·(d+1)` ambient coordinates,
//! per-subspace curvatures, and the hyperbolic codebook. Forward passes keep the
//! intermediates needed for the reverse pass in [`crate::objective`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{self, ManifoldPoint, ProductPoint, DEFAULT_CLIP_NORM};
use crate::quantizer::{self, Codebook};
use crate::scalar::{lit, Scalar};

/// Dense affine map `z = W x + b`, `W` stored row-major `output_dim × input_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector<T> {
    input_dim: usize,
    output_dim: usize,
    weights: Vec<T>,
    bias: Vec<T>,
}

/// Projector, codebook and per-subspace curvature (held by the codebook).
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub projector: Projector<T>,
    pub codebook: Codebook<T>,
    clip_norm: T,
}

impl<T: Scalar> Projector<T> {
    pub fn new(input_dim: usize, output_dim: usize, weights: Vec<T>, bias: Vec<T>) -> Result<Self> {
        if weights.len() != input_dim * output_dim || bias.len() != output_dim {
            return Err(Error::invalid(format!(
                "projector {output_dim}x{input_dim} got {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        Ok(Projector {
            input_dim,
            output_dim,
            weights,
            bias,
        })
    }

    /// Gaussian weights with the given std, zero bias.
    pub fn random(input_dim: usize, output_dim: usize, std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..input_dim * output_dim)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                lit(std * g)
            })
            .collect();
        Projector {
            input_dim,
            output_dim,
            weights,
            bias: vec![T::zero(); output_dim],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [T] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [T] {
        &mut self.bias
    }

    pub fn apply_into(&self, x: &[T], out: &mut [T]) {
        for (r, o) in out.iter_mut().enumerate() {
            let w = &self.weights[r * self.input_dim..(r + 1) * self.input_dim];
            let mut acc = self.bias[r];
            for (&wi, &xi) in w.iter().zip(x) {
                acc += wi * xi;
            }
            *o = acc;
        }
    }
}

/// Intermediates of one view's forward pass.
#[derive(Clone, Debug)]
pub struct ViewForward<T> {
    /// Projector output, `M·(d+1)`.
    pub z: Vec<T>,
    /// Spatial norm of each segment before clipping.
    pub pre_clip_norm: Vec<T>,
    /// Clipped tangent vectors at the origins, `M·(d+1)` with zero time coordinates.
    pub tangent: Vec<T>,
    /// Continuous hyperbolic embedding, `M·(d+1)`.
    pub h: Vec<T>,
    /// Attention weights, `M·K`.
    pub weights: Vec<T>,
    /// Un-normalized weighted codeword sums, `M·(d+1)`.
    pub sum: Vec<T>,
    /// `<sum, sum>_L` per subspace.
    pub sum_norm2: Vec<T>,
    /// Soft-quantized embedding, `M·(d+1)`.
    pub q: Vec<T>,
}

impl<T: Scalar> Model<T> {
    /// Random projector (std `init_std`, zero bias) and codebook initialized from `seed`.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        input_dim: usize,
        num_subspaces: usize,
        num_codewords: usize,
        dim: usize,
        theta: T,
        tau: T,
        init_std: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut codebook =
            quantizer::init_codebooks(num_subspaces, num_codewords, dim, theta, seed ^ 0x9e37_79b9_7f4a_7c15)?;
        codebook.set_tau(tau)?;
        let projector = Projector::random(input_dim, num_subspaces * (dim + 1), init_std, seed);
        Ok(Model {
            projector,
            codebook,
            clip_norm: lit(DEFAULT_CLIP_NORM),
        })
    }

    pub fn from_parts(projector: Projector<T>, codebook: Codebook<T>, clip_norm: T) -> Result<Self> {
        let width = codebook.num_subspaces() * (codebook.dim() + 1);
        if projector.output_dim != width {
            return Err(Error::invalid(format!(
                "projector outputs {} coordinates, codebook expects {width}",
                projector.output_dim
            )));
        }
        if !(clip_norm > T::zero()) {
            return Err(Error::invalid("clip norm must be positive"));
        }
        Ok(Model {
            projector,
            codebook,
            clip_norm,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.projector.input_dim
    }

    pub fn num_subspaces(&self) -> usize {
        self.codebook.num_subspaces()
    }

    pub fn subspace_dim(&self) -> usize {
        self.codebook.dim()
    }

    /// `M·(d+1)`.
    pub fn embedding_width(&self) -> usize {
        self.projector.output_dim
    }

    pub fn clip_norm(&self) -> T {
        self.clip_norm
    }

    pub fn curvatures(&self) -> Vec<T> {
        self.codebook.curvatures()
    }

    fn check_input(&self, x: &[T]) -> Result<()> {
        if x.len() != self.projector.input_dim {
            return Err(Error::invalid(format!(
                "feature vector has {} dimensions, model expects {}",
                x.len(),
                self.projector.input_dim
            )));
        }
        Ok(())
    }

    /// Projector → tangent projection at the origins → clip → exponential map.
    /// Returns the clipped tangent concatenation and the hyperbolic embedding.
    pub fn embed(&self, x: &[T]) -> Result<(Vec<T>, ProductPoint<T>)> {
        self.check_input(x)?;
        let mut cache = self.empty_cache();
        self.embed_into(x, &mut cache);
        let w = self.subspace_dim() + 1;
        let parts = cache
            .h
            .chunks_exact(w)
            .zip(self.codebook.subs())
            .map(|(h, s)| ManifoldPoint::from_raw(h.to_vec(), s.curvature()))
            .collect();
        Ok((cache.tangent, ProductPoint::new(parts)?))
    }

    /// Embedding followed by soft quantization, keeping every intermediate.
    pub fn forward(&self, x: &[T]) -> Result<ViewForward<T>> {
        self.check_input(x)?;
        let mut cache = self.empty_cache();
        self.embed_into(x, &mut cache);
        let w = self.subspace_dim() + 1;
        let k = self.codebook.num_codewords();
        let tau = self.codebook.tau();
        for (m, sub) in self.codebook.subs().iter().enumerate() {
            let seg = m * w..(m + 1) * w;
            let h = cache.h[seg.clone()].to_vec();
            cache.sum_norm2[m] = quantizer::soft_quantize_raw(
                &h,
                sub,
                tau,
                &mut cache.weights[m * k..(m + 1) * k],
                &mut cache.sum[seg.clone()],
                &mut cache.q[seg],
            )?;
        }
        Ok(cache)
    }

    fn empty_cache(&self) -> ViewForward<T> {
        let p = self.embedding_width();
        let m = self.num_subspaces();
        let k = self.codebook.num_codewords();
        ViewForward {
            z: vec![T::zero(); p],
            pre_clip_norm: vec![T::zero(); m],
            tangent: vec![T::zero(); p],
            h: vec![T::zero(); p],
            weights: vec![T::zero(); m * k],
            sum: vec![T::zero(); p],
            sum_norm2: vec![T::zero(); m],
            q: vec![T::zero(); p],
        }
    }

    fn embed_into(&self, x: &[T], cache: &mut ViewForward<T>) {
        self.projector.apply_into(x, &mut cache.z);
        let w = self.subspace_dim() + 1;
        for (m, sub) in self.codebook.subs().iter().enumerate() {
            let seg = m * w..(m + 1) * w;
            // projection at the origin zeroes the time coordinate
            let t = &mut cache.tangent[seg.clone()];
            t[0] = T::zero();
            t[1..].copy_from_slice(&cache.z[m * w + 1..(m + 1) * w]);
            cache.pre_clip_norm[m] = geometry::clip_spatial(&mut t[1..], self.clip_norm);
            geometry::exp_origin_raw(&cache.tangent[m * w + 1..(m + 1) * w], sub.curvature(), &mut cache.h[seg]);
        }
    }

    /// Hard-quantized code of one feature vector.
    pub fn encode(&self, x: &[T]) -> Result<quantizer::QuantCode> {
        let (_, h) = self.embed(x)?;
        quantizer::encode(&h, &self.codebook)
    }
}
