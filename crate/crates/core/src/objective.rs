//! Contrastive losses over soft-quantized hyperbolic embeddings and their exact
//! reverse-mode gradients.
//!
//! Every loss term has the shape `-log(S(a, p) / Σ_t S(a, t))` with
//! `S = exp(-D/τ)`, so each is evaluated as a log-sum-exp over negated
//! distances. Gradients are accumulated into the quantized coordinates and the
//! curvatures first, then pushed back through soft quantization, the
//! exponential map, the clip and the projector.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{self, ProductPoint};
use crate::hierarchy::Hierarchy;
use crate::model::{Model, ViewForward};
use crate::scalar::{lit, Scalar};

/// Loss mixing weights and contrastive temperature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights<T> {
    pub lambda_prot: T,
    pub lambda_ins: T,
    pub tau_qc: T,
}

impl<T: Scalar> LossWeights<T> {
    pub fn new(lambda_prot: T, lambda_ins: T, tau_qc: T) -> Result<Self> {
        if !(lambda_prot >= T::zero()) || !(lambda_ins >= T::zero()) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        check_tau(tau_qc)?;
        Ok(LossWeights {
            lambda_prot,
            lambda_ins,
            tau_qc,
        })
    }

    /// λ₁ = 1.0, λ₂ = 0.1, τ_qc = 0.2.
    pub fn standard() -> Self {
        LossWeights {
            lambda_prot: T::one(),
            lambda_ins: lit(0.1),
            tau_qc: lit(0.2),
        }
    }

    /// Contrastive term only.
    pub fn vanilla(tau_qc: T) -> Self {
        LossWeights {
            lambda_prot: T::zero(),
            lambda_ins: T::zero(),
            tau_qc,
        }
    }

    fn uses_hierarchy(&self) -> bool {
        self.lambda_prot > T::zero() || self.lambda_ins > T::zero()
    }
}

/// Instance positive for one (item, level): another batch member from the same
/// cluster, or the anchor's own second view when none is available.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Positive {
    InBatch(usize),
    Sentinel,
}

/// Hierarchy and the instance positives drawn for the current batch.
#[derive(Clone, Copy, Debug)]
pub struct Targets<'a, T> {
    pub hierarchy: &'a Hierarchy<T>,
    /// `positives[i][l]` for batch position `i` and level `l`.
    pub positives: &'a [Vec<Positive>],
}

/// Two views per batch item, flat `N_B × M·(d+1)` per view.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchEmbeddings<T> {
    item_ids: Vec<usize>,
    curvatures: Vec<T>,
    dim: usize,
    continuous: [Vec<T>; 2],
    quantized: [Vec<T>; 2],
    tangents: [Vec<T>; 2],
}

/// Loss components and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown<T> {
    pub aug: T,
    pub prot: T,
    pub ins: T,
    pub total: T,
}

/// Derivatives of the total loss with respect to every trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradients<T> {
    /// Same layout as the projector weights.
    pub projector_weights: Vec<T>,
    pub projector_bias: Vec<T>,
    /// Per subspace, `K × (d+1)` ambient coordinates.
    pub codewords: Vec<Vec<T>>,
    /// With respect to `ρ_m = ln θ_m`.
    pub log_curvature: Vec<T>,
}

/// Gradient of a loss with respect to the quantized embeddings and curvatures.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingGradients<T> {
    pub quantized: [Vec<T>; 2],
    pub curvature: Vec<T>,
}

fn check_tau<T: Scalar>(tau: T) -> Result<()> {
    if tau > T::zero() && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature must be positive, got {tau}")))
    }
}

impl<T: Scalar> BatchEmbeddings<T> {
    /// Builds a batch from quantized points only; continuous points and tangents
    /// are left empty.
    pub fn from_quantized(
        item_ids: Vec<usize>,
        view1: &[ProductPoint<T>],
        view2: &[ProductPoint<T>],
    ) -> Result<Self> {
        if item_ids.is_empty() || view1.len() != item_ids.len() || view2.len() != item_ids.len() {
            return Err(Error::invalid(format!(
                "batch needs one point per view per item: {} ids, {} and {} points",
                item_ids.len(),
                view1.len(),
                view2.len()
            )));
        }
        let first = &view1[0];
        let curvatures = first.curvatures();
        let dim = first.parts()[0].dim();
        let mut quantized = [Vec::new(), Vec::new()];
        for (v, pts) in [view1, view2].into_iter().enumerate() {
            for p in pts {
                if p.curvatures() != curvatures || p.parts().iter().any(|q| q.dim() != dim) {
                    return Err(Error::invalid("batch points have incompatible product structure"));
                }
                for part in p.parts() {
                    quantized[v].extend_from_slice(part.coords());
                }
            }
        }
        Ok(BatchEmbeddings {
            item_ids,
            curvatures,
            dim,
            continuous: [Vec::new(), Vec::new()],
            quantized,
            tangents: [Vec::new(), Vec::new()],
        })
    }

    fn from_forward(item_ids: &[usize], model: &Model<T>, views: &[Vec<ViewForward<T>>; 2]) -> Self {
        let gather = |f: fn(&ViewForward<T>) -> &Vec<T>| -> [Vec<T>; 2] {
            [0, 1].map(|v| views[v].iter().flat_map(|c| f(c).iter().copied()).collect())
        };
        BatchEmbeddings {
            item_ids: item_ids.to_vec(),
            curvatures: model.curvatures(),
            dim: model.subspace_dim(),
            continuous: gather(|c| &c.h),
            quantized: gather(|c| &c.q),
            tangents: gather(|c| &c.tangent),
        }
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    pub fn item_ids(&self) -> &[usize] {
        &self.item_ids
    }

    pub fn curvatures(&self) -> &[T] {
        &self.curvatures
    }

    pub fn num_subspaces(&self) -> usize {
        self.curvatures.len()
    }

    pub fn subspace_dim(&self) -> usize {
        self.dim
    }

    fn width(&self) -> usize {
        self.curvatures.len() * (self.dim + 1)
    }

    /// Raw quantized coordinates of item `i`, view `v` (0 or 1).
    pub fn quantized(&self, i: usize, v: usize) -> &[T] {
        let w = self.width();
        &self.quantized[v][i * w..(i + 1) * w]
    }

    /// Raw continuous coordinates; empty if the batch was built from quantized points.
    pub fn continuous(&self, i: usize, v: usize) -> &[T] {
        slot(&self.continuous[v], self.width(), i)
    }

    /// Clipped tangent concatenation; empty if the batch was built from quantized points.
    pub fn tangent(&self, i: usize, v: usize) -> &[T] {
        slot(&self.tangents[v], self.width(), i)
    }

    pub fn quantized_point(&self, i: usize, v: usize) -> ProductPoint<T> {
        to_point(self.quantized(i, v), &self.curvatures)
    }

    pub fn continuous_point(&self, i: usize, v: usize) -> Option<ProductPoint<T>> {
        let c = self.continuous(i, v);
        (!c.is_empty()).then(|| to_point(c, &self.curvatures))
    }
}

fn slot<T>(buf: &[T], w: usize, i: usize) -> &[T] {
    if buf.is_empty() {
        &[]
    } else {
        &buf[i * w..(i + 1) * w]
    }
}

fn to_point<T: Scalar>(raw: &[T], curvatures: &[T]) -> ProductPoint<T> {
    let w = raw.len() / curvatures.len();
    let parts = raw
        .chunks_exact(w)
        .zip(curvatures)
        .map(|(c, &t)| geometry::ManifoldPoint::from_raw(c.to_vec(), t))
        .collect();
    ProductPoint::new(parts).expect("non-empty product")
}

/// `exp(-D(a, b) / τ_qc)`.
pub fn similarity<T: Scalar>(a: &ProductPoint<T>, b: &ProductPoint<T>, tau_qc: T) -> Result<T> {
    check_tau(tau_qc)?;
    Ok((-geometry::product_distance(a, b)? / tau_qc).exp())
}

/// Draws `positives[i][l]` from the batch members sharing item `i`'s level-`l`
/// cluster.
pub fn sample_positives<T: Scalar, R: Rng + ?Sized>(
    hierarchy: &Hierarchy<T>,
    item_ids: &[usize],
    rng: &mut R,
) -> Result<Vec<Vec<Positive>>> {
    if let Some(&bad) = item_ids.iter().find(|&&i| i >= hierarchy.num_items()) {
        return Err(Error::Consistency(format!("item {bad} has no cluster assignment")));
    }
    Ok((0..item_ids.len())
        .map(|i| {
            (0..hierarchy.num_levels())
                .map(|l| match hierarchy.sample_positive_in_pool(item_ids, i, l, rng) {
                    Some(j) => Positive::InBatch(j),
                    None => Positive::Sentinel,
                })
                .collect()
        })
        .collect())
}

/// Reference to a point taking part in a loss term.
#[derive(Clone, Copy)]
enum Node<'a, T> {
    Quant { item: usize, view: usize },
    Fixed(&'a [T]),
}

/// Loss evaluator with optional gradient accumulation.
struct Evaluator<'a, T> {
    batch: &'a BatchEmbeddings<T>,
    tau: T,
    grad: Option<EmbeddingGradients<T>>,
    dist: Vec<T>,
    scratch: Vec<T>,
}

impl<'a, T: Scalar> Evaluator<'a, T> {
    fn new(batch: &'a BatchEmbeddings<T>, tau: T, with_grad: bool) -> Self {
        let grad = with_grad.then(|| EmbeddingGradients {
            quantized: [vec![T::zero(); batch.quantized[0].len()], vec![T::zero(); batch.quantized[1].len()]],
            curvature: vec![T::zero(); batch.num_subspaces()],
        });
        Evaluator {
            batch,
            tau,
            grad,
            dist: Vec::new(),
            scratch: vec![T::zero(); batch.width()],
        }
    }

    fn coords(&self, n: Node<'a, T>) -> &'a [T] {
        match n {
            Node::Quant { item, view } => self.batch.quantized(item, view),
            Node::Fixed(c) => c,
        }
    }

    fn distance(&self, a: Node<'a, T>, b: Node<'a, T>) -> T {
        let (a, b) = (self.coords(a), self.coords(b));
        let w = self.batch.dim + 1;
        let mut total = T::zero();
        for (m, &theta) in self.batch.curvatures.iter().enumerate() {
            let seg = m * w..(m + 1) * w;
            total += geometry::distance_raw(&a[seg.clone()], &b[seg], theta);
        }
        total
    }

    /// `-log(S(a,p) / Σ_t S(a,t))` scaled by `coef`; the positive need not be
    /// among the targets.
    fn term(&mut self, anchor: Node<'a, T>, positive: Node<'a, T>, targets: &[Node<'a, T>], coef: T) -> T {
        let tau = self.tau;
        let d_pos = self.distance(anchor, positive);
        let mut dist = std::mem::take(&mut self.dist);
        dist.clear();
        dist.extend(targets.iter().map(|&t| self.distance(anchor, t)));
        // logits are -d/τ; the largest logit comes from the smallest distance
        let d_min = dist.iter().copied().fold(T::infinity(), T::min);
        let mut total = T::zero();
        for d in dist.iter_mut() {
            *d = ((d_min - *d) / tau).exp();
            total += *d;
        }
        let lse = total.ln() - d_min / tau;
        let value = d_pos / tau + lse;
        if self.grad.is_some() {
            self.distance_backward(anchor, positive, coef / tau);
            for (t, &e) in targets.iter().zip(dist.iter()) {
                self.distance_backward(anchor, *t, -coef * e / (total * tau));
            }
        }
        self.dist = dist;
        coef * value
    }

    /// Accumulates `g · ∂D(a,b)` into the quantized slots and curvatures.
    fn distance_backward(&mut self, a: Node<'a, T>, b: Node<'a, T>, g: T) {
        if g == T::zero() {
            return;
        }
        let (ca, cb) = (self.coords(a), self.coords(b));
        let w = self.batch.dim + 1;
        let two: T = lit(2.0);
        let grad = self.grad.as_mut().expect("gradient buffers");
        for (m, &theta) in self.batch.curvatures.iter().enumerate() {
            let seg = m * w..(m + 1) * w;
            let (sa, sb) = (&ca[seg.clone()], &cb[seg.clone()]);
            let q = geometry::sq_distance_raw(sa, sb);
            let x = theta * q / two;
            let out = &mut self.scratch[seg];
            if !(x > T::zero()) {
                out.iter_mut().for_each(|o| *o = T::zero());
                continue;
            }
            let root = (x * (x + two)).sqrt();
            let sqrt_theta = theta.sqrt();
            let d = (x + root).ln_1p() / sqrt_theta;
            // ∂d/∂θ = -d/(2θ) + q/(2√θ·root)
            grad.curvature[m] += g * (-d / (two * theta) + q / (two * sqrt_theta * root));
            // ∂d/∂a = √θ/root · J(a-b)
            let c = g * sqrt_theta / root;
            out[0] = -c * (sa[0] - sb[0]);
            for i in 1..w {
                out[i] = c * (sa[i] - sb[i]);
            }
        }
        let width = self.batch.width();
        if let Node::Quant { item, view } = a {
            let dst = &mut grad.quantized[view][item * width..(item + 1) * width];
            dst.iter_mut().zip(&self.scratch).for_each(|(d, &s)| *d += s);
        }
        if let Node::Quant { item, view } = b {
            let dst = &mut grad.quantized[view][item * width..(item + 1) * width];
            dst.iter_mut().zip(&self.scratch).for_each(|(d, &s)| *d -= s);
        }
    }

    fn loss_aug(&mut self) -> T {
        let n = self.batch.len();
        let coef = T::one() / lit::<T>(n as f64);
        let mut targets = Vec::with_capacity(2 * n - 1);
        let mut total = T::zero();
        for x in 0..n {
            for j in 0..2 {
                let anchor = Node::Quant { item: x, view: j };
                let positive = Node::Quant { item: x, view: 1 - j };
                targets.clear();
                targets.push(positive);
                for t in (0..n).filter(|&t| t != x) {
                    targets.push(Node::Quant { item: t, view: 0 });
                    targets.push(Node::Quant { item: t, view: 1 });
                }
                total += self.term(anchor, positive, &targets, coef);
            }
        }
        total
    }

    fn loss_prot(&mut self, hierarchy: &'a Hierarchy<T>, lifted: &'a [Vec<T>], coef_scale: T) -> Result<T> {
        let levels = hierarchy.num_levels();
        let coef = coef_scale / lit::<T>(levels as f64);
        let w = self.batch.width();
        let mut total = T::zero();
        for (i, &item) in self.batch.item_ids.iter().enumerate() {
            for (l, protos) in lifted.iter().enumerate() {
                let assigned = *hierarchy.level(l).assignment().get(item).ok_or_else(|| {
                    Error::Consistency(format!("item {item} has no level-{l} assignment"))
                })?;
                let targets: Vec<Node<'a, T>> = protos.chunks_exact(w).map(Node::Fixed).collect();
                let positive = *targets.get(assigned).ok_or_else(|| {
                    Error::Consistency(format!("item {item} assigned to missing level-{l} cluster {assigned}"))
                })?;
                total += self.term(Node::Quant { item: i, view: 0 }, positive, &targets, coef);
            }
        }
        Ok(total)
    }

    fn loss_ins(&mut self, positives: &[Vec<Positive>], levels: usize, coef_scale: T) -> Result<T> {
        let n = self.batch.len();
        if n < 2 {
            return Ok(T::zero());
        }
        if positives.len() != n || positives.iter().any(|p| p.len() != levels) {
            return Err(Error::Consistency(format!(
                "instance positives must be {n} x {levels}"
            )));
        }
        let coef = coef_scale / lit::<T>(levels as f64);
        let mut targets = Vec::with_capacity(n - 1);
        let mut total = T::zero();
        for (i, row) in positives.iter().enumerate() {
            targets.clear();
            targets.extend((0..n).filter(|&t| t != i).map(|t| Node::Quant { item: t, view: 0 }));
            for &p in row {
                let positive = match p {
                    Positive::InBatch(j) if j != i && j < n => Node::Quant { item: j, view: 0 },
                    Positive::Sentinel => Node::Quant { item: i, view: 1 },
                    Positive::InBatch(j) => {
                        return Err(Error::Consistency(format!("invalid instance positive {j} for anchor {i}")))
                    }
                };
                total += self.term(Node::Quant { item: i, view: 0 }, positive, &targets, coef);
            }
        }
        Ok(total)
    }
}

fn check_batch<T: Scalar>(batch: &BatchEmbeddings<T>) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid("batch must contain at least one item"));
    }
    Ok(())
}

/// Flattened lifted prototypes per level.
fn lifted_levels<T: Scalar>(hierarchy: &Hierarchy<T>, batch: &BatchEmbeddings<T>) -> Result<Vec<Vec<T>>> {
    hierarchy
        .levels()
        .iter()
        .map(|level| {
            let lifted = level.lifted_prototypes();
            if lifted.len() != level.num_clusters() || lifted.is_empty() {
                return Err(Error::Consistency(format!(
                    "level {} prototypes have not been lifted",
                    level.level()
                )));
            }
            let mut flat = Vec::with_capacity(lifted.len() * batch.width());
            for p in lifted {
                if p.num_parts() != batch.num_subspaces() || p.parts().iter().any(|q| q.dim() != batch.dim) {
                    return Err(Error::Consistency("prototype product structure differs from the batch".into()));
                }
                for part in p.parts() {
                    flat.extend_from_slice(part.coords());
                }
            }
            Ok(flat)
        })
        .collect()
}

/// Augmentation contrastive loss: both views as anchors, the other view as
/// positive, all views of other items as negatives; averaged over items.
pub fn loss_aug<T: Scalar>(batch: &BatchEmbeddings<T>, tau_qc: T) -> Result<T> {
    check_batch(batch)?;
    check_tau(tau_qc)?;
    Ok(Evaluator::new(batch, tau_qc, false).loss_aug())
}

/// Prototype contrastive loss against the lifted prototypes of every level.
pub fn loss_prot<T: Scalar>(batch: &BatchEmbeddings<T>, hierarchy: &Hierarchy<T>, tau_qc: T) -> Result<T> {
    check_batch(batch)?;
    check_tau(tau_qc)?;
    let lifted = lifted_levels(hierarchy, batch)?;
    Evaluator::new(batch, tau_qc, false).loss_prot(hierarchy, &lifted, T::one())
}

/// Instance contrastive loss with hierarchy-sampled positives and view-1
/// negatives from the rest of the batch.
pub fn loss_ins<T: Scalar>(
    batch: &BatchEmbeddings<T>,
    hierarchy: &Hierarchy<T>,
    positives: &[Vec<Positive>],
    tau_qc: T,
) -> Result<T> {
    check_batch(batch)?;
    check_tau(tau_qc)?;
    Evaluator::new(batch, tau_qc, false).loss_ins(positives, hierarchy.num_levels(), T::one())
}

/// `L_aug + λ₁ L_prot + λ₂ L_ins`. `targets` may be `None` only when both λ are zero.
pub fn total_loss<T: Scalar>(
    batch: &BatchEmbeddings<T>,
    targets: Option<Targets<'_, T>>,
    weights: &LossWeights<T>,
) -> Result<LossBreakdown<T>> {
    evaluate(batch, targets, weights, false).map(|(l, _)| l)
}

/// Total loss and its gradient with respect to the quantized embeddings and curvatures.
pub fn embedding_gradients<T: Scalar>(
    batch: &BatchEmbeddings<T>,
    targets: Option<Targets<'_, T>>,
    weights: &LossWeights<T>,
) -> Result<(LossBreakdown<T>, EmbeddingGradients<T>)> {
    evaluate(batch, targets, weights, true).map(|(l, g)| (l, g.expect("gradients requested")))
}

fn evaluate<T: Scalar>(
    batch: &BatchEmbeddings<T>,
    targets: Option<Targets<'_, T>>,
    weights: &LossWeights<T>,
    with_grad: bool,
) -> Result<(LossBreakdown<T>, Option<EmbeddingGradients<T>>)> {
    check_batch(batch)?;
    check_tau(weights.tau_qc)?;
    let targets = match targets {
        Some(t) => Some(t),
        None if weights.uses_hierarchy() => {
            return Err(Error::invalid("hierarchy targets required when λ₁ or λ₂ > 0"))
        }
        None => None,
    };
    let lifted = match targets {
        Some(t) if weights.lambda_prot > T::zero() => lifted_levels(t.hierarchy, batch)?,
        _ => Vec::new(),
    };
    let mut ev = Evaluator::new(batch, weights.tau_qc, with_grad);
    let aug = ev.loss_aug();
    let (mut prot, mut ins) = (T::zero(), T::zero());
    if let Some(t) = targets.filter(|_| weights.uses_hierarchy()) {
        if weights.lambda_prot > T::zero() {
            prot = ev.loss_prot(t.hierarchy, &lifted, weights.lambda_prot)? / weights.lambda_prot;
        }
        if weights.lambda_ins > T::zero() {
            ins = ev.loss_ins(t.positives, t.hierarchy.num_levels(), weights.lambda_ins)? / weights.lambda_ins;
        }
    }
    let total = aug + weights.lambda_prot * prot + weights.lambda_ins * ins;
    Ok((
        LossBreakdown {
            aug,
            prot,
            ins,
            total,
        },
        ev.grad,
    ))
}

/// Batch embeddings with the per-item forward caches of both views.
pub type BatchForward<T> = (BatchEmbeddings<T>, [Vec<ViewForward<T>>; 2]);

/// Forward pass of a batch through `model`; `views[v]` is `N_B × D_in`.
pub fn forward_batch<T: Scalar>(
    model: &Model<T>,
    item_ids: &[usize],
    views: [&[T]; 2],
) -> Result<BatchForward<T>> {
    let d_in = model.input_dim();
    let n = item_ids.len();
    if n == 0 {
        return Err(Error::invalid("batch must contain at least one item"));
    }
    for v in views {
        if v.len() != n * d_in {
            return Err(Error::invalid(format!(
                "batch view has {} values, expected {n} x {d_in}",
                v.len()
            )));
        }
    }
    let mut caches = [Vec::with_capacity(n), Vec::with_capacity(n)];
    for (v, rows) in views.into_iter().enumerate() {
        for x in rows.chunks_exact(d_in) {
            caches[v].push(model.forward(x)?);
        }
    }
    let batch = BatchEmbeddings::from_forward(item_ids, model, &caches);
    Ok((batch, caches))
}

/// Loss and exact gradients for every trainable parameter of `model` on one
/// batch of augmented views.
pub fn gradients<T: Scalar>(
    model: &Model<T>,
    item_ids: &[usize],
    views: [&[T]; 2],
    targets: Option<Targets<'_, T>>,
    weights: &LossWeights<T>,
) -> Result<(LossBreakdown<T>, ModelGradients<T>)> {
    let (batch, caches) = forward_batch(model, item_ids, views)?;
    let (loss, eg) = embedding_gradients(&batch, targets, weights)?;
    if !loss.total.is_finite() {
        return Err(Error::NumericalFailure(format!("non-finite loss {}", loss.total)));
    }
    let m = model.num_subspaces();
    let k = model.codebook.num_codewords();
    let w = model.subspace_dim() + 1;
    let d_in = model.input_dim();
    let mut grads = ModelGradients {
        projector_weights: vec![T::zero(); model.projector.weights().len()],
        projector_bias: vec![T::zero(); model.projector.bias().len()],
        codewords: vec![vec![T::zero(); k * w]; m],
        log_curvature: vec![T::zero(); m],
    };
    let mut g_theta = eg.curvature.clone();
    let width = model.embedding_width();
    let mut g_z = vec![T::zero(); width];
    for v in 0..2 {
        for (i, (cache, x)) in caches[v].iter().zip(views[v].chunks_exact(d_in)).enumerate() {
            let g_q = &eg.quantized[v][i * width..(i + 1) * width];
            view_backward(model, cache, g_q, &mut g_z, &mut grads.codewords, &mut g_theta);
            for (r, &gz) in g_z.iter().enumerate() {
                if gz == T::zero() {
                    continue;
                }
                grads.projector_bias[r] += gz;
                let row = &mut grads.projector_weights[r * d_in..(r + 1) * d_in];
                row.iter_mut().zip(x).for_each(|(g, &xi)| *g += gz * xi);
            }
        }
    }
    for ((g, &gt), &theta) in grads.log_curvature.iter_mut().zip(&g_theta).zip(&model.curvatures()) {
        *g = gt * theta;
    }
    check_finite("projector weights", &grads.projector_weights)?;
    check_finite("projector bias", &grads.projector_bias)?;
    for (s, c) in grads.codewords.iter().enumerate() {
        check_finite(&format!("codebook {s}"), c)?;
    }
    check_finite("curvature", &grads.log_curvature)?;
    Ok((loss, grads))
}

fn check_finite<T: Scalar>(name: &str, values: &[T]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::NumericalFailure(format!(
            "non-finite gradient for {name}[{i}]: {}",
            values[i]
        ))),
    }
}

/// Pushes the gradient of one view's quantized embedding back to the projector
/// output `g_z`, the codewords and the curvatures.
fn view_backward<T: Scalar>(
    model: &Model<T>,
    cache: &ViewForward<T>,
    g_q: &[T],
    g_z: &mut [T],
    g_codewords: &mut [Vec<T>],
    g_theta: &mut [T],
) {
    let w = model.subspace_dim() + 1;
    let k = model.codebook.num_codewords();
    let tau = model.codebook.tau();
    let clip = model.clip_norm();
    let two: T = lit(2.0);
    let mut g_s = vec![T::zero(); w];
    let mut g_h = vec![T::zero(); w];
    let mut g_w = vec![T::zero(); k];
    for (m, sub) in model.codebook.subs().iter().enumerate() {
        let theta = sub.curvature();
        let seg = m * w..(m + 1) * w;
        let go = &g_q[seg.clone()];
        let h = &cache.h[seg.clone()];
        let s = &cache.sum[seg.clone()];
        let n2 = cache.sum_norm2[m];
        let wts = &cache.weights[m * k..(m + 1) * k];

        // normalization q = κ s, κ = ±1/√(θ|<s,s>|)
        let mut kappa = (theta.sqrt() * n2.abs().sqrt()).recip();
        if s[0] < T::zero() {
            kappa = -kappa;
        }
        let gos: T = go.iter().zip(s).map(|(&a, &b)| a * b).sum();
        let coef = -gos * kappa / n2;
        for i in 0..w {
            let js = if i == 0 { -s[0] } else { s[i] };
            g_s[i] = kappa * go[i] + coef * js;
        }
        g_theta[m] += -gos * kappa / (two * theta);

        // weighted sum and attention
        let gc = &mut g_codewords[m];
        let mut mean = T::zero();
        for kk in 0..k {
            let c = sub.codeword(kk);
            let dot: T = c.iter().zip(&g_s).map(|(&a, &b)| a * b).sum();
            g_w[kk] = dot;
            mean += wts[kk] * dot;
            for (g, &gs) in gc[kk * w..(kk + 1) * w].iter_mut().zip(&g_s) {
                *g += wts[kk] * gs;
            }
        }
        g_h.iter_mut().for_each(|g| *g = T::zero());
        for kk in 0..k {
            // logit l = -<c-h, c-h>_L / τ
            let gl = wts[kk] * (g_w[kk] - mean);
            if gl == T::zero() {
                continue;
            }
            let c = sub.codeword(kk);
            let f = -two * gl / tau;
            let gck = &mut gc[kk * w..(kk + 1) * w];
            for i in 0..w {
                let diff = if i == 0 { -(c[0] - h[0]) } else { c[i] - h[i] };
                gck[i] += f * diff;
                g_h[i] -= f * diff;
            }
        }

        // exponential map at the origin
        let sp = &cache.tangent[m * w + 1..(m + 1) * w];
        let r2: T = sp.iter().map(|&x| x * x).sum();
        let sqrt_theta = theta.sqrt();
        let a = sqrt_theta * r2.sqrt();
        let (f, fp_over_a) = sinhc_terms(a);
        let ghs: T = g_h[1..].iter().zip(sp).map(|(&g, &x)| g * x).sum();
        let radial = theta * fp_over_a * ghs + g_h[0] * sqrt_theta * f;
        let g_sp = &mut g_s[1..];
        for (j, g) in g_sp.iter_mut().enumerate() {
            *g = f * g_h[j + 1] + radial * sp[j];
        }
        let dh0 = r2 * f - a.cosh() / theta;
        let dhs = fp_over_a * sqrt_theta * r2 * ghs;
        g_theta[m] += (g_h[0] * dh0 + dhs) / (two * sqrt_theta);

        // clip and tangent projection
        let gz = &mut g_z[seg];
        gz[0] = T::zero();
        let pre = cache.pre_clip_norm[m];
        if pre > clip {
            let dot: T = g_sp.iter().zip(sp).map(|(&g, &x)| g * x).sum();
            let scale = clip / pre;
            for j in 0..w - 1 {
                gz[j + 1] = scale * (g_sp[j] - sp[j] * dot / (clip * clip));
            }
        } else {
            gz[1..].copy_from_slice(g_sp);
        }
    }
}

/// `(sinh a / a, f'(a)/a)` with `f = sinh a / a`, series near zero.
fn sinhc_terms<T: Scalar>(a: T) -> (T, T) {
    let a2 = a * a;
    if a < lit(1e-3) {
        let f = T::one() + a2 / lit(6.0) + a2 * a2 / lit(120.0);
        let g = lit::<T>(1.0 / 3.0) + a2 / lit(30.0) + a2 * a2 / lit(840.0);
        (f, g)
    } else {
        let (sh, ch) = (a.sinh(), a.cosh());
        (sh / a, (a * ch - sh) / (a2 * a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ManifoldPoint, ProductPoint};
    use crate::hierarchy::Hierarchy;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gauss(rng: &mut ChaCha8Rng) -> f64 {
        StandardNormal.sample(rng)
    }

    fn point(rng: &mut ChaCha8Rng, m: usize, d: usize, scale: f64, theta: f64) -> ProductPoint<f64> {
        let parts = (0..m)
            .map(|_| {
                let sp: Vec<f64> = (0..d)
                    .map(|_| scale * gauss(rng))
                    .collect();
                ManifoldPoint::from_spatial(&sp, theta).unwrap()
            })
            .collect();
        ProductPoint::new(parts).unwrap()
    }

    fn random_batch(n: usize, m: usize, d: usize, seed: u64) -> BatchEmbeddings<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v1: Vec<_> = (0..n).map(|_| point(&mut rng, m, d, 0.8, 1.0)).collect();
        let v2: Vec<_> = (0..n).map(|_| point(&mut rng, m, d, 0.8, 1.0)).collect();
        BatchEmbeddings::from_quantized((0..n).collect(), &v1, &v2).unwrap()
    }

    // Independent transcription: similarities via acosh(-θ<a,b>), explicit ratios.
    fn oracle_dist(a: &ProductPoint<f64>, b: &ProductPoint<f64>) -> f64 {
        a.parts()
            .iter()
            .zip(b.parts())
            .map(|(p, q)| {
                let t = p.curvature();
                let (x, y) = (p.coords(), q.coords());
                let ip = -x[0] * y[0] + x[1..].iter().zip(&y[1..]).map(|(u, v)| u * v).sum::<f64>();
                (-t * ip).max(1.0).acosh() / t.sqrt()
            })
            .sum()
    }

    fn oracle_sim(a: &ProductPoint<f64>, b: &ProductPoint<f64>, tau: f64) -> f64 {
        (-oracle_dist(a, b) / tau).exp()
    }

    fn oracle_aug(b: &BatchEmbeddings<f64>, tau: f64) -> f64 {
        let n = b.len();
        let q = |i, v| b.quantized_point(i, v);
        let mut total = 0.0;
        for x in 0..n {
            for j in 0..2 {
                let num = oracle_sim(&q(x, j), &q(x, 1 - j), tau);
                let mut den = num;
                for t in 0..n {
                    if t != x {
                        den += oracle_sim(&q(x, j), &q(t, 0), tau) + oracle_sim(&q(x, j), &q(t, 1), tau);
                    }
                }
                total += -(num / den).ln();
            }
        }
        total / n as f64
    }

    fn toy_hierarchy(n: usize, m: usize, d: usize, targets: &[usize], seed: u64) -> Hierarchy<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = m * (d + 1);
        let vecs: Vec<f64> = (0..n * dim)
            .map(|i| if i % (d + 1) == 0 { 0.0 } else { 0.6 * gauss(&mut rng) })
            .collect();
        let mut h = Hierarchy::build(&vecs, dim, targets, 20, seed).unwrap();
        h.lift_all(&vec![1.0; m], 1.5).unwrap();
        h
    }

    #[test]
    fn similarity_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = point(&mut rng, 2, 3, 0.5, 1.0);
        assert_eq!(similarity(&a, &a, 0.2).unwrap(), 1.0);
        let o = ProductPoint::new(vec![geometry::origin(1, 1.0).unwrap()]).unwrap();
        let sp = [0.5f64.sinh()];
        let p = ProductPoint::new(vec![ManifoldPoint::from_spatial(&sp, 1.0).unwrap()]).unwrap();
        assert!((similarity(&o, &p, 0.2).unwrap() - (-2.5f64).exp()).abs() < 1e-12);
        assert!(similarity(&a, &a, 0.0).is_err());
        let b = point(&mut rng, 2, 3, 0.5, 1.0);
        let c = point(&mut rng, 2, 3, 0.5, 1.0);
        let (dab, dac) = (
            geometry::product_distance(&a, &b).unwrap(),
            geometry::product_distance(&a, &c).unwrap(),
        );
        let (sab, sac) = (similarity(&a, &b, 0.2).unwrap(), similarity(&a, &c, 0.2).unwrap());
        assert_eq!(dab < dac, sab > sac);
    }

    #[test]
    fn aug_single_item_is_zero() {
        let b = random_batch(1, 2, 3, 4);
        assert_eq!(loss_aug(&b, 0.2).unwrap(), 0.0);
    }

    #[test]
    fn aug_equidistant_views() {
        // four points pairwise equidistant: vertices of a regular simplex around the origin
        let theta = 1.0;
        let s = 0.7;
        let dirs = [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]];
        let pts: Vec<_> = dirs
            .iter()
            .map(|d| {
                let sp: Vec<f64> = d.iter().map(|x| x * s).collect();
                ProductPoint::new(vec![ManifoldPoint::from_spatial(&sp, theta).unwrap()]).unwrap()
            })
            .collect();
        let b = BatchEmbeddings::from_quantized(vec![0, 1], &pts[0..2], &pts[2..4]).unwrap();
        let l = loss_aug(&b, 0.2).unwrap();
        assert!((l - 2.0 * 3f64.ln()).abs() < 1e-12, "{l}");
        assert!((l - 2.1972).abs() < 1e-4);
    }

    #[test]
    fn aug_matches_oracle() {
        let b = random_batch(4, 2, 3, 11);
        for tau in [0.05, 0.2, 1.0] {
            let a = loss_aug(&b, tau).unwrap();
            let o = oracle_aug(&b, tau);
            assert!((a - o).abs() < 1e-10, "τ={tau}: {a} vs {o}");
        }
    }

    #[test]
    fn prot_single_prototype_is_zero() {
        let b = random_batch(3, 2, 3, 5);
        let h = toy_hierarchy(3, 2, 3, &[1], 5);
        assert!(loss_prot(&b, &h, 0.2).unwrap().abs() < 1e-12);
    }

    #[test]
    fn prot_equidistant_two_prototypes() {
        // two singleton clusters mirrored around the origin; the anchor sits at the origin
        let vecs = [0.0f64, 0.0, 0.6, 0.0, 0.0, 0.0, -0.6, 0.0];
        let mut h = Hierarchy::build(&vecs, 4, &[2], 20, 0).unwrap();
        h.lift_all(&[1.0], 1.5).unwrap();
        let o = ProductPoint::new(vec![geometry::origin(3, 1.0).unwrap()]).unwrap();
        let b = BatchEmbeddings::from_quantized(vec![0], &[o.clone()], &[o]).unwrap();
        let lvl = h.level(0);
        let p0 = lvl.lifted_prototypes()[0].clone();
        let p1 = lvl.lifted_prototypes()[1].clone();
        let d0 = geometry::product_distance(&b.quantized_point(0, 0), &p0).unwrap();
        let d1 = geometry::product_distance(&b.quantized_point(0, 0), &p1).unwrap();
        assert!((d0 - d1).abs() < 1e-12);
        assert!((loss_prot(&b, &h, 0.2).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn prot_and_ins_match_oracle() {
        let n = 6;
        let b = random_batch(n, 2, 3, 21);
        let h = toy_hierarchy(n, 2, 3, &[3, 2], 21);
        let tau = 0.2;
        let q = |i, v| b.quantized_point(i, v);
        let levels = h.num_levels() as f64;

        let mut oracle = 0.0;
        for i in 0..n {
            for l in 0..h.num_levels() {
                let lv = h.level(l);
                let protos = lv.lifted_prototypes();
                let num = oracle_sim(&q(i, 0), &protos[lv.assignment()[i]], tau);
                let den: f64 = protos.iter().map(|p| oracle_sim(&q(i, 0), p, tau)).sum();
                oracle -= (num / den).ln() / levels;
            }
        }
        let got = loss_prot(&b, &h, tau).unwrap();
        assert!((got - oracle).abs() < 1e-10, "{got} vs {oracle}");

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ids: Vec<usize> = (0..n).collect();
        let pos = sample_positives(&h, &ids, &mut rng).unwrap();
        assert!(pos.iter().flatten().any(|p| *p == Positive::Sentinel) || n > 1);
        let mut oracle = 0.0;
        for i in 0..n {
            for l in 0..h.num_levels() {
                let p = match pos[i][l] {
                    Positive::InBatch(j) => q(j, 0),
                    Positive::Sentinel => q(i, 1),
                };
                let num = oracle_sim(&q(i, 0), &p, tau);
                let den: f64 = (0..n).filter(|&t| t != i).map(|t| oracle_sim(&q(i, 0), &q(t, 0), tau)).sum();
                oracle -= (num / den).ln() / levels;
            }
        }
        let got = loss_ins(&b, &h, &pos, tau).unwrap();
        assert!((got - oracle).abs() < 1e-10, "{got} vs {oracle}");
    }

    #[test]
    fn ins_degenerate_and_equidistant() {
        let b = random_batch(1, 2, 3, 8);
        let h = toy_hierarchy(1, 2, 3, &[1], 8);
        assert_eq!(loss_ins(&b, &h, &[vec![Positive::Sentinel]], 0.2).unwrap(), 0.0);

        let b = random_batch(2, 2, 3, 9);
        let h = toy_hierarchy(2, 2, 3, &[1], 9);
        let pos = vec![vec![Positive::InBatch(1)], vec![Positive::InBatch(0)]];
        assert!(loss_ins(&b, &h, &pos, 0.2).unwrap().abs() < 1e-12);
        let bad = vec![vec![Positive::InBatch(0)], vec![Positive::InBatch(0)]];
        assert!(matches!(loss_ins(&b, &h, &bad, 0.2), Err(Error::Consistency(_))));
    }

    #[test]
    fn missing_assignment_is_consistency_error() {
        let v: Vec<_> = {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            (0..2).map(|_| point(&mut rng, 2, 3, 0.5, 1.0)).collect()
        };
        let b = BatchEmbeddings::from_quantized(vec![0, 99], &v, &v).unwrap();
        let h = toy_hierarchy(4, 2, 3, &[2], 2);
        assert!(matches!(loss_prot(&b, &h, 0.2), Err(Error::Consistency(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_positives(&h, &[0, 99], &mut rng), Err(Error::Consistency(_))));
        let unlifted = Hierarchy::build(&vec![0.0; 16], 8, &[1], 5, 0).unwrap();
        let b = random_batch(2, 2, 3, 1);
        assert!(matches!(loss_prot(&b, &unlifted, 0.2), Err(Error::Consistency(_))));
    }

    #[test]
    fn total_combines_components() {
        let n = 5;
        let b = random_batch(n, 2, 3, 31);
        let h = toy_hierarchy(n, 2, 3, &[2, 1], 31);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let pos = sample_positives(&h, b.item_ids(), &mut rng).unwrap();
        let t = Targets {
            hierarchy: &h,
            positives: &pos,
        };
        let w = LossWeights::standard();
        let l = total_loss(&b, Some(t), &w).unwrap();
        let aug = loss_aug(&b, 0.2).unwrap();
        let prot = loss_prot(&b, &h, 0.2).unwrap();
        let ins = loss_ins(&b, &h, &pos, 0.2).unwrap();
        assert!((l.aug - aug).abs() < 1e-12);
        assert!((l.prot - prot).abs() < 1e-12);
        assert!((l.ins - ins).abs() < 1e-12);
        assert!((l.total - (aug + prot + 0.1 * ins)).abs() < 1e-12);

        let v = total_loss(&b, None, &LossWeights::vanilla(0.2)).unwrap();
        assert_eq!(v.total, aug);
        assert!(total_loss(&b, None, &w).is_err());
        assert!(LossWeights::new(-1.0, 0.0, 0.2).is_err());
        assert!(LossWeights::new(1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn permutation_invariance() {
        let n = 6;
        let b = random_batch(n, 2, 3, 41);
        let h = toy_hierarchy(n, 2, 3, &[3, 2], 41);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let pos = sample_positives(&h, b.item_ids(), &mut rng).unwrap();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let inv: Vec<usize> = (0..n).map(|i| perm.iter().position(|&p| p == i).unwrap()).collect();
        let pts = |v| perm.iter().map(|&i| b.quantized_point(i, v)).collect::<Vec<_>>();
        let pb = BatchEmbeddings::from_quantized(perm.to_vec(), &pts(0), &pts(1)).unwrap();
        let ppos: Vec<Vec<Positive>> = perm
            .iter()
            .map(|&i| {
                pos[i]
                    .iter()
                    .map(|p| match *p {
                        Positive::InBatch(j) => Positive::InBatch(inv[j]),
                        Positive::Sentinel => Positive::Sentinel,
                    })
                    .collect()
            })
            .collect();
        let t = |p| Targets {
            hierarchy: &h,
            positives: p,
        };
        let a = total_loss(&b, Some(t(&pos)), &LossWeights::standard()).unwrap();
        let c = total_loss(&pb, Some(t(&ppos)), &LossWeights::standard()).unwrap();
        for (x, y) in [(a.aug, c.aug), (a.prot, c.prot), (a.ins, c.ins), (a.total, c.total)] {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn stable_for_far_points_and_small_tau() {
        // product distances up to ~50
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v1: Vec<_> = (0..4).map(|_| point(&mut rng, 4, 3, 6.0, 1.0)).collect();
        let v2: Vec<_> = (0..4).map(|_| point(&mut rng, 4, 3, 6.0, 1.0)).collect();
        let b = BatchEmbeddings::from_quantized((0..4).collect(), &v1, &v2).unwrap();
        let max_d = (0..4)
            .flat_map(|i| (0..4).map(move |j| (i, j)))
            .map(|(i, j)| geometry::product_distance(&b.quantized_point(i, 0), &b.quantized_point(j, 1)).unwrap())
            .fold(0.0, f64::max);
        assert!(max_d > 20.0 && max_d < 60.0, "{max_d}");
        for tau in [0.05, 0.2, 1.0] {
            let (l, g) = embedding_gradients(&b, None, &LossWeights::vanilla(tau)).unwrap();
            assert!(l.total.is_finite() && l.total >= 0.0);
            assert!(g.quantized.iter().flatten().all(|x| x.is_finite()));
            assert!(g.curvature.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn doubling_tau_keeps_softmax_argmax() {
        let b = random_batch(5, 2, 3, 13);
        for i in 0..5 {
            let a = b.quantized_point(i, 0);
            let sims = |tau: f64| -> Vec<f64> {
                (0..5)
                    .filter(|&t| t != i)
                    .map(|t| similarity(&a, &b.quantized_point(t, 1), tau).unwrap())
                    .collect()
            };
            let argmax = |v: Vec<f64>| {
                v.iter()
                    .enumerate()
                    .max_by(|x, y| x.1.total_cmp(y.1))
                    .map(|p| p.0)
                    .unwrap()
            };
            assert_eq!(argmax(sims(0.2)), argmax(sims(0.4)));
        }
    }

    // ---- gradient checks -------------------------------------------------

    struct Tiny {
        model: Model<f64>,
        ids: Vec<usize>,
        views: [Vec<f64>; 2],
        hierarchy: Hierarchy<f64>,
        positives: Vec<Vec<Positive>>,
    }

    fn tiny(seed: u64) -> Tiny {
        let (d_in, m, k, d, n) = (8, 2, 4, 3, 3);
        let mut model = Model::init(d_in, m, k, d, 1.0, 0.2, 0.45, seed).unwrap();
        // spread codewords out so attention is not saturated on one codeword
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        for sub in model.codebook.subs_mut() {
            let theta = sub.curvature();
            for kk in 0..k {
                let sp: Vec<f64> = (0..d).map(|_| 0.5 * gauss(&mut rng)).collect();
                let c = sub.codeword_mut(kk);
                c[1..].copy_from_slice(&sp);
                c[0] = geometry::time_coordinate(&sp, theta);
            }
        }
        model.codebook.subs_mut()[1].set_curvature(1.7);
        let views = [0, 1].map(|_| {
            (0..n * d_in)
                .map(|_| gauss(&mut rng))
                .collect::<Vec<f64>>()
        });
        let ids = vec![0, 1, 2];
        let dim = m * (d + 1);
        let feats: Vec<f64> = (0..n * dim)
            .map(|i| if i % (d + 1) == 0 { 0.0 } else { gauss(&mut rng) })
            .collect();
        let mut hierarchy = Hierarchy::build(&feats, dim, &[2, 1], 10, seed).unwrap();
        hierarchy.lift_all(&model.curvatures(), 1.5).unwrap();
        let positives = vec![
            vec![Positive::InBatch(2), Positive::InBatch(1)],
            vec![Positive::Sentinel, Positive::InBatch(0)],
            vec![Positive::InBatch(0), Positive::Sentinel],
        ];
        Tiny {
            model,
            ids,
            views,
            hierarchy,
            positives,
        }
    }

    fn tiny_loss(t: &Tiny, model: &Model<f64>, w: &LossWeights<f64>) -> f64 {
        let (batch, _) = forward_batch(model, &t.ids, [&t.views[0], &t.views[1]]).unwrap();
        let targets = Targets {
            hierarchy: &t.hierarchy,
            positives: &t.positives,
        };
        total_loss(&batch, Some(targets), w).unwrap().total
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    fn check_gradients(t: &Tiny, w: &LossWeights<f64>) -> (usize, f64) {
        let targets = Targets {
            hierarchy: &t.hierarchy,
            positives: &t.positives,
        };
        let (_, g) = gradients(&t.model, &t.ids, [&t.views[0], &t.views[1]], Some(targets), w).unwrap();
        let eps = 1e-5;
        let mut worst = 0.0f64;
        let mut count = 0;
        let mut probe = |set: &dyn Fn(&mut Model<f64>, f64), analytic: f64, name: String| {
            let mut plus = t.model.clone();
            set(&mut plus, eps);
            let mut minus = t.model.clone();
            set(&mut minus, -eps);
            let fd = (tiny_loss(t, &plus, w) - tiny_loss(t, &minus, w)) / (2.0 * eps);
            let e = rel_err(analytic, fd);
            assert!(e <= 1e-4, "{name}: analytic {analytic} vs fd {fd} (rel {e})");
            worst = worst.max(e);
            count += 1;
        };
        for (i, &a) in g.projector_weights.iter().enumerate() {
            probe(&|m, h| m.projector.weights_mut()[i] += h, a, format!("W[{i}]"));
        }
        for (i, &a) in g.projector_bias.iter().enumerate() {
            probe(&|m, h| m.projector.bias_mut()[i] += h, a, format!("b[{i}]"));
        }
        for (s, gc) in g.codewords.iter().enumerate() {
            for (i, &a) in gc.iter().enumerate() {
                probe(&|m, h| m.codebook.subs_mut()[s].coords_mut()[i] += h, a, format!("C{s}[{i}]"));
            }
        }
        for (s, &a) in g.log_curvature.iter().enumerate() {
            // ρ = ln θ; only the curvature moves, codeword coordinates stay fixed
            probe(
                &|m, h| {
                    let theta = m.codebook.subs()[s].curvature() * h.exp();
                    let sub = &mut m.codebook.subs_mut()[s];
                    let coords = sub.coords().to_vec();
                    sub.set_curvature(theta);
                    sub.coords_mut().copy_from_slice(&coords);
                },
                a,
                format!("rho[{s}]"),
            );
        }
        (count, worst)
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in [1, 2, 3] {
            let t = tiny(seed);
            // some segments clipped, none near the clip boundary
            let (batch, caches) = forward_batch(&t.model, &t.ids, [&t.views[0], &t.views[1]]).unwrap();
            let norms: Vec<f64> = caches.iter().flatten().flat_map(|c| c.pre_clip_norm.clone()).collect();
            assert!(norms.iter().all(|n| (n - 1.5).abs() > 1e-3), "{norms:?}");
            assert!(batch.len() == 3);
            let (count, worst) = check_gradients(&t, &LossWeights::standard());
            assert_eq!(count, 64 + 8 + 32 + 2);
            assert!(worst <= 1e-4, "seed {seed}: worst relative error {worst}");
        }
    }

    #[test]
    fn clip_branch_is_exercised() {
        let t = tiny(1);
        let (_, caches) = forward_batch(&t.model, &t.ids, [&t.views[0], &t.views[1]]).unwrap();
        let norms: Vec<f64> = caches.iter().flatten().flat_map(|c| c.pre_clip_norm.clone()).collect();
        assert!(norms.iter().any(|&n| n > 1.5) && norms.iter().any(|&n| n < 1.5), "{norms:?}");
    }

    #[test]
    fn single_item_vanilla_has_zero_gradient() {
        let t = tiny(4);
        let (l, g) = gradients(&t.model, &[0], [&t.views[0][..8], &t.views[1][..8]], None, &LossWeights::vanilla(0.2))
            .unwrap();
        assert_eq!(l.total, 0.0);
        assert!(g.projector_weights.iter().all(|&x| x == 0.0));
        assert!(g.codewords.iter().flatten().all(|&x| x == 0.0));
        assert!(g.log_curvature.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn exp_backward_series_branch() {
        // tangent norm tiny enough for the series branch of sinh(a)/a
        let (f, g) = sinhc_terms(5e-4f64);
        let a = 5e-4f64;
        assert!((f - a.sinh() / a).abs() < 1e-15);
        let exact = (a * a.cosh() - a.sinh()) / a.powi(3);
        assert!((g - exact).abs() < 1e-6);
        let (f1, g1) = sinhc_terms(1e-3f64);
        let (f2, g2) = sinhc_terms(1.0001e-3f64);
        assert!((f1 - f2).abs() < 1e-9 && (g1 - g2).abs() < 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn losses_finite_and_aug_nonnegative(seed in 0u64..10_000, n in 1usize..6, tau in 0.05f64..1.0) {
            let b = random_batch(n, 2, 2, seed);
            let h = toy_hierarchy(n, 2, 2, &[n.min(2)], seed);
            let l = loss_aug(&b, tau).unwrap();
            prop_assert!(l.is_finite() && l >= 0.0);
            let p = loss_prot(&b, &h, tau).unwrap();
            prop_assert!(p.is_finite() && p >= -1e-12);
        }
    }
}
