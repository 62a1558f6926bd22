//! End-to-end training: feature-space augmentation, epoch-wise hierarchy
//! refresh, SGD on the projector and curvatures, Riemannian SGD on codewords.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::FeatureMatrix;
use crate::error::{Error, Result};
use crate::geometry::{self, ManifoldPoint, ProductPoint};
use crate::hierarchy::Hierarchy;
use crate::model::Model;
use crate::objective::{self, LossWeights, Targets};
use crate::quantizer;

/// Training hyperparameters. Parsed from flat `key=value` text.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub lambda_prot: f64,
    pub lambda_ins: f64,
    /// Attention temperature of soft quantization.
    pub tau: f64,
    /// Contrastive temperature.
    pub tau_qc: f64,
    pub num_subspaces: usize,
    pub num_codewords: usize,
    pub subspace_dim: usize,
    pub theta_init: f64,
    pub learn_curvature: bool,
    /// Cluster counts per level, finest first, strictly decreasing.
    pub hierarchy_levels: Vec<usize>,
    pub kmeans_iters: usize,
    pub noise_std: f64,
    pub mask_prob: f64,
    /// Projector weights are drawn with std `projector_init_scale / √D_in`.
    pub projector_init_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 50,
            lr_start: 1e-3,
            lr_end: 1e-5,
            lambda_prot: 1.0,
            lambda_ins: 0.1,
            tau: 0.2,
            tau_qc: 0.2,
            num_subspaces: 4,
            num_codewords: 256,
            subspace_dim: 15,
            theta_init: 1.0,
            learn_curvature: true,
            hierarchy_levels: vec![200, 100, 50],
            kmeans_iters: 20,
            noise_std: 0.1,
            mask_prob: 0.1,
            projector_init_scale: 1.0,
            seed: 0,
        }
    }
}

const CONFIG_KEYS: &[&str] = &[
    "batch_size",
    "epochs",
    "lr_start",
    "lr_end",
    "lambda_prot",
    "lambda_ins",
    "tau",
    "tau_qc",
    "num_subspaces",
    "num_codewords",
    "subspace_dim",
    "theta_init",
    "learn_curvature",
    "hierarchy_levels",
    "kmeans_iters",
    "noise_std",
    "mask_prob",
    "projector_init_scale",
    "seed",
];

fn parse_value<V: std::str::FromStr>(key: &str, value: &str) -> Result<V, String> {
    value
        .trim()
        .parse()
        .map_err(|_| format!("invalid value {value:?} for {key}"))
}

impl TrainConfig {
    pub fn keys() -> &'static [&'static str] {
        CONFIG_KEYS
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "lr_start" => self.lr_start = parse_value(key, value)?,
            "lr_end" => self.lr_end = parse_value(key, value)?,
            "lambda_prot" => self.lambda_prot = parse_value(key, value)?,
            "lambda_ins" => self.lambda_ins = parse_value(key, value)?,
            "tau" => self.tau = parse_value(key, value)?,
            "tau_qc" => self.tau_qc = parse_value(key, value)?,
            "num_subspaces" => self.num_subspaces = parse_value(key, value)?,
            "num_codewords" => self.num_codewords = parse_value(key, value)?,
            "subspace_dim" => self.subspace_dim = parse_value(key, value)?,
            "theta_init" => self.theta_init = parse_value(key, value)?,
            "learn_curvature" => self.learn_curvature = parse_value(key, value)?,
            "hierarchy_levels" => self.hierarchy_levels = parse_levels(value)?,
            "kmeans_iters" => self.kmeans_iters = parse_value(key, value)?,
            "noise_std" => self.noise_std = parse_value(key, value)?,
            "mask_prob" => self.mask_prob = parse_value(key, value)?,
            "projector_init_scale" => self.projector_init_scale = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Err(format!("unknown config key {key:?}")),
        }
        Ok(())
    }

    /// Parses `key=value` lines over the defaults. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key=value, got {line:?}"),
            })?;
            cfg.set(key.trim(), value)
                .map_err(|message| Error::Parse { line: i + 1, message })?;
        }
        Ok(cfg)
    }

    /// Inverse of [`TrainConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let levels: Vec<String> = self.hierarchy_levels.iter().map(|l| l.to_string()).collect();
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "lr_start={:?}", self.lr_start);
        let _ = writeln!(s, "lr_end={:?}", self.lr_end);
        let _ = writeln!(s, "lambda_prot={:?}", self.lambda_prot);
        let _ = writeln!(s, "lambda_ins={:?}", self.lambda_ins);
        let _ = writeln!(s, "tau={:?}", self.tau);
        let _ = writeln!(s, "tau_qc={:?}", self.tau_qc);
        let _ = writeln!(s, "num_subspaces={}", self.num_subspaces);
        let _ = writeln!(s, "num_codewords={}", self.num_codewords);
        let _ = writeln!(s, "subspace_dim={}", self.subspace_dim);
        let _ = writeln!(s, "theta_init={:?}", self.theta_init);
        let _ = writeln!(s, "learn_curvature={}", self.learn_curvature);
        let _ = writeln!(s, "hierarchy_levels={}", levels.join(","));
        let _ = writeln!(s, "kmeans_iters={}", self.kmeans_iters);
        let _ = writeln!(s, "noise_std={:?}", self.noise_std);
        let _ = writeln!(s, "mask_prob={:?}", self.mask_prob);
        let _ = writeln!(s, "projector_init_scale={:?}", self.projector_init_scale);
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }

    pub fn loss_weights(&self) -> Result<LossWeights<f64>> {
        LossWeights::new(self.lambda_prot, self.lambda_ins, self.tau_qc)
    }

    pub fn uses_hierarchy(&self) -> bool {
        self.lambda_prot > 0.0 || self.lambda_ins > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        for (name, v) in [
            ("lr_start", self.lr_start),
            ("lr_end", self.lr_end),
            ("tau", self.tau),
            ("tau_qc", self.tau_qc),
            ("theta_init", self.theta_init),
            ("projector_init_scale", self.projector_init_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("lambda_prot", self.lambda_prot),
            ("lambda_ins", self.lambda_ins),
            ("noise_std", self.noise_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return bad(format!("mask_prob must be in [0, 1), got {}", self.mask_prob));
        }
        if self.num_subspaces == 0 || self.subspace_dim == 0 {
            return bad("num_subspaces and subspace_dim must be positive".into());
        }
        if self.num_codewords < 2 || !self.num_codewords.is_power_of_two() {
            return bad(format!("num_codewords must be a power of two ≥ 2, got {}", self.num_codewords));
        }
        if self.uses_hierarchy() {
            if self.hierarchy_levels.is_empty() || self.hierarchy_levels.contains(&0) {
                return bad("hierarchy_levels must list positive cluster counts".into());
            }
            if self.hierarchy_levels.windows(2).any(|w| w[1] >= w[0]) {
                return bad("hierarchy_levels must be strictly decreasing".into());
            }
        }
        Ok(())
    }
}

fn parse_levels(value: &str) -> Result<Vec<usize>, String> {
    let value = value.trim().trim_matches('"');
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|t| parse_value("hierarchy_levels", t))
        .collect()
}

/// One record of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub loss_aug: f64,
    pub loss_prot: f64,
    pub loss_ins: f64,
    pub loss_total: f64,
    pub mean_quant_error: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

/// Trained model and its per-epoch log.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: Model<f64>,
    pub metrics: Vec<EpochMetrics>,
}

/// Cosine decay from `lr_start` at step 0 to `lr_end` at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    if total_steps == 0 {
        return cfg.lr_start;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    cfg.lr_end + 0.5 * (cfg.lr_start - cfg.lr_end) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Two independent views of `x`: Gaussian noise with std `noise_std·sigma[j]`
/// per coordinate, then each coordinate zeroed with probability `mask_prob`.
pub fn augment_views<R: Rng + ?Sized>(
    x: &[f64],
    sigma: &[f64],
    noise_std: f64,
    mask_prob: f64,
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>) {
    let mut view = || -> Vec<f64> {
        x.iter()
            .zip(sigma)
            .map(|(&xi, &s)| {
                let std = noise_std * s;
                let mut v = xi;
                if std > 0.0 {
                    v += Normal::new(0.0, std).expect("finite std").sample(rng);
                }
                if mask_prob > 0.0 && rng.random::<f64>() < mask_prob {
                    v = 0.0;
                }
                v
            })
            .collect()
    };
    let a = view();
    let b = view();
    (a, b)
}

/// Clipped tangent concatenation and hyperbolic embedding of `x`.
pub fn embed(model: &Model<f64>, x: &[f64]) -> Result<(Vec<f64>, ProductPoint<f64>)> {
    model.embed(x)
}

/// One Riemannian SGD step on raw coordinates: the Euclidean gradient is
/// metric-corrected (first coordinate negated), projected onto the tangent space,
/// followed along the geodesic for `-lr`, and the time coordinate recomputed.
pub fn riemannian_step_raw(point: &mut [f64], grad: &[f64], theta: f64, lr: f64) {
    let mut v: Vec<f64> = grad.to_vec();
    v[0] = -v[0];
    let s = theta * geometry::inner(point, &v);
    for (vi, &p) in v.iter_mut().zip(point.iter()) {
        *vi = -lr * (*vi + s * p);
    }
    let norm = geometry::inner(&v, &v).max(0.0).sqrt();
    let a = theta.sqrt() * norm;
    if a > 0.0 {
        let (ch, sh) = (a.cosh(), a.sinh() / a);
        for (p, &vi) in point.iter_mut().zip(&v) {
            *p = ch * *p + sh * vi;
        }
    }
    point[0] = geometry::time_coordinate(&point[1..], theta);
}

/// Riemannian SGD update of a single point.
pub fn riemannian_step(point: &ManifoldPoint<f64>, euclid_grad: &[f64], lr: f64) -> Result<ManifoldPoint<f64>> {
    if euclid_grad.len() != point.coords().len() {
        return Err(Error::invalid("gradient dimension does not match the point"));
    }
    if let Some(i) = euclid_grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NumericalFailure(format!("non-finite gradient at coordinate {i}")));
    }
    let mut coords = point.coords().to_vec();
    riemannian_step_raw(&mut coords, euclid_grad, point.curvature(), lr);
    Ok(ManifoldPoint::from_raw(coords, point.curvature()))
}

/// Clipped tangent vectors of every row, `N × M·(d+1)`.
pub fn embed_all(model: &Model<f64>, features: &FeatureMatrix) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(features.rows() * model.embedding_width());
    for x in features.iter_rows() {
        out.extend(model.embed(x)?.0);
    }
    Ok(out)
}

/// Mean over rows of `Σ_m d_L(h_m, c_nearest)`, the hard-quantization distortion.
pub fn mean_quantization_error(model: &Model<f64>, features: &FeatureMatrix) -> Result<f64> {
    if features.rows() == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for x in features.iter_rows() {
        let (_, h) = model.embed(x)?;
        for (part, sub) in h.parts().iter().zip(model.codebook.subs()) {
            let k = quantizer::nearest_codeword(part.coords(), sub);
            total += geometry::distance_raw(part.coords(), sub.codeword(k), sub.curvature());
        }
    }
    Ok(total / features.rows() as f64)
}

/// Fresh model for `input_dim`-dimensional features.
pub fn init_model(input_dim: usize, cfg: &TrainConfig) -> Result<Model<f64>> {
    cfg.validate()?;
    Model::init(
        input_dim,
        cfg.num_subspaces,
        cfg.num_codewords,
        cfg.subspace_dim,
        cfg.theta_init,
        cfg.tau,
        cfg.projector_init_scale / (input_dim.max(1) as f64).sqrt(),
        cfg.seed,
    )
}

/// Builds the epoch's hierarchy on unaugmented tangent embeddings and lifts its
/// prototypes with the current curvatures.
pub fn build_hierarchy(model: &Model<f64>, features: &FeatureMatrix, cfg: &TrainConfig, seed: u64) -> Result<Hierarchy<f64>> {
    let tangents = embed_all(model, features)?;
    let mut h = Hierarchy::build(
        &tangents,
        model.embedding_width(),
        &cfg.hierarchy_levels,
        cfg.kmeans_iters,
        seed,
    )?;
    h.lift_all(&model.curvatures(), model.clip_norm())?;
    Ok(h)
}

/// Trains a model on `features` (rows are items).
pub fn train(features: &FeatureMatrix, cfg: &TrainConfig) -> Result<TrainOutput> {
    train_with(features, cfg, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with(
    features: &FeatureMatrix,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutput> {
    cfg.validate()?;
    let n = features.rows();
    let d_in = features.dim();
    let mut model = init_model(d_in, cfg)?;
    if cfg.epochs == 0 {
        return Ok(TrainOutput {
            model,
            metrics: Vec::new(),
        });
    }
    if n < cfg.batch_size {
        return Err(Error::invalid(format!(
            "dataset has {n} items, fewer than the batch size {}",
            cfg.batch_size
        )));
    }
    let weights = cfg.loss_weights()?;
    let sigma = features.column_std();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let batches: Vec<usize> = {
        let full = n / cfg.batch_size;
        let rest = n % cfg.batch_size;
        let mut b = vec![cfg.batch_size; full];
        if rest >= 2 {
            b.push(rest);
        }
        b
    };
    let total_steps = cfg.epochs * batches.len();
    let mut step = 0;
    let mut order: Vec<usize> = (0..n).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut hierarchy = if cfg.uses_hierarchy() {
            Some(build_hierarchy(&model, features, cfg, cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9))?)
        } else {
            None
        };
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut lr = cfg.lr_start;
        let mut start = 0;
        for (b, &size) in batches.iter().enumerate() {
            let ids = &order[start..start + size];
            start += size;
            let mut v1 = Vec::with_capacity(size * d_in);
            let mut v2 = Vec::with_capacity(size * d_in);
            for &i in ids {
                let (a, c) = augment_views(features.row(i), &sigma, cfg.noise_std, cfg.mask_prob, &mut rng);
                v1.extend(a);
                v2.extend(c);
            }
            let positives = match &hierarchy {
                Some(h) if cfg.lambda_ins > 0.0 => objective::sample_positives(h, ids, &mut rng)?,
                _ => Vec::new(),
            };
            let targets = hierarchy.as_ref().map(|h| Targets {
                hierarchy: h,
                positives: &positives,
            });
            let report = |e: Error| match e {
                Error::NumericalFailure(m) => Error::NumericalFailure(format!("epoch {epoch}, batch {}: {m}", b + 1)),
                Error::DegenerateAggregation(v) => Error::NumericalFailure(format!(
                    "epoch {epoch}, batch {}: degenerate codeword aggregation (|<s,s>_L| = {v:e})",
                    b + 1
                )),
                other => other,
            };
            let (loss, grads) = objective::gradients(&model, ids, [&v1, &v2], targets, &weights).map_err(report)?;
            lr = lr_at(step, total_steps, cfg);
            step += 1;

            for (w, g) in model.projector.weights_mut().iter_mut().zip(&grads.projector_weights) {
                *w -= lr * g;
            }
            for (w, g) in model.projector.bias_mut().iter_mut().zip(&grads.projector_bias) {
                *w -= lr * g;
            }
            let width = model.subspace_dim() + 1;
            for (sub, g) in model.codebook.subs_mut().iter_mut().zip(&grads.codewords) {
                let theta = sub.curvature();
                for (c, gc) in sub.coords_mut().chunks_exact_mut(width).zip(g.chunks_exact(width)) {
                    riemannian_step_raw(c, gc, theta, lr);
                }
            }
            if cfg.learn_curvature {
                for (sub, &g) in model.codebook.subs_mut().iter_mut().zip(&grads.log_curvature) {
                    let theta = (sub.curvature().ln() - lr * g).exp();
                    if !(theta > 0.0 && theta.is_finite()) {
                        return Err(Error::NumericalFailure(format!(
                            "epoch {epoch}, batch {}: curvature of subspace {} left the valid range",
                            b + 1,
                            sub.index()
                        )));
                    }
                    sub.set_curvature(theta);
                }
                if let Some(h) = hierarchy.as_mut() {
                    h.lift_all(&model.curvatures(), model.clip_norm())?;
                }
            }
            for (s, v) in sums.iter_mut().zip([loss.aug, loss.prot, loss.ins, loss.total]) {
                *s += v;
            }
        }
        let nb = batches.len() as f64;
        let record = EpochMetrics {
            epoch,
            loss_aug: sums[0] / nb,
            loss_prot: sums[1] / nb,
            loss_ins: sums[2] / nb,
            loss_total: sums[3] / nb,
            mean_quant_error: mean_quantization_error(&model, features)?,
            lr,
        };
        on_epoch(&record);
        metrics.push(record);
    }
    Ok(TrainOutput { model, metrics })
}
