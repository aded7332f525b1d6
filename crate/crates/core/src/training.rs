//! Losses, their gradients, and the training loops.
//!
//! Level 1 fits the restructuring stack with a softmax identity classifier
//! on set descriptors. Level 2 either alternates between coding (θ frozen)
//! and an SGD step on θ (coding matrix frozen) over sampled set pairs, or,
//! for the restructuring-only model, minimizes a margin contrastive loss on
//! descriptor distances.
//!
//! All loops canonicalize the element order of every training set before
//! touching it, so permuting elements inside any set leaves the parameter
//! trajectory bit-identical.

use std::fmt;

use log::{info, warn};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dfa::{code_set, CodingConfig, CodingMatrix, Norm};
use crate::error::{PifrError, Result};
use crate::numerics::DenseMatrix;
use crate::rsa::{rsa_backward, rsa_forward, RsaConfig, RsaGradients, RsaParams, RsaTape};
use crate::setrep::{canonical_order, pool_set, set_average, FeatureSet, PooledSet};

/// Whether a pair shares an identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairLabel {
    Match,
    NonMatch,
}

impl PairLabel {
    pub fn alpha(self) -> f64 {
        match self {
            PairLabel::Match => 1.0,
            PairLabel::NonMatch => -1.0,
        }
    }

    pub fn from_alpha(alpha: i32) -> Result<Self> {
        match alpha {
            1 => Ok(PairLabel::Match),
            -1 => Ok(PairLabel::NonMatch),
            other => Err(PifrError::Config(format!("pair label must be +1 or -1, got {other}"))),
        }
    }

    /// Label of two labeled sets; unlabeled sets are an error.
    pub fn from_identities(a: Option<u32>, b: Option<u32>) -> Result<Self> {
        match (a, b) {
            (Some(x), Some(y)) if x == y => Ok(PairLabel::Match),
            (Some(_), Some(_)) => Ok(PairLabel::NonMatch),
            _ => Err(PifrError::Data("pair label needs identity-labeled sets".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Level-2 epochs.
    pub epochs: usize,
    pub pairs_per_epoch: usize,
    /// Contrastive margin on descriptor distances.
    pub margin: f64,
    pub seed: u64,
    pub coding: CodingConfig,
    pub level1_epochs: usize,
    /// Floor `-margin_recon` for the reconstruction term of non-matching pairs.
    pub margin_recon: f64,
    /// Size of the frozen pair pool whose loss is tracked per epoch.
    pub validation_pairs: usize,
    /// Per-step gradient norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            epochs: 5,
            pairs_per_epoch: 200,
            margin: 1.0,
            seed: 0,
            coding: CodingConfig::default(),
            level1_epochs: 10,
            margin_recon: 10.0,
            validation_pairs: 64,
            clip_norm: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is allowed: it is the "leave θ alone" setting.
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(PifrError::Config(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(PifrError::Config(format!("margin must be > 0, got {}", self.margin)));
        }
        if !(self.margin_recon.is_finite() && self.margin_recon > 0.0) {
            return Err(PifrError::Config(format!(
                "reconstruction margin must be > 0, got {}",
                self.margin_recon
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(PifrError::Config(format!("gradient clip norm must be > 0, got {c}")));
            }
        }
        if self.epochs > 0 && self.pairs_per_epoch == 0 {
            return Err(PifrError::Config("pairs per epoch must be >= 1".into()));
        }
        self.coding.validate()
    }
}

/// Plain SGD step, with the whole gradient rescaled to norm `clip_norm`
/// when it is longer.
pub fn sgd_update(params: &mut RsaParams, grads: &RsaGradients, config: &TrainConfig) {
    let mut lr = config.lr;
    if let Some(cap) = config.clip_norm {
        let norm = grads.to_flat().iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > cap {
            lr *= cap / norm;
        }
    }
    params.sgd_step(grads, lr);
}

/// `(α/N)‖X̄ - ȲA‖² + (λ/(N·M))·R(A)`.
pub fn pifr_loss(
    probe: &PooledSet,
    gallery: &PooledSet,
    a: &CodingMatrix,
    alpha: PairLabel,
    lambda: f64,
    p: Norm,
) -> Result<f64> {
    let (n, m) = (probe.len() as f64, gallery.len() as f64);
    let err = reconstruction_error(probe, gallery, a)?;
    Ok(alpha.alpha() / n * err + lambda / (n * m) * p.penalty(a.a.data()))
}

/// `x_n - Σ_m a_mn y_m`, one row per probe vector.
pub fn reconstruction_residual(probe: &PooledSet, gallery: &PooledSet, a: &CodingMatrix) -> Result<Vec<Vec<f64>>> {
    if a.a.rows() != gallery.len() || a.a.cols() != probe.len() {
        return Err(PifrError::Dimension(format!(
            "coding matrix is {}x{}, expected {}x{}",
            a.a.rows(),
            a.a.cols(),
            gallery.len(),
            probe.len()
        )));
    }
    if probe.d() != gallery.d() {
        return Err(PifrError::Dimension(format!(
            "probe has D = {}, gallery has D = {}",
            probe.d(),
            gallery.d()
        )));
    }
    Ok(probe
        .vectors()
        .iter()
        .enumerate()
        .map(|(col, x)| {
            let mut r = x.clone();
            for (row, y) in gallery.vectors().iter().enumerate() {
                let c = a.a[(row, col)];
                for (ri, yi) in r.iter_mut().zip(y) {
                    *ri -= c * yi;
                }
            }
            r
        })
        .collect())
}

fn reconstruction_error(probe: &PooledSet, gallery: &PooledSet, a: &CodingMatrix) -> Result<f64> {
    Ok(reconstruction_residual(probe, gallery, a)?
        .iter()
        .flatten()
        .map(|v| v * v)
        .sum())
}

/// Gradients of the loss with respect to the pooled vectors, `A` held fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledGradients {
    /// One row per probe vector.
    pub d_probe: Vec<Vec<f64>>,
    /// One row per gallery vector.
    pub d_gallery: Vec<Vec<f64>>,
}

/// `∂L/∂X̄ = (2α/N)(X̄ - ȲA)`, `∂L/∂Ȳ = -(2α/N)(X̄ - ȲA)Aᵀ`.
pub fn loss_grad_pooled(
    probe: &PooledSet,
    gallery: &PooledSet,
    a: &CodingMatrix,
    alpha: PairLabel,
) -> Result<PooledGradients> {
    let resid = reconstruction_residual(probe, gallery, a)?;
    let scale = 2.0 * alpha.alpha() / probe.len() as f64;
    let d_probe: Vec<Vec<f64>> = resid.iter().map(|r| r.iter().map(|v| scale * v).collect()).collect();
    let d_gallery = (0..gallery.len())
        .map(|row| {
            let mut g = vec![0.0; gallery.d()];
            for (col, r) in resid.iter().enumerate() {
                let c = a.a[(row, col)];
                for (gi, ri) in g.iter_mut().zip(r) {
                    *gi -= scale * c * ri;
                }
            }
            g
        })
        .collect();
    Ok(PooledGradients { d_probe, d_gallery })
}

/// Backward of global average pooling: each pooled gradient is divided by
/// `H·W` and copied to every plane position.
pub fn pool_backward(d_pooled: &[Vec<f64>], h: usize, w: usize) -> Vec<Vec<f64>> {
    let hw = h * w;
    let inv = 1.0 / hw as f64;
    d_pooled
        .iter()
        .map(|g| {
            let scaled: Vec<f64> = g.iter().map(|v| v * inv).collect();
            scaled.iter().cycle().take(hw * g.len()).copied().collect()
        })
        .collect()
}

/// Reconstruction term of the loss as used for training: the α = -1 branch
/// is clamped from below at `-margin_recon`. Returns the value and whether
/// the clamp is active (no gradient flows then).
fn clamped_recon(err_over_n: f64, alpha: PairLabel, margin_recon: f64) -> (f64, bool) {
    let term = alpha.alpha() * err_over_n;
    if term < -margin_recon {
        (-margin_recon, true)
    } else {
        (term, false)
    }
}

/// Loss and θ-gradient of one pair.
#[derive(Debug, Clone)]
pub struct PairStep {
    pub loss: f64,
    pub coding: CodingMatrix,
    /// `None` when the loss is flat in θ (clamped non-matching pair).
    pub grads: Option<RsaGradients>,
}

fn forward_pooled(set: &FeatureSet, params: &RsaParams, rsa: &RsaConfig) -> Result<(PooledSet, RsaTape)> {
    let (out, tape) = rsa_forward(set, params, rsa)?;
    Ok((pool_set(&out), tape))
}

fn backward_pooled(tape: &RsaTape, d_pooled: &[Vec<f64>]) -> Result<RsaGradients> {
    let (h, w, _) = tape.dims();
    rsa_backward(tape, &pool_backward(d_pooled, h, w)).map(|(g, _)| g)
}

/// Gradient of the training loss with respect to θ, with `A` fixed to `a`.
pub fn pair_gradients_frozen(
    probe: &FeatureSet,
    gallery: &FeatureSet,
    params: &RsaParams,
    rsa: &RsaConfig,
    a: &CodingMatrix,
    alpha: PairLabel,
) -> Result<RsaGradients> {
    let (xp, tp) = forward_pooled(probe, params, rsa)?;
    let (yp, tg) = forward_pooled(gallery, params, rsa)?;
    let g = loss_grad_pooled(&xp, &yp, a, alpha)?;
    let mut grads = backward_pooled(&tp, &g.d_probe)?;
    grads.accumulate(&backward_pooled(&tg, &g.d_gallery)?);
    Ok(grads)
}

/// One alternation step on a pair: code with θ frozen, then differentiate
/// with `A` frozen.
pub fn pair_step(
    probe: &FeatureSet,
    gallery: &FeatureSet,
    label: PairLabel,
    params: &RsaParams,
    rsa: &RsaConfig,
    config: &TrainConfig,
) -> Result<PairStep> {
    let (xp, tp) = forward_pooled(probe, params, rsa)?;
    let (yp, tg) = forward_pooled(gallery, params, rsa)?;
    let coding = code_set(&xp, &yp, &config.coding)?;
    let n = xp.len() as f64;
    let m = yp.len() as f64;
    let err = reconstruction_error(&xp, &yp, &coding)?;
    let (recon, clamped) = clamped_recon(err / n, label, config.margin_recon);
    let loss = recon + config.coding.lambda / (n * m) * config.coding.p.penalty(coding.a.data());
    if !loss.is_finite() {
        return Err(PifrError::NonFinite("pair loss".into()));
    }
    let grads = if clamped {
        None
    } else {
        let g = loss_grad_pooled(&xp, &yp, &coding, label)?;
        let mut grads = backward_pooled(&tp, &g.d_probe)?;
        grads.accumulate(&backward_pooled(&tg, &g.d_gallery)?);
        Some(grads)
    };
    Ok(PairStep { loss, coding, grads })
}

/// One side of a training pair: a set, or a subset of its elements.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairMember {
    pub set: usize,
    /// Element indices into the (canonicalized) set; `None` means all.
    pub elements: Option<Vec<usize>>,
}

impl PairMember {
    pub fn whole(set: usize) -> Self {
        Self { set, elements: None }
    }

    fn materialize(&self, sets: &[FeatureSet]) -> FeatureSet {
        match &self.elements {
            None => sets[self.set].clone(),
            Some(idx) => sets[self.set].permuted(idx),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingPair {
    pub probe: PairMember,
    pub gallery: PairMember,
    pub label: PairLabel,
}

/// Sets with elements sorted into canonical order.
pub fn canonicalize_sets(sets: &[FeatureSet]) -> Vec<FeatureSet> {
    sets.iter()
        .map(|s| s.permuted(&canonical_order(s.maps())))
        .collect()
}

/// Identity → set indices, identities in ascending order.
fn group_by_identity(sets: &[FeatureSet]) -> Result<Vec<(u32, Vec<usize>)>> {
    let mut groups: Vec<(u32, Vec<usize>)> = Vec::new();
    for (i, s) in sets.iter().enumerate() {
        let id = s
            .identity()
            .ok_or_else(|| PifrError::Data(format!("training set {i} has no identity label")))?;
        match groups.iter_mut().find(|(g, _)| *g == id) {
            Some((_, v)) => v.push(i),
            None => groups.push((id, vec![i])),
        }
    }
    groups.sort_by_key(|(id, _)| *id);
    if groups.len() < 2 {
        return Err(PifrError::Data(format!(
            "training needs at least 2 identities, found {}",
            groups.len()
        )));
    }
    Ok(groups)
}

/// Draws `count` pairs alternating match / non-match, starting with a match.
///
/// A matching pair uses two distinct sets of one identity; an identity with
/// a single set contributes two disjoint random halves of it instead.
pub fn sample_pairs<R: Rng + ?Sized>(sets: &[FeatureSet], count: usize, rng: &mut R) -> Result<Vec<TrainingPair>> {
    let groups = group_by_identity(sets)?;
    let positive_ok: Vec<&(u32, Vec<usize>)> = groups
        .iter()
        .filter(|(_, v)| v.len() >= 2 || sets[v[0]].len() >= 2)
        .collect();
    if positive_ok.is_empty() {
        return Err(PifrError::Data(
            "no identity has two sets or a set with two elements; cannot form matching pairs".into(),
        ));
    }
    let mut pairs = Vec::with_capacity(count);
    for k in 0..count {
        if k % 2 == 0 {
            let (_, members) = positive_ok.choose(rng).expect("non-empty");
            if members.len() >= 2 {
                let picked: Vec<usize> = members.choose_multiple(rng, 2).copied().collect();
                pairs.push(TrainingPair {
                    probe: PairMember::whole(picked[0]),
                    gallery: PairMember::whole(picked[1]),
                    label: PairLabel::Match,
                });
            } else {
                let set = members[0];
                let mut idx: Vec<usize> = (0..sets[set].len()).collect();
                idx.shuffle(rng);
                let half = idx.len() / 2;
                let (mut a, mut b) = (idx[..half].to_vec(), idx[half..].to_vec());
                a.sort_unstable();
                b.sort_unstable();
                pairs.push(TrainingPair {
                    probe: PairMember { set, elements: Some(a) },
                    gallery: PairMember { set, elements: Some(b) },
                    label: PairLabel::Match,
                });
            }
        } else {
            let gi = rng.random_range(0..groups.len());
            let mut gj = rng.random_range(0..groups.len() - 1);
            if gj >= gi {
                gj += 1;
            }
            let p = *groups[gi].1.choose(rng).expect("groups are non-empty");
            let g = *groups[gj].1.choose(rng).expect("groups are non-empty");
            pairs.push(TrainingPair {
                probe: PairMember::whole(p),
                gallery: PairMember::whole(g),
                label: PairLabel::NonMatch,
            });
        }
    }
    Ok(pairs)
}

fn common_d(sets: &[FeatureSet]) -> Result<usize> {
    let d = sets
        .first()
        .ok_or_else(|| PifrError::Data("no training sets".into()))?
        .d();
    if let Some((i, s)) = sets.iter().enumerate().find(|(_, s)| s.d() != d) {
        return Err(PifrError::Dimension(format!("set {i} has D = {}, set 0 has D = {d}", s.d())));
    }
    Ok(d)
}

/// Linear softmax classifier over set descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxHead {
    /// `K×D`.
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
    /// Identity of each output class.
    pub classes: Vec<u32>,
}

impl SoftmaxHead {
    pub fn zeros(classes: Vec<u32>, d: usize) -> Self {
        let k = classes.len();
        Self {
            weights: DenseMatrix::zeros(k, d),
            bias: vec![0.0; k],
            classes,
        }
    }

    pub fn probabilities(&self, descriptor: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = (0..self.classes.len())
            .map(|k| crate::numerics::dot(self.weights.row(k), descriptor) + self.bias[k])
            .collect();
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - top).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Level1Outcome {
    pub params: RsaParams,
    pub head: SoftmaxHead,
    /// Mean cross-entropy of each epoch.
    pub loss_history: Vec<f64>,
}

/// Cross-entropy pretraining of the stack with a softmax identity head,
/// one SGD step per set, sets visited in a seeded random order.
pub fn level1_pretrain(
    sets: &[FeatureSet],
    params: &RsaParams,
    rsa: &RsaConfig,
    config: &TrainConfig,
) -> Result<Level1Outcome> {
    config.validate()?;
    let groups = group_by_identity(sets)?;
    let d = common_d(sets)?;
    params.validate(rsa)?;
    let sets = canonicalize_sets(sets);
    let classes: Vec<u32> = groups.iter().map(|(id, _)| *id).collect();
    let mut head = SoftmaxHead::zeros(classes.clone(), d);
    let mut params = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = Vec::with_capacity(config.level1_epochs);

    for epoch in 0..config.level1_epochs {
        let mut order: Vec<usize> = (0..sets.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let set = &sets[i];
            let target = classes
                .binary_search(&set.identity().expect("checked by grouping"))
                .expect("class list covers all identities");
            let (pooled, tape) = forward_pooled(set, &params, rsa)?;
            let desc = set_average(&pooled).vector;
            let probs = head.probabilities(&desc);
            total += -probs[target].max(f64::MIN_POSITIVE).ln();

            let mut dlogits = probs;
            dlogits[target] -= 1.0;
            let mut d_desc = vec![0.0; d];
            for (k, &g) in dlogits.iter().enumerate() {
                for (dd, wv) in d_desc.iter_mut().zip(head.weights.row(k)) {
                    *dd += g * wv;
                }
            }
            let per_vector: Vec<f64> = d_desc.iter().map(|v| v / pooled.len() as f64).collect();
            let grads = backward_pooled(&tape, &vec![per_vector; pooled.len()])?;

            for (k, &g) in dlogits.iter().enumerate() {
                for (wv, x) in head.weights.row_mut(k).iter_mut().zip(&desc) {
                    *wv -= config.lr * g * x;
                }
                head.bias[k] -= config.lr * g;
            }
            sgd_update(&mut params, &grads, config);
        }
        let mean = total / sets.len() as f64;
        info!("level1 epoch={} sets={} mean_ce={mean:.6}", epoch + 1, sets.len());
        history.push(mean);
    }
    Ok(Level1Outcome {
        params,
        head,
        loss_history: history,
    })
}

/// `d²` for matching pairs, `max(0, margin - d)²` otherwise.
pub fn contrastive_loss(distance: f64, label: PairLabel, margin: f64) -> f64 {
    match label {
        PairLabel::Match => distance * distance,
        PairLabel::NonMatch => (margin - distance).max(0.0).powi(2),
    }
}

/// `∂ contrastive_loss / ∂ s_P` for descriptors `s_P`, `s_G`; the gallery
/// gradient is its negation. Zero at `d = 0` for non-matching pairs.
pub fn contrastive_grad(sp: &[f64], sg: &[f64], label: PairLabel, margin: f64) -> Vec<f64> {
    let diff: Vec<f64> = sp.iter().zip(sg).map(|(a, b)| a - b).collect();
    let dist = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = match label {
        PairLabel::Match => 2.0,
        PairLabel::NonMatch if dist > 0.0 && dist < margin => -2.0 * (margin - dist) / dist,
        PairLabel::NonMatch => 0.0,
    };
    diff.into_iter().map(|v| scale * v).collect()
}

fn descriptor_and_tape(set: &FeatureSet, params: &RsaParams, rsa: &RsaConfig) -> Result<(Vec<f64>, usize, RsaTape)> {
    let (pooled, tape) = forward_pooled(set, params, rsa)?;
    Ok((set_average(&pooled).vector, pooled.len(), tape))
}

/// Loss and θ-gradient of the contrastive objective on one pair.
pub fn contrastive_step(
    probe: &FeatureSet,
    gallery: &FeatureSet,
    label: PairLabel,
    params: &RsaParams,
    rsa: &RsaConfig,
    margin: f64,
) -> Result<(f64, RsaGradients)> {
    let (sp, np, tp) = descriptor_and_tape(probe, params, rsa)?;
    let (sg, ng, tg) = descriptor_and_tape(gallery, params, rsa)?;
    let dist = crate::setrep::euclidean(&sp, &sg);
    let loss = contrastive_loss(dist, label, margin);
    let gp = contrastive_grad(&sp, &sg, label, margin);
    let spread = |g: &[f64], n: usize, sign: f64| vec![g.iter().map(|v| sign * v / n as f64).collect::<Vec<_>>(); n];
    let mut grads = backward_pooled(&tp, &spread(&gp, np, 1.0))?;
    grads.accumulate(&backward_pooled(&tg, &spread(&gp, ng, -1.0))?);
    Ok((loss, grads))
}

/// Per-epoch record of a Level-2 run.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub pairs: usize,
    pub mean_loss: f64,
    pub failures: usize,
    /// Mean loss over the frozen validation pool after this epoch.
    pub validation_loss: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} pairs={} mean_loss={:.9} failures={} validation_loss={:.9}",
            self.epoch, self.pairs, self.mean_loss, self.failures, self.validation_loss
        )
    }
}

#[derive(Debug, Clone)]
pub struct Level2Outcome {
    pub params: RsaParams,
    /// Validation loss before the first update.
    pub initial_validation_loss: f64,
    pub epochs: Vec<EpochLog>,
}

impl Level2Outcome {
    /// Loss trace as text, one line per epoch.
    pub fn log_lines(&self) -> String {
        let mut out = format!("epoch=0 validation_loss={:.9}\n", self.initial_validation_loss);
        for e in &self.epochs {
            out.push_str(&e.to_string());
            out.push('\n');
        }
        out
    }
}

const VALIDATION_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

fn validation_pool(sets: &[FeatureSet], config: &TrainConfig) -> Result<Vec<TrainingPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ VALIDATION_STREAM);
    sample_pairs(sets, config.validation_pairs, &mut rng)
}

/// Mean training loss (clamped) of the alternation objective over `pairs`;
/// pairs whose coding fails are skipped.
pub fn bilevel_validation_loss(
    sets: &[FeatureSet],
    pairs: &[TrainingPair],
    params: &RsaParams,
    rsa: &RsaConfig,
    config: &TrainConfig,
) -> Result<f64> {
    let mut total = 0.0;
    let mut used = 0usize;
    for pair in pairs {
        let p = pair.probe.materialize(sets);
        let g = pair.gallery.materialize(sets);
        if let Ok(step) = pair_step(&p, &g, pair.label, params, rsa, config) {
            total += step.loss;
            used += 1;
        }
    }
    Ok(if used == 0 { f64::NAN } else { total / used as f64 })
}

fn contrastive_validation_loss(
    sets: &[FeatureSet],
    pairs: &[TrainingPair],
    params: &RsaParams,
    rsa: &RsaConfig,
    margin: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for pair in pairs {
        let (sp, _, _) = descriptor_and_tape(&pair.probe.materialize(sets), params, rsa)?;
        let (sg, _, _) = descriptor_and_tape(&pair.gallery.materialize(sets), params, rsa)?;
        total += contrastive_loss(crate::setrep::euclidean(&sp, &sg), pair.label, margin);
    }
    Ok(if pairs.is_empty() { f64::NAN } else { total / pairs.len() as f64 })
}

fn is_cold(params: &RsaParams) -> bool {
    params.omega.iter().flatten().all(|&g| g == 0.0)
}

/// Failure budget: more than this fraction of failed pairs aborts.
const MAX_FAILURE_RATE: f64 = 0.1;

/// The alternating optimization: per sampled pair, code with θ frozen,
/// then one SGD step on θ with the coding matrix frozen.
pub fn bilevel_train(
    sets: &[FeatureSet],
    params: &RsaParams,
    rsa: &RsaConfig,
    config: &TrainConfig,
) -> Result<Level2Outcome> {
    config.validate()?;
    common_d(sets)?;
    params.validate(rsa)?;
    if is_cold(params) && config.epochs > 0 {
        warn!("level-2 training from a cold start (all gates zero)");
    }
    let sets = canonicalize_sets(sets);
    let validation = validation_pool(&sets, config)?;
    let mut params = params.clone();
    let initial = bilevel_validation_loss(&sets, &validation, &params, rsa, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut epochs = Vec::with_capacity(config.epochs);
    let (mut attempted, mut failed) = (0usize, 0usize);

    for epoch in 1..=config.epochs {
        let pairs = sample_pairs(&sets, config.pairs_per_epoch, &mut rng)?;
        let (mut total, mut used, mut failures) = (0.0, 0usize, 0usize);
        for (k, pair) in pairs.iter().enumerate() {
            attempted += 1;
            let p = pair.probe.materialize(&sets);
            let g = pair.gallery.materialize(&sets);
            match pair_step(&p, &g, pair.label, &params, rsa, config) {
                Ok(step) => {
                    total += step.loss;
                    used += 1;
                    if let Some(grads) = step.grads {
                        sgd_update(&mut params, &grads, config);
                    }
                }
                Err(e) => {
                    warn!("epoch {epoch} pair {k}: skipped ({e})");
                    failures += 1;
                    failed += 1;
                }
            }
        }
        if failed as f64 > MAX_FAILURE_RATE * attempted as f64 {
            return Err(PifrError::TooManyFailures {
                failures: failed,
                pairs: attempted,
            });
        }
        let log = EpochLog {
            epoch,
            pairs: pairs.len(),
            mean_loss: if used == 0 { f64::NAN } else { total / used as f64 },
            failures,
            validation_loss: bilevel_validation_loss(&sets, &validation, &params, rsa, config)?,
        };
        info!("level2 {log}");
        epochs.push(log);
    }
    Ok(Level2Outcome {
        params,
        initial_validation_loss: initial,
        epochs,
    })
}

/// Contrastive training of the restructuring-only model on sampled pairs.
pub fn contrastive_pretrain(
    sets: &[FeatureSet],
    params: &RsaParams,
    rsa: &RsaConfig,
    config: &TrainConfig,
) -> Result<Level2Outcome> {
    config.validate()?;
    common_d(sets)?;
    params.validate(rsa)?;
    let sets = canonicalize_sets(sets);
    let validation = validation_pool(&sets, config)?;
    let mut params = params.clone();
    let initial = contrastive_validation_loss(&sets, &validation, &params, rsa, config.margin)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let pairs = sample_pairs(&sets, config.pairs_per_epoch, &mut rng)?;
        let mut total = 0.0;
        for pair in &pairs {
            let (loss, grads) = contrastive_step(
                &pair.probe.materialize(&sets),
                &pair.gallery.materialize(&sets),
                pair.label,
                &params,
                rsa,
                config.margin,
            )?;
            total += loss;
            sgd_update(&mut params, &grads, config);
        }
        let log = EpochLog {
            epoch,
            pairs: pairs.len(),
            mean_loss: total / pairs.len() as f64,
            failures: 0,
            validation_loss: contrastive_validation_loss(&sets, &validation, &params, rsa, config.margin)?,
        };
        info!("contrastive {log}");
        epochs.push(log);
    }
    Ok(Level2Outcome {
        params,
        initial_validation_loss: initial,
        epochs,
    })
}

/// Which objective the second training level uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level2 {
    /// Alternating coding / SGD (the full matcher).
    Bilevel,
    /// Margin contrastive loss on descriptors (restructuring-only model).
    Contrastive,
    Off,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub initial: RsaParams,
    pub params: RsaParams,
    pub level1_history: Vec<f64>,
    pub level2: Option<Level2Outcome>,
}

/// Seeded initialization, Level 1, then the chosen Level 2.
pub fn train(sets: &[FeatureSet], rsa: &RsaConfig, config: &TrainConfig, level2: Level2) -> Result<TrainOutcome> {
    config.validate()?;
    rsa.validate()?;
    let d = common_d(sets)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let initial = RsaParams::init(rsa, d, &mut rng);
    let level1 = if config.level1_epochs > 0 {
        Some(level1_pretrain(sets, &initial, rsa, config)?)
    } else {
        None
    };
    let (params, level1_history) = match level1 {
        Some(o) => (o.params, o.loss_history),
        None => (initial.clone(), Vec::new()),
    };
    let (params, level2) = match level2 {
        Level2::Off => (params, None),
        Level2::Bilevel => {
            let o = bilevel_train(sets, &params, rsa, config)?;
            (o.params.clone(), Some(o))
        }
        Level2::Contrastive => {
            let o = contrastive_pretrain(sets, &params, rsa, config)?;
            (o.params.clone(), Some(o))
        }
    };
    Ok(TrainOutcome {
        initial,
        params,
        level1_history,
        level2,
    })
}
