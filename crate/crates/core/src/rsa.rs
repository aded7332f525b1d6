//! Residual self-attention over all position-vectors of a feature set.
//!
//! Every position-vector `x_i` (one per map and plane position) is updated
//! by `L` residual blocks
//!
//! ```text
//! x_i^l = x_i^{l-1} + Ω^l ⊙ (1/C_i) Σ_{j≠i} ω_ij Δ_ij (x_j^{l-1} - x_i^{l-1})
//! C_i   = Σ_{j≠i} ω_ij Δ_ij
//! ω_ij  = exp((Ψ x_i^0)ᵀ (Φ x_j^0))
//! Δ_ij  = exp(-‖hw_i - hw_j‖² / σ)
//! ```
//!
//! The affinity `ω` is computed once from the input features and shared by
//! all blocks. Sums over `j` run in the canonical order of the set's maps,
//! which makes the stack exactly permutation-equivariant.

use rand::Rng;

use crate::error::{PifrError, Result};
use crate::numerics::{dot, DenseMatrix};
use crate::setrep::{reduction_order, FeatureMap, FeatureSet, Summation};

#[derive(Debug, Clone, PartialEq)]
pub struct RsaConfig {
    pub blocks: usize,
    pub embed_dim: usize,
    pub sigma: f64,
    /// Map plane coordinates to `[0,1]²` before computing `Δ`.
    pub coord_normalization: bool,
    pub summation: Summation,
}

impl RsaConfig {
    pub const DEFAULT_BLOCKS: usize = 5;
    pub const DEFAULT_SIGMA: f64 = 0.5;

    /// Defaults for feature dimension `d`: five blocks, `σ = 0.5`,
    /// embedding width `max(1, d/2)`.
    pub fn for_dim(d: usize) -> Self {
        Self {
            blocks: Self::DEFAULT_BLOCKS,
            embed_dim: (d / 2).max(1),
            sigma: Self::DEFAULT_SIGMA,
            coord_normalization: true,
            summation: Summation::Canonical,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(PifrError::Config("RSA needs at least one block".into()));
        }
        if self.embed_dim == 0 {
            return Err(PifrError::Config("embedding dimension must be >= 1".into()));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(PifrError::Config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Learnable parameters `θ = {Ω^1..Ω^L, Ψ, Φ}`.
#[derive(Debug, Clone, PartialEq)]
pub struct RsaParams {
    /// One channel-wise gate per block.
    pub omega: Vec<Vec<f64>>,
    /// Query embedding, `d_e × D`.
    pub psi: DenseMatrix,
    /// Key embedding, `d_e × D`.
    pub phi: DenseMatrix,
}

impl RsaParams {
    /// Zero gates (the stack starts as the identity) and embeddings drawn
    /// uniformly from `±1/√D`.
    pub fn init<R: Rng + ?Sized>(config: &RsaConfig, d: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let mut draw = |rows: usize| {
            let data = (0..rows * d).map(|_| rng.random_range(-bound..bound)).collect();
            DenseMatrix::from_vec(rows, d, data).expect("finite by construction")
        };
        let psi = draw(config.embed_dim);
        let phi = draw(config.embed_dim);
        Self {
            omega: vec![vec![0.0; d]; config.blocks],
            psi,
            phi,
        }
    }

    pub fn zeros(config: &RsaConfig, d: usize) -> Self {
        Self {
            omega: vec![vec![0.0; d]; config.blocks],
            psi: DenseMatrix::zeros(config.embed_dim, d),
            phi: DenseMatrix::zeros(config.embed_dim, d),
        }
    }

    pub fn blocks(&self) -> usize {
        self.omega.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.psi.rows()
    }

    pub fn d(&self) -> usize {
        self.psi.cols()
    }

    pub fn validate(&self, config: &RsaConfig) -> Result<()> {
        let d = self.d();
        if self.omega.len() != config.blocks {
            return Err(PifrError::Dimension(format!(
                "{} gate vectors for {} blocks",
                self.omega.len(),
                config.blocks
            )));
        }
        if self.omega.iter().any(|o| o.len() != d) {
            return Err(PifrError::Dimension("gate vector length differs from D".into()));
        }
        if self.psi.rows() != config.embed_dim
            || self.phi.rows() != config.embed_dim
            || self.phi.cols() != d
        {
            return Err(PifrError::Dimension(format!(
                "embeddings are {}x{} and {}x{}, expected {}x{d}",
                self.psi.rows(),
                self.psi.cols(),
                self.phi.rows(),
                self.phi.cols(),
                config.embed_dim
            )));
        }
        if self.to_flat().iter().any(|v| !v.is_finite()) {
            return Err(PifrError::NonFinite("RSA parameter".into()));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.omega.len() * self.d() + self.psi.data().len() + self.phi.data().len()
    }

    /// Flattened as `Ω^1..Ω^L, Ψ (row-major), Φ (row-major)`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for o in &self.omega {
            out.extend_from_slice(o);
        }
        out.extend_from_slice(self.psi.data());
        out.extend_from_slice(self.phi.data());
        out
    }

    /// Inverse of [`to_flat`](Self::to_flat) for parameters shaped like `self`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(PifrError::Dimension(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let d = self.d();
        let (l, e) = (self.blocks(), self.embed_dim());
        let omega = flat[..l * d].chunks(d).map(<[f64]>::to_vec).collect();
        let psi = DenseMatrix::from_vec(e, d, flat[l * d..l * d + e * d].to_vec())?;
        let phi = DenseMatrix::from_vec(e, d, flat[l * d + e * d..].to_vec())?;
        Ok(Self { omega, psi, phi })
    }

    /// In-place `θ ← θ - lr·g`.
    pub fn sgd_step(&mut self, grads: &RsaGradients, lr: f64) {
        for (o, g) in self.omega.iter_mut().zip(&grads.d_omega) {
            for (a, b) in o.iter_mut().zip(g) {
                *a -= lr * b;
            }
        }
        let d = self.d();
        for (dst, src) in [(&mut self.psi, &grads.d_psi), (&mut self.phi, &grads.d_phi)] {
            for i in 0..dst.rows() {
                for j in 0..d {
                    dst[(i, j)] -= lr * src[(i, j)];
                }
            }
        }
    }
}

/// Gradients shaped like [`RsaParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct RsaGradients {
    pub d_omega: Vec<Vec<f64>>,
    pub d_psi: DenseMatrix,
    pub d_phi: DenseMatrix,
}

impl RsaGradients {
    pub fn zeros_like(params: &RsaParams) -> Self {
        Self {
            d_omega: vec![vec![0.0; params.d()]; params.blocks()],
            d_psi: DenseMatrix::zeros(params.embed_dim(), params.d()),
            d_phi: DenseMatrix::zeros(params.embed_dim(), params.d()),
        }
    }

    pub fn accumulate(&mut self, other: &RsaGradients) {
        for (a, b) in self.d_omega.iter_mut().zip(&other.d_omega) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (dst, src) in [(&mut self.d_psi, &other.d_psi), (&mut self.d_phi, &other.d_phi)] {
            for i in 0..dst.rows() {
                for j in 0..dst.cols() {
                    dst[(i, j)] += src[(i, j)];
                }
            }
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for o in &self.d_omega {
            out.extend_from_slice(o);
        }
        out.extend_from_slice(self.d_psi.data());
        out.extend_from_slice(self.d_phi.data());
        out
    }
}

/// Plane coordinates of position `p` in an `h × w` map.
fn plane_coords(p: usize, h: usize, w: usize, normalize: bool) -> (f64, f64) {
    let (r, c) = ((p / w) as f64, (p % w) as f64);
    if normalize {
        let nr = if h > 1 { r / (h - 1) as f64 } else { 0.0 };
        let nc = if w > 1 { c / (w - 1) as f64 } else { 0.0 };
        (nr, nc)
    } else {
        (r, c)
    }
}

/// Spatial similarity table between plane positions, `(H·W) × (H·W)`.
fn plane_delta(h: usize, w: usize, config: &RsaConfig) -> DenseMatrix {
    let hw = h * w;
    let coords: Vec<_> = (0..hw)
        .map(|p| plane_coords(p, h, w, config.coord_normalization))
        .collect();
    let mut t = DenseMatrix::zeros(hw, hw);
    for a in 0..hw {
        for b in 0..hw {
            let (dr, dc) = (coords[a].0 - coords[b].0, coords[a].1 - coords[b].1);
            t[(a, b)] = (-(dr * dr + dc * dc) / config.sigma).exp();
        }
    }
    t
}

/// `Δ` over all `N·H·W` position-vectors. Positions in different maps are
/// compared by their plane coordinates alone.
pub fn build_spatial_delta(h: usize, w: usize, n: usize, config: &RsaConfig) -> DenseMatrix {
    let hw = h * w;
    let table = plane_delta(h, w, config);
    let k = n * hw;
    let mut delta = DenseMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            delta[(i, j)] = table[(i % hw, j % hw)];
        }
    }
    delta
}

/// Precomputed affinity for one input set.
///
/// Rows and columns index position-vectors `k = n·H·W + p`, where `n` walks
/// the set's maps in [`order`](Self::order), not storage order.
#[derive(Debug, Clone)]
pub struct AffinityCache {
    /// Storage indices of the maps, in reduction order.
    pub order: Vec<usize>,
    /// `ω_ij`, each row shifted by its largest off-diagonal logit. The
    /// diagonal is unused and stored as zero.
    pub omega_matrix: DenseMatrix,
    pub delta_matrix: DenseMatrix,
    /// `C_i` per row.
    pub norm: Vec<f64>,
    /// Set when the set holds a single position-vector and `C` is an empty sum.
    pub degenerate: bool,
    hw: usize,
    // Embeddings Ψx⁰ and Φx⁰, kept for the backward pass.
    query: DenseMatrix,
    key: DenseMatrix,
}

impl AffinityCache {
    pub fn positions(&self) -> usize {
        self.norm.len()
    }

    /// Normalized weights `ω_ij Δ_ij / C_i` with a zero diagonal.
    fn weights(&self) -> DenseMatrix {
        let k = self.positions();
        let mut w = DenseMatrix::zeros(k, k);
        if self.degenerate {
            return w;
        }
        for i in 0..k {
            let inv = 1.0 / self.norm[i];
            for j in 0..k {
                if j != i {
                    w[(i, j)] = self.omega_matrix[(i, j)] * self.delta_matrix[(i, j)] * inv;
                }
            }
        }
        w
    }
}

fn check_input(x0: &FeatureSet, params: &RsaParams, config: &RsaConfig) -> Result<()> {
    config.validate()?;
    params.validate(config)?;
    if x0.d() != params.d() {
        return Err(PifrError::Dimension(format!(
            "set has D = {}, RSA parameters expect D = {}",
            x0.d(),
            params.d()
        )));
    }
    Ok(())
}

/// Position-vectors of `set` stacked in reduction order, `(N·H·W) × D`.
fn stack_positions(set: &FeatureSet, order: &[usize]) -> DenseMatrix {
    let (h, w, d) = set.dims();
    let mut x = DenseMatrix::zeros(order.len() * h * w, d);
    for (slot, &n) in order.iter().enumerate() {
        let vals = set.maps()[n].values();
        let base = slot * h * w * d;
        for (k, v) in vals.iter().enumerate() {
            x.row_mut((base + k) / d)[k % d] = *v;
        }
    }
    x
}

fn unstack_positions(x: &DenseMatrix, order: &[usize], h: usize, w: usize) -> Vec<Vec<f64>> {
    let hw = h * w;
    let d = x.cols();
    let mut maps = vec![Vec::new(); order.len()];
    for (slot, &n) in order.iter().enumerate() {
        maps[n] = x.data()[slot * hw * d..(slot + 1) * hw * d].to_vec();
    }
    maps
}

fn embed(x: &DenseMatrix, proj: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(x.rows(), proj.rows());
    for i in 0..x.rows() {
        for a in 0..proj.rows() {
            out[(i, a)] = dot(proj.row(a), x.row(i));
        }
    }
    out
}

pub fn build_affinity(x0: &FeatureSet, params: &RsaParams, config: &RsaConfig) -> Result<AffinityCache> {
    build_affinity_with(x0, params, config, true)
}

/// Like [`build_affinity`]; with `stabilize = false` the raw exponentials
/// are kept, which overflows for large logits. Exposed for checking that
/// the row shift does not change the forward output.
pub fn build_affinity_with(
    x0: &FeatureSet,
    params: &RsaParams,
    config: &RsaConfig,
    stabilize: bool,
) -> Result<AffinityCache> {
    check_input(x0, params, config)?;
    let (h, w, _) = x0.dims();
    let hw = h * w;
    let order = reduction_order(x0.maps(), config.summation);
    let x = stack_positions(x0, &order);
    let k = x.rows();

    let query = embed(&x, &params.psi);
    let key = embed(&x, &params.phi);
    let plane = plane_delta(h, w, config);

    let mut omega = DenseMatrix::zeros(k, k);
    let mut delta = DenseMatrix::zeros(k, k);
    let mut norm = vec![0.0; k];
    let degenerate = k == 1;
    let mut logits = vec![0.0; k];
    for i in 0..k {
        for j in 0..k {
            delta[(i, j)] = plane[(i % hw, j % hw)];
            logits[j] = if j == i { f64::NEG_INFINITY } else { dot(query.row(i), key.row(j)) };
        }
        if degenerate {
            break;
        }
        let shift = if stabilize {
            logits.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        } else {
            0.0
        };
        let mut c = 0.0;
        for j in 0..k {
            if j != i {
                let e = (logits[j] - shift).exp();
                omega[(i, j)] = e;
                c += e * delta[(i, j)];
            }
        }
        if !(c > 0.0) || !c.is_finite() {
            return Err(PifrError::NonFinite(format!(
                "attention normalizer at position {i} is {c}"
            )));
        }
        norm[i] = c;
    }

    Ok(AffinityCache {
        order,
        omega_matrix: omega,
        delta_matrix: delta,
        norm,
        degenerate,
        hw,
        query,
        key,
    })
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct RsaTape {
    cache: AffinityCache,
    weights: DenseMatrix,
    row_sums: Vec<f64>,
    /// `x^0 .. x^L`, stacked in reduction order.
    states: Vec<DenseMatrix>,
    /// Per-block neighbor residual `Σ_j W_ij (x_j - x_i)`.
    residuals: Vec<DenseMatrix>,
    omega: Vec<Vec<f64>>,
    psi: DenseMatrix,
    phi: DenseMatrix,
    dims: (usize, usize, usize),
}

impl RsaTape {
    pub fn cache(&self) -> &AffinityCache {
        &self.cache
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn set_len(&self) -> usize {
        self.cache.order.len()
    }
}

pub fn rsa_forward(x0: &FeatureSet, params: &RsaParams, config: &RsaConfig) -> Result<(FeatureSet, RsaTape)> {
    let cache = build_affinity(x0, params, config)?;
    rsa_forward_cached(x0, params, config, cache)
}

/// Forward pass with a prebuilt affinity.
pub fn rsa_forward_cached(
    x0: &FeatureSet,
    params: &RsaParams,
    config: &RsaConfig,
    cache: AffinityCache,
) -> Result<(FeatureSet, RsaTape)> {
    check_input(x0, params, config)?;
    let (h, w, d) = x0.dims();
    if cache.order.len() != x0.len() || cache.hw != h * w {
        return Err(PifrError::Dimension("affinity cache does not match the input set".into()));
    }
    let weights = cache.weights();
    let k = cache.positions();
    let row_sums: Vec<f64> = (0..k).map(|i| weights.row(i).iter().sum()).collect();

    let mut states = vec![stack_positions(x0, &cache.order)];
    let mut residuals = Vec::with_capacity(config.blocks);
    for gate in &params.omega {
        let prev = states.last().expect("x^0 is always present");
        let mut resid = DenseMatrix::zeros(k, d);
        let mut next = prev.clone();
        if !cache.degenerate {
            for i in 0..k {
                let xi = prev.row(i);
                let acc = resid.row_mut(i);
                for j in 0..k {
                    let wij = weights[(i, j)];
                    if j == i || wij == 0.0 {
                        continue;
                    }
                    for ((a, xj), xi) in acc.iter_mut().zip(prev.row(j)).zip(xi) {
                        *a += wij * (xj - xi);
                    }
                }
                for ((out, r), g) in next.row_mut(i).iter_mut().zip(resid.row(i)).zip(gate) {
                    *out += g * r;
                }
            }
        }
        residuals.push(resid);
        states.push(next);
    }

    let out_vals = unstack_positions(states.last().expect("non-empty"), &cache.order, h, w);
    let maps = out_vals
        .into_iter()
        .map(|v| FeatureMap::new(h, w, d, v))
        .collect::<Result<Vec<_>>>()?;
    let out = FeatureSet::new(maps, x0.identity())?;

    let tape = RsaTape {
        cache,
        weights,
        row_sums,
        states,
        residuals,
        omega: params.omega.clone(),
        psi: params.psi.clone(),
        phi: params.phi.clone(),
        dims: (h, w, d),
    };
    Ok((out, tape))
}

/// Reverse-mode gradients of a scalar loss through the stack.
///
/// `upstream[n]` is `∂loss/∂x_n^L` for the map stored at index `n` of the
/// forward input, laid out like [`FeatureMap::values`]. Returns the
/// parameter gradients and `∂loss/∂x^0` in the same layout.
pub fn rsa_backward(tape: &RsaTape, upstream: &[Vec<f64>]) -> Result<(RsaGradients, Vec<Vec<f64>>)> {
    let (h, w, d) = tape.dims;
    let hw = h * w;
    let order = &tape.cache.order;
    if upstream.len() != order.len() || upstream.iter().any(|g| g.len() != hw * d) {
        return Err(PifrError::Dimension(format!(
            "upstream gradient must be {} maps of {} values",
            order.len(),
            hw * d
        )));
    }
    let k = tape.cache.positions();
    let e = tape.psi.rows();

    let mut grad = DenseMatrix::zeros(k, d);
    for (slot, &n) in order.iter().enumerate() {
        for (idx, v) in upstream[n].iter().enumerate() {
            grad.row_mut(slot * hw + idx / d)[idx % d] = *v;
        }
    }

    let mut d_omega = vec![vec![0.0; d]; tape.omega.len()];
    let mut d_psi = DenseMatrix::zeros(e, d);
    let mut d_phi = DenseMatrix::zeros(e, d);

    if tape.cache.degenerate {
        let dx0 = unstack_positions(&grad, order, h, w);
        return Ok((RsaGradients { d_omega, d_psi, d_phi }, dx0));
    }

    let wts = &tape.weights;
    let mut d_weights = DenseMatrix::zeros(k, k);
    for l in (0..tape.omega.len()).rev() {
        let gate = &tape.omega[l];
        let resid = &tape.residuals[l];
        let prev = &tape.states[l];

        for i in 0..k {
            for ((acc, g), r) in d_omega[l].iter_mut().zip(grad.row(i)).zip(resid.row(i)) {
                *acc += g * r;
            }
        }

        let mut d_resid = DenseMatrix::zeros(k, d);
        for i in 0..k {
            for ((dr, g), om) in d_resid.row_mut(i).iter_mut().zip(grad.row(i)).zip(gate) {
                *dr = g * om;
            }
        }

        let mut next_grad = grad.clone();
        for i in 0..k {
            let s = tape.row_sums[i];
            for (ng, dr) in next_grad.row_mut(i).iter_mut().zip(d_resid.row(i)) {
                *ng -= s * dr;
            }
        }
        for i in 0..k {
            let dri = d_resid.row(i);
            let xi = prev.row(i);
            for j in 0..k {
                if j == i {
                    continue;
                }
                let wij = wts[(i, j)];
                let xj = prev.row(j);
                let mut dw = 0.0;
                for c in 0..d {
                    dw += dri[c] * (xj[c] - xi[c]);
                }
                d_weights[(i, j)] += dw;
                if wij != 0.0 {
                    for (ng, dr) in next_grad.row_mut(j).iter_mut().zip(dri) {
                        *ng += wij * dr;
                    }
                }
            }
        }
        grad = next_grad;
    }

    // Each row of the weights is a softmax over j of (logit_ij + ln Δ_ij).
    let mut d_logits = DenseMatrix::zeros(k, k);
    for i in 0..k {
        let mut inner = 0.0;
        for j in 0..k {
            inner += wts[(i, j)] * d_weights[(i, j)];
        }
        for j in 0..k {
            if j != i {
                d_logits[(i, j)] = wts[(i, j)] * (d_weights[(i, j)] - inner);
            }
        }
    }

    let query = &tape.cache.query;
    let key = &tape.cache.key;
    let mut d_query = DenseMatrix::zeros(k, e);
    let mut d_key = DenseMatrix::zeros(k, e);
    for i in 0..k {
        for j in 0..k {
            let s = d_logits[(i, j)];
            if s == 0.0 {
                continue;
            }
            for a in 0..e {
                d_query[(i, a)] += s * key[(j, a)];
                d_key[(j, a)] += s * query[(i, a)];
            }
        }
    }

    let x0 = &tape.states[0];
    for i in 0..k {
        let xi = x0.row(i);
        for a in 0..e {
            let (dq, dk) = (d_query[(i, a)], d_key[(i, a)]);
            for c in 0..d {
                d_psi[(a, c)] += dq * xi[c];
                d_phi[(a, c)] += dk * xi[c];
            }
        }
        let gi = grad.row_mut(i);
        for a in 0..e {
            let (dq, dk) = (d_query[(i, a)], d_key[(i, a)]);
            for c in 0..d {
                gi[c] += dq * tape.psi[(a, c)] + dk * tape.phi[(a, c)];
            }
        }
    }

    let dx0 = unstack_positions(&grad, order, h, w);
    Ok((RsaGradients { d_omega, d_psi, d_phi }, dx0))
}

/// Parameters plus their configuration, applied to whole sets.
#[derive(Debug, Clone, PartialEq)]
pub struct RsaModel {
    pub config: RsaConfig,
    pub params: RsaParams,
}

impl RsaModel {
    /// An untrained stack for dimension `d`; acts as the identity.
    pub fn identity(config: RsaConfig, d: usize) -> Self {
        let params = RsaParams::zeros(&config, d);
        Self { config, params }
    }

    pub fn restructure(&self, set: &FeatureSet) -> Result<FeatureSet> {
        rsa_forward(set, &self.params, &self.config).map(|(out, _)| out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, DenseVector};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(blocks: usize, embed_dim: usize) -> RsaConfig {
        RsaConfig {
            blocks,
            embed_dim,
            sigma: 0.5,
            coord_normalization: true,
            summation: Summation::Canonical,
        }
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, d: usize) -> FeatureSet {
        let maps = (0..n)
            .map(|_| {
                FeatureMap::new(h, w, d, (0..h * w * d).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .unwrap()
            })
            .collect();
        FeatureSet::new(maps, None).unwrap()
    }

    fn random_params(rng: &mut ChaCha8Rng, config: &RsaConfig, d: usize) -> RsaParams {
        let mut p = RsaParams::init(config, d, rng);
        for o in &mut p.omega {
            o.iter_mut().for_each(|v| *v = rng.random_range(-0.8..0.8));
        }
        p
    }

    #[test]
    fn spatial_delta_examples() {
        let c = cfg(1, 1);
        let delta = build_spatial_delta(1, 1, 4, &c);
        assert!(delta.data().iter().all(|&v| v == 1.0));

        let delta = build_spatial_delta(2, 1, 1, &c);
        assert_eq!(delta[(0, 0)], 1.0);
        assert_eq!(delta[(1, 1)], 1.0);
        assert!((delta[(0, 1)] - (-2.0f64).exp()).abs() < 1e-15);
        assert!((delta[(0, 1)] - 0.1353352832366127).abs() < 1e-15);
        assert_eq!(delta.max_asymmetry(), 0.0);
    }

    #[test]
    fn affinity_with_zero_embeddings_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = cfg(1, 2);
        let set = random_set(&mut rng, 3, 1, 1, 4);
        let params = RsaParams::zeros(&c, 4);
        let cache = build_affinity(&set, &params, &c).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(cache.omega_matrix[(i, j)], 1.0);
                }
            }
            assert_eq!(cache.norm[i], 2.0);
        }
    }

    #[test]
    fn forward_hand_example() {
        let c = cfg(1, 1);
        let maps = [1.0, 3.0]
            .iter()
            .map(|&v| FeatureMap::new(1, 1, 1, vec![v]).unwrap())
            .collect();
        let set = FeatureSet::new(maps, None).unwrap();
        let mut params = RsaParams::zeros(&c, 1);
        params.omega[0][0] = 0.5;
        let (out, _) = rsa_forward(&set, &params, &c).unwrap();
        assert_eq!(out.maps()[0].values(), &[2.0]);
        assert_eq!(out.maps()[1].values(), &[2.0]);
    }

    #[test]
    fn stabilization_does_not_change_output() {
        let c = cfg(1, 1);
        let maps = [1.0, 2.0]
            .iter()
            .map(|&v| FeatureMap::new(1, 1, 1, vec![v]).unwrap())
            .collect();
        let set = FeatureSet::new(maps, None).unwrap();
        let mut params = RsaParams::zeros(&c, 1);
        params.psi[(0, 0)] = 1.0;
        params.phi[(0, 0)] = 1.0;
        params.omega[0][0] = 0.7;
        let raw = build_affinity_with(&set, &params, &c, false).unwrap();
        assert!((raw.omega_matrix[(0, 1)] - 2.0f64.exp()).abs() < 1e-12);
        assert!((raw.omega_matrix[(1, 0)] - 2.0f64.exp()).abs() < 1e-12);
        let stable = build_affinity(&set, &params, &c).unwrap();
        assert_eq!(stable.omega_matrix[(0, 1)], 1.0);
        let (a, _) = rsa_forward_cached(&set, &params, &c, raw).unwrap();
        let (b, _) = rsa_forward_cached(&set, &params, &c, stable).unwrap();
        for (ma, mb) in a.maps().iter().zip(b.maps()) {
            for (x, y) in ma.values().iter().zip(mb.values()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn row_rescaling_invariance_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let c = cfg(2, 2);
            let set = random_set(&mut rng, 3, 2, 2, 3);
            let params = random_params(&mut rng, &c, 3);
            let raw = build_affinity_with(&set, &params, &c, false).unwrap();
            let (a, _) = rsa_forward_cached(&set, &params, &c, raw).unwrap();
            let (b, _) = rsa_forward(&set, &params, &c).unwrap();
            for (ma, mb) in a.maps().iter().zip(b.maps()) {
                for (x, y) in ma.values().iter().zip(mb.values()) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn identity_constant_and_degenerate_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = cfg(3, 2);
        let set = random_set(&mut rng, 4, 2, 3, 5);
        let zero_gate = RsaParams::init(&c, 5, &mut rng);
        let (out, _) = rsa_forward(&set, &zero_gate, &c).unwrap();
        assert_eq!(out, set);

        let params = random_params(&mut rng, &c, 5);
        let m = FeatureMap::broadcast(2, 2, &[0.3, -0.2, 1.0, 0.0, 2.0]).unwrap();
        let constant = FeatureSet::new(vec![m.clone(), m.clone(), m], None).unwrap();
        let (out, tape) = rsa_forward(&constant, &params, &c).unwrap();
        assert_eq!(out, constant);
        let up: Vec<Vec<f64>> = vec![vec![1.0; 20]; 3];
        let (g, _) = rsa_backward(&tape, &up).unwrap();
        assert!(g.d_omega.iter().flatten().all(|&v| v == 0.0));

        let single = random_set(&mut rng, 1, 1, 1, 5);
        let (out, tape) = rsa_forward(&single, &params, &c).unwrap();
        assert_eq!(out, single);
        assert!(tape.cache().degenerate);
        let (g, dx) = rsa_backward(&tape, &[vec![1.0; 5]]).unwrap();
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
        assert_eq!(dx, vec![vec![1.0; 5]]);
    }

    #[test]
    fn shape_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for blocks in 1..4 {
            let c = cfg(blocks, 2);
            let set = random_set(&mut rng, 3, 2, 3, 4);
            let params = random_params(&mut rng, &c, 4);
            let (out, _) = rsa_forward(&set, &params, &c).unwrap();
            assert_eq!(out.len(), 3);
            assert_eq!(out.dims(), (2, 3, 4));
        }
    }

    #[test]
    fn forward_is_permutation_equivariant_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..30 {
            let c = cfg(2, 2);
            let n = rng.random_range(1..6);
            let set = random_set(&mut rng, n, 2, 2, 3);
            let params = random_params(&mut rng, &c, 3);
            let (out, _) = rsa_forward(&set, &params, &c).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let (pout, _) = rsa_forward(&set.permuted(&perm), &params, &c).unwrap();
            assert_eq!(pout, out.permuted(&perm));
        }
    }

    #[test]
    fn backward_rejects_bad_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = cfg(1, 1);
        let set = random_set(&mut rng, 2, 1, 1, 2);
        let params = random_params(&mut rng, &c, 2);
        let (_, tape) = rsa_forward(&set, &params, &c).unwrap();
        assert!(rsa_backward(&tape, &[vec![0.0; 2]]).is_err());
        assert!(rsa_backward(&tape, &[vec![0.0; 2], vec![0.0; 3]]).is_err());
        let (g, dx) = rsa_backward(&tape, &[vec![0.0; 2], vec![0.0; 2]]).unwrap();
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
        assert!(dx.iter().flatten().all(|&v| v == 0.0));
    }

    fn weighted_output(set: &FeatureSet, params: &RsaParams, c: &RsaConfig, probe: &[Vec<f64>]) -> f64 {
        let (out, _) = rsa_forward(set, params, c).unwrap();
        out.maps()
            .iter()
            .zip(probe)
            .map(|(m, p)| dot(m.values(), p))
            .sum()
    }

    #[test]
    fn sum_loss_gate_gradient_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = cfg(1, 2);
        let set = random_set(&mut rng, 3, 2, 2, 3);
        let params = RsaParams::init(&c, 3, &mut rng);
        let ones = vec![vec![1.0; 12]; 3];
        let (_, tape) = rsa_forward(&set, &params, &c).unwrap();
        let (g, _) = rsa_backward(&tape, &ones).unwrap();
        let base = params.to_flat();
        let fd = finite_diff_grad(
            |th| weighted_output(&set, &params.with_flat(th).unwrap(), &c, &ones),
            &DenseVector::new(base).unwrap(),
            1e-5,
        )
        .unwrap();
        for (a, b) in g.d_omega[0].iter().zip(fd.as_slice()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-3));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..25 {
            let n = rng.random_range(1..=4);
            let hw = rng.random_range(1..=3);
            let d = rng.random_range(1..=5);
            let blocks = rng.random_range(1..=3);
            let c = cfg(blocks, (d / 2).max(1));
            let set = random_set(&mut rng, n, hw, hw, d);
            let params = random_params(&mut rng, &c, d);
            let probe: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..hw * hw * d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let (_, tape) = rsa_forward(&set, &params, &c).unwrap();
            let (g, dx) = rsa_backward(&tape, &probe).unwrap();
            let fd = finite_diff_grad(
                |th| weighted_output(&set, &params.with_flat(th).unwrap(), &c, &probe),
                &DenseVector::new(params.to_flat()).unwrap(),
                1e-5,
            )
            .unwrap();
            for (k, (a, b)) in g.to_flat().iter().zip(fd.as_slice()).enumerate() {
                let err = (a - b).abs() / b.abs().max(1e-2);
                assert!(err <= 1e-4, "trial {trial} coord {k}: analytic {a}, numeric {b}");
            }
            // Input gradient, diagnostic only but cheap to check.
            let flat_x: Vec<f64> = set.maps().iter().flat_map(|m| m.values().to_vec()).collect();
            let sz = hw * hw * d;
            let rebuild = |xs: &[f64]| {
                let maps = xs
                    .chunks(sz)
                    .map(|v| FeatureMap::new(hw, hw, d, v.to_vec()).unwrap())
                    .collect();
                FeatureSet::new(maps, None).unwrap()
            };
            let fdx = finite_diff_grad(
                |xs| weighted_output(&rebuild(xs), &params, &c, &probe),
                &DenseVector::new(flat_x).unwrap(),
                1e-5,
            )
            .unwrap();
            for (a, b) in dx.iter().flatten().zip(fdx.as_slice()) {
                assert!((a - b).abs() / b.abs().max(1e-2) <= 1e-4);
            }
        }
    }
}
