//! Image-set feature types, global pooling and the pooling baselines.
//!
//! Reductions over set elements go through [`canonical_order`] so that
//! results do not depend on the order in which a set was stored.

use std::cmp::Ordering;

use crate::error::{PifrError, Result};
use crate::numerics::norm_sq;

/// Order in which reductions over set elements are carried out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Summation {
    /// Elements are reduced in a fixed order derived from their values, so
    /// permuting a set never changes a result, not even in the last bit.
    #[default]
    Canonical,
    /// Elements are reduced in storage order. Only useful as a diagnostic
    /// for how much floating-point reassociation moves a score.
    InputOrder,
}

/// Lexicographic total order on the bit patterns of two value slices.
pub fn compare_values(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            other => return other,
        }
    }
    a.len().cmp(&b.len())
}

/// Indices that visit `items` in canonical (value-sorted) order.
pub fn canonical_order<T: AsRef<[f64]>>(items: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.sort_by(|&a, &b| compare_values(items[a].as_ref(), items[b].as_ref()));
    idx
}

pub(crate) fn reduction_order<T: AsRef<[f64]>>(items: &[T], mode: Summation) -> Vec<usize> {
    match mode {
        Summation::Canonical => canonical_order(items),
        Summation::InputOrder => (0..items.len()).collect(),
    }
}

/// One H×W×D feature map, stored with the channel index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    h: usize,
    w: usize,
    d: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(h: usize, w: usize, d: usize, values: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || d == 0 {
            return Err(PifrError::Dimension(format!("feature map {h}x{w}x{d} has an empty axis")));
        }
        if values.len() != h * w * d {
            return Err(PifrError::Dimension(format!(
                "feature map {h}x{w}x{d} needs {} values, got {}",
                h * w * d,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(PifrError::NonFinite(format!("feature map value {pos}")));
        }
        Ok(Self { h, w, d, values })
    }

    /// A map holding the same D-vector at every position.
    pub fn broadcast(h: usize, w: usize, vector: &[f64]) -> Result<Self> {
        let values = (0..h * w).flat_map(|_| vector.iter().copied()).collect();
        Self::new(h, w, vector.len(), values)
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.d)
    }

    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// The D-vector at plane position `p = row * w + col`.
    pub fn position(&self, p: usize) -> &[f64] {
        &self.values[p * self.d..(p + 1) * self.d]
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

impl AsRef<[f64]> for FeatureMap {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

/// A subject's set of feature maps. Storage order carries no meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    maps: Vec<FeatureMap>,
    identity: Option<u32>,
}

impl FeatureSet {
    pub fn new(maps: Vec<FeatureMap>, identity: Option<u32>) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| PifrError::Data("feature set must hold at least one map".into()))?;
        let dims = first.dims();
        if let Some(bad) = maps.iter().position(|m| m.dims() != dims) {
            return Err(PifrError::Dimension(format!(
                "map {bad} has shape {:?}, expected {:?}",
                maps[bad].dims(),
                dims
            )));
        }
        Ok(Self { maps, identity })
    }

    pub fn maps(&self) -> &[FeatureMap] {
        &self.maps
    }

    pub fn identity(&self) -> Option<u32> {
        self.identity
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.maps[0].dims()
    }

    pub fn d(&self) -> usize {
        self.maps[0].d()
    }

    /// Returns the set with maps reordered so that `out[k] = self[order[k]]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            maps: order.iter().map(|&i| self.maps[i].clone()).collect(),
            identity: self.identity,
        }
    }

    pub fn into_maps(self) -> Vec<FeatureMap> {
        self.maps
    }
}

/// Globally pooled D-vectors of a set, one per map.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledSet {
    vectors: Vec<Vec<f64>>,
    d: usize,
}

impl PooledSet {
    pub fn new(vectors: Vec<Vec<f64>>) -> Result<Self> {
        let d = vectors
            .first()
            .map(Vec::len)
            .ok_or_else(|| PifrError::Data("pooled set must hold at least one vector".into()))?;
        if d == 0 {
            return Err(PifrError::Dimension("pooled vectors are empty".into()));
        }
        if vectors.iter().any(|v| v.len() != d) {
            return Err(PifrError::Dimension("pooled vectors differ in length".into()));
        }
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(PifrError::NonFinite("pooled vector".into()));
        }
        Ok(Self { vectors, d })
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            vectors: order.iter().map(|&i| self.vectors[i].clone()).collect(),
            d: self.d,
        }
    }
}

/// One fixed-size vector summarizing a whole set.
#[derive(Debug, Clone, PartialEq)]
pub struct SetDescriptor {
    pub vector: Vec<f64>,
}

/// Spatial average over the H×W plane, per channel.
pub fn global_pool(map: &FeatureMap) -> Vec<f64> {
    let mut acc = vec![0.0; map.d()];
    for p in 0..map.positions() {
        for (a, v) in acc.iter_mut().zip(map.position(p)) {
            *a += v;
        }
    }
    let scale = 1.0 / map.positions() as f64;
    acc.iter_mut().for_each(|a| *a *= scale);
    acc
}

pub fn pool_set(set: &FeatureSet) -> PooledSet {
    let vectors = set.maps().iter().map(global_pool).collect();
    PooledSet {
        vectors,
        d: set.d(),
    }
}

pub fn set_average(pooled: &PooledSet) -> SetDescriptor {
    set_average_with(pooled, Summation::Canonical)
}

pub fn set_average_with(pooled: &PooledSet, mode: Summation) -> SetDescriptor {
    let mut acc = vec![0.0; pooled.d()];
    for i in reduction_order(pooled.vectors(), mode) {
        for (a, v) in acc.iter_mut().zip(&pooled.vectors()[i]) {
            *a += v;
        }
    }
    let scale = 1.0 / pooled.len() as f64;
    acc.iter_mut().for_each(|a| *a *= scale);
    SetDescriptor { vector: acc }
}

fn check_same_d(probe: &PooledSet, gallery: &PooledSet) -> Result<()> {
    if probe.d() != gallery.d() {
        return Err(PifrError::Dimension(format!(
            "probe has D = {}, gallery has D = {}",
            probe.d(),
            gallery.d()
        )));
    }
    Ok(())
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Negated mean pairwise ℓ2 distance over all probe×gallery pairs.
pub fn baseline_mean_l2(probe: &PooledSet, gallery: &PooledSet) -> Result<f64> {
    baseline_mean_l2_with(probe, gallery, Summation::Canonical)
}

pub fn baseline_mean_l2_with(probe: &PooledSet, gallery: &PooledSet, mode: Summation) -> Result<f64> {
    check_same_d(probe, gallery)?;
    let gorder = reduction_order(gallery.vectors(), mode);
    let mut total = 0.0;
    for i in reduction_order(probe.vectors(), mode) {
        for &j in &gorder {
            total += euclidean(&probe.vectors()[i], &gallery.vectors()[j]);
        }
    }
    Ok(-total / (probe.len() * gallery.len()) as f64)
}

/// Negated ℓ2 distance between the set means.
pub fn baseline_avepool(probe: &PooledSet, gallery: &PooledSet) -> Result<f64> {
    baseline_avepool_with(probe, gallery, Summation::Canonical)
}

pub fn baseline_avepool_with(probe: &PooledSet, gallery: &PooledSet, mode: Summation) -> Result<f64> {
    check_same_d(probe, gallery)?;
    let p = set_average_with(probe, mode);
    let g = set_average_with(gallery, mode);
    Ok(-norm_sq(
        &p.vector
            .iter()
            .zip(&g.vector)
            .map(|(a, b)| a - b)
            .collect::<Vec<_>>(),
    )
    .sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pooled(v: &[&[f64]]) -> PooledSet {
        PooledSet::new(v.iter().map(|x| x.to_vec()).collect()).unwrap()
    }

    #[test]
    fn global_pool_examples() {
        let m = FeatureMap::new(1, 1, 3, vec![1.0, -2.0, 0.5]).unwrap();
        assert_eq!(global_pool(&m), vec![1.0, -2.0, 0.5]);
        let m = FeatureMap::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_pool(&m), vec![2.5]);
        let m = FeatureMap::new(3, 2, 2, vec![0.7; 12]).unwrap();
        for v in global_pool(&m) {
            assert!((v - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn pool_set_examples() {
        let one = FeatureSet::new(vec![FeatureMap::new(1, 1, 2, vec![1.0, 2.0]).unwrap()], None)
            .unwrap();
        assert_eq!(pool_set(&one).len(), 1);

        let maps: Vec<_> = [1.0, 2.0, 3.0]
            .iter()
            .map(|&c| FeatureMap::new(2, 2, 1, vec![c; 4]).unwrap())
            .collect();
        let set = FeatureSet::new(maps, Some(3)).unwrap();
        let p = pool_set(&set);
        assert_eq!(p.vectors(), &[vec![1.0], vec![2.0], vec![3.0]]);
        let perm = [2, 0, 1];
        assert_eq!(pool_set(&set.permuted(&perm)), p.permuted(&perm));
    }

    #[test]
    fn feature_set_rejects_bad_input() {
        assert!(FeatureSet::new(vec![], None).is_err());
        let a = FeatureMap::new(1, 1, 2, vec![0.0; 2]).unwrap();
        let b = FeatureMap::new(1, 1, 3, vec![0.0; 3]).unwrap();
        assert!(FeatureSet::new(vec![a, b], None).is_err());
        assert!(FeatureMap::new(1, 1, 1, vec![f64::NAN]).is_err());
        assert!(FeatureMap::new(0, 1, 1, vec![]).is_err());
    }

    #[test]
    fn set_average_examples() {
        assert_eq!(set_average(&pooled(&[&[1.0, 2.0]])).vector, vec![1.0, 2.0]);
        assert_eq!(
            set_average(&pooled(&[&[1.0, 0.0], &[0.0, 1.0]])).vector,
            vec![0.5, 0.5]
        );
    }

    #[test]
    fn baseline_examples() {
        let a = pooled(&[&[0.3, -1.0]]);
        assert_eq!(baseline_mean_l2(&a, &a).unwrap(), 0.0);
        assert_eq!(
            baseline_mean_l2(&pooled(&[&[0.0, 0.0]]), &pooled(&[&[3.0, 4.0]])).unwrap(),
            -5.0
        );
        assert_eq!(
            baseline_mean_l2(&pooled(&[&[0.0, 0.0], &[1.0, 0.0]]), &pooled(&[&[0.0, 0.0]]))
                .unwrap(),
            -0.5
        );

        assert_eq!(baseline_avepool(&a, &a).unwrap(), 0.0);
        assert_eq!(
            baseline_avepool(&pooled(&[&[2.0, 0.0], &[0.0, 0.0]]), &pooled(&[&[1.0, 0.0]]))
                .unwrap(),
            0.0
        );
        let b = pooled(&[&[1.0]]);
        assert!(matches!(
            baseline_avepool(&a, &b),
            Err(PifrError::Dimension(_))
        ));
        assert!(baseline_mean_l2(&a, &b).is_err());
    }

    fn arb_pooled() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..5).prop_flat_map(|d| {
            prop::collection::vec(prop::collection::vec(-10.0f64..10.0, d), 1..9)
        })
    }

    proptest! {
        #[test]
        fn reductions_are_bit_exactly_permutation_invariant(
            p in arb_pooled(),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let d = p[0].len();
            let g: Vec<Vec<f64>> = p.iter().rev().map(|v| v.iter().map(|x| x * 0.5 + 1.0).collect()).collect();
            let probe = PooledSet::new(p).unwrap();
            let gallery = PooledSet::new(g).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut po: Vec<usize> = (0..probe.len()).collect();
            po.shuffle(&mut rng);
            let mut go: Vec<usize> = (0..gallery.len()).collect();
            go.shuffle(&mut rng);
            let (ps, gs) = (probe.permuted(&po), gallery.permuted(&go));
            prop_assert_eq!(set_average(&probe), set_average(&ps));
            prop_assert_eq!(
                baseline_mean_l2(&probe, &gallery).unwrap().to_bits(),
                baseline_mean_l2(&ps, &gs).unwrap().to_bits()
            );
            prop_assert_eq!(
                baseline_avepool(&probe, &gallery).unwrap().to_bits(),
                baseline_avepool(&ps, &gs).unwrap().to_bits()
            );
            prop_assert_eq!(set_average(&probe).vector.len(), d);
        }
    }
}
