//! Verification and identification metrics.
//!
//! Operating points follow one step convention throughout: thresholds sit
//! on impostor scores. For a false-accept budget `f` the threshold is the
//! lowest impostor score `t` with `#{impostor ≥ t} / #impostors ≤ f`;
//! when no impostor may be accepted, the threshold sits just above the
//! highest impostor, and a budget of 1 accepts everything. Genuine scores
//! are accepted when `score ≥ t`. Positives that fall in the gap between
//! two impostor scores are not credited, so reported rates never rely on
//! interpolation.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dfa::CodingConfig;
use crate::error::{PifrError, Result};
use crate::pipeline::Matcher;
use crate::rsa::RsaModel;
use crate::setrep::{FeatureSet, Summation};

/// Labeled verification scores; larger means more similar.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    pub scores: Vec<(f64, bool)>,
}

impl ScoreSet {
    pub fn new(scores: Vec<(f64, bool)>) -> Result<Self> {
        if scores.iter().any(|(s, _)| !s.is_finite()) {
            return Err(PifrError::NonFinite("score".into()));
        }
        Ok(Self { scores })
    }

    pub fn from_parts(genuine: &[f64], impostor: &[f64]) -> Result<Self> {
        Self::new(
            genuine
                .iter()
                .map(|&s| (s, true))
                .chain(impostor.iter().map(|&s| (s, false)))
                .collect(),
        )
    }

    pub fn genuine(&self) -> Vec<f64> {
        self.scores.iter().filter(|(_, m)| *m).map(|(s, _)| *s).collect()
    }

    pub fn impostor(&self) -> Vec<f64> {
        self.scores.iter().filter(|(_, m)| !*m).map(|(s, _)| *s).collect()
    }

    fn split_checked(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let (g, i) = (self.genuine(), self.impostor());
        if g.is_empty() || i.is_empty() {
            return Err(PifrError::Data(format!(
                "need genuine and impostor scores, got {} and {}",
                g.len(),
                i.len()
            )));
        }
        Ok((g, i))
    }
}

/// One probe searched against a gallery of `scores.len()` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSearch {
    /// Similarity to each gallery entry, indexed by gallery id.
    pub scores: Vec<f64>,
    /// Gallery id of the true mate, if enrolled.
    pub mate: Option<usize>,
}

impl ProbeSearch {
    pub fn top_score(&self) -> f64 {
        self.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// 1-based rank of gallery entry `id` under the order
    /// (score descending, gallery id ascending).
    pub fn rank_of(&self, id: usize) -> usize {
        let s = self.scores[id];
        1 + self
            .scores
            .iter()
            .enumerate()
            .filter(|&(g, &v)| v > s || (v == s && g < id))
            .count()
    }

    pub fn mate_rank(&self) -> Option<usize> {
        self.mate.map(|m| self.rank_of(m))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdentificationScores {
    pub probes: Vec<ProbeSearch>,
}

impl IdentificationScores {
    pub fn new(probes: Vec<ProbeSearch>) -> Result<Self> {
        for (i, p) in probes.iter().enumerate() {
            if p.scores.is_empty() {
                return Err(PifrError::Data(format!("probe {i} has an empty gallery")));
            }
            if p.scores.iter().any(|s| !s.is_finite()) {
                return Err(PifrError::NonFinite(format!("score of probe {i}")));
            }
            if let Some(m) = p.mate {
                if m >= p.scores.len() {
                    return Err(PifrError::Data(format!(
                        "probe {i} names mate {m} outside a gallery of {}",
                        p.scores.len()
                    )));
                }
            }
        }
        Ok(Self { probes })
    }
}

/// Impostor-side thresholds for each budget, per the module's step convention.
fn thresholds_for(impostor: &[f64], targets: &[f64]) -> Result<Vec<Threshold>> {
    let mut sorted = impostor.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = sorted.len() as f64;
    targets
        .iter()
        .map(|&f| {
            if !(0.0..=1.0).contains(&f) {
                return Err(PifrError::Config(format!("rate target {f} outside [0, 1]")));
            }
            if f >= 1.0 {
                return Ok(Threshold::AcceptAll);
            }
            let mut best = Threshold::Above(sorted[0]);
            for &t in &sorted {
                let accepted = sorted.iter().filter(|&&s| s >= t).count() as f64;
                if accepted / n <= f {
                    best = Threshold::AtLeast(t);
                } else {
                    break;
                }
            }
            Ok(best)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Threshold {
    Above(f64),
    AtLeast(f64),
    AcceptAll,
}

impl Threshold {
    fn accepts(self, s: f64) -> bool {
        match self {
            Threshold::Above(t) => s > t,
            Threshold::AtLeast(t) => s >= t,
            Threshold::AcceptAll => true,
        }
    }
}

fn fraction(values: &[f64], t: Threshold) -> f64 {
    values.iter().filter(|&&s| t.accepts(s)).count() as f64 / values.len() as f64
}

/// `(TAR, FAR)` when accepting every score `≥ threshold`.
pub fn verification_rates(s: &ScoreSet, threshold: f64) -> Result<(f64, f64)> {
    let (g, i) = s.split_checked()?;
    let t = Threshold::AtLeast(threshold);
    Ok((fraction(&g, t), fraction(&i, t)))
}

/// TAR at each false-accept budget.
pub fn roc_tar_at_far(s: &ScoreSet, far_targets: &[f64]) -> Result<Vec<f64>> {
    let (g, i) = s.split_checked()?;
    Ok(thresholds_for(&i, far_targets)?
        .into_iter()
        .map(|t| fraction(&g, t))
        .collect())
}

/// Full ROC as `(FAR, TAR)` points, one per distinct threshold, from
/// `(0, ·)` to `(1, 1)`.
pub fn roc_curve(s: &ScoreSet) -> Result<Vec<(f64, f64)>> {
    let (g, i) = s.split_checked()?;
    let mut cuts: Vec<f64> = s.scores.iter().map(|(v, _)| *v).collect();
    cuts.sort_by(|a, b| b.total_cmp(a));
    cuts.dedup();
    let mut pts = vec![(0.0, 0.0)];
    for t in cuts {
        let th = Threshold::AtLeast(t);
        pts.push((fraction(&i, th), fraction(&g, th)));
    }
    Ok(pts)
}

/// Probability that a genuine score beats an impostor score, ties ½.
pub fn auc(s: &ScoreSet) -> Result<f64> {
    let (g, i) = s.split_checked()?;
    let mut all: Vec<(f64, bool)> = s.scores.clone();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Midranks over tie groups.
    let mut rank_sum = 0.0;
    let mut k = 0;
    while k < all.len() {
        let mut e = k;
        while e + 1 < all.len() && all[e + 1].0 == all[k].0 {
            e += 1;
        }
        let mid = (k + e) as f64 / 2.0 + 1.0;
        rank_sum += mid * all[k..=e].iter().filter(|(_, m)| *m).count() as f64;
        k = e + 1;
    }
    let (np, nn) = (g.len() as f64, i.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Fraction of probes whose mate ranks within the top `k`.
pub fn cmc_rank_k(s: &IdentificationScores, k: usize) -> Result<f64> {
    if s.probes.is_empty() {
        return Err(PifrError::Data("no probes".into()));
    }
    let mut hits = 0usize;
    for (i, p) in s.probes.iter().enumerate() {
        let rank = p
            .mate_rank()
            .ok_or_else(|| PifrError::Data(format!("closed-set probe {i} has no mate in the gallery")))?;
        if rank <= k {
            hits += 1;
        }
    }
    Ok(hits as f64 / s.probes.len() as f64)
}

/// CMC values for ranks `1..=max_rank`.
pub fn cmc_curve(s: &IdentificationScores, max_rank: usize) -> Result<Vec<f64>> {
    (1..=max_rank).map(|k| cmc_rank_k(s, k)).collect()
}

fn split_open_set(s: &IdentificationScores) -> Result<(Vec<&ProbeSearch>, Vec<f64>)> {
    let mated: Vec<&ProbeSearch> = s.probes.iter().filter(|p| p.mate.is_some()).collect();
    let non_mated: Vec<f64> = s
        .probes
        .iter()
        .filter(|p| p.mate.is_none())
        .map(ProbeSearch::top_score)
        .collect();
    if non_mated.is_empty() {
        return Err(PifrError::Data("open-set evaluation needs non-mated probes".into()));
    }
    if mated.is_empty() {
        return Err(PifrError::Data("open-set evaluation needs mated probes".into()));
    }
    Ok((mated, non_mated))
}

fn tpir_with(mated: &[&ProbeSearch], t: Threshold) -> f64 {
    let hits = mated
        .iter()
        .filter(|p| p.mate_rank() == Some(1) && t.accepts(p.top_score()))
        .count();
    hits as f64 / mated.len() as f64
}

/// `(TPIR, FPIR)` when alarming on top scores `≥ threshold`.
pub fn open_set_rates(s: &IdentificationScores, threshold: f64) -> Result<(f64, f64)> {
    let (mated, non_mated) = split_open_set(s)?;
    let t = Threshold::AtLeast(threshold);
    Ok((tpir_with(&mated, t), fraction(&non_mated, t)))
}

/// TPIR at each false-positive identification budget.
pub fn tpir_at_fpir(s: &IdentificationScores, fpir_targets: &[f64]) -> Result<Vec<f64>> {
    let (mated, non_mated) = split_open_set(s)?;
    Ok(thresholds_for(&non_mated, fpir_targets)?
        .into_iter()
        .map(|t| tpir_with(&mated, t))
        .collect())
}

/// Largest absolute change of the full matching score when the elements of
/// probe and gallery are shuffled independently, over `trials` shuffles.
pub fn permutation_invariance_audit(
    probe: &FeatureSet,
    gallery: &FeatureSet,
    model: &RsaModel,
    coding: &CodingConfig,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let matcher = Matcher::Pifr {
        model: model.clone(),
        coding: *coding,
        symmetric: false,
    };
    audit_matcher(probe, gallery, &matcher, trials, seed)
}

/// [`permutation_invariance_audit`] for any matcher.
pub fn audit_matcher(
    probe: &FeatureSet,
    gallery: &FeatureSet,
    matcher: &Matcher,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if trials == 0 {
        return Ok(0.0);
    }
    let base = matcher.score(probe, gallery)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let mut po: Vec<usize> = (0..probe.len()).collect();
        let mut go: Vec<usize> = (0..gallery.len()).collect();
        po.shuffle(&mut rng);
        go.shuffle(&mut rng);
        let s = matcher.score(&probe.permuted(&po), &gallery.permuted(&go))?;
        worst = worst.max((s - base).abs());
    }
    Ok(worst)
}

/// Whether a matcher's reductions run in canonical order.
pub fn summation_of(matcher: &Matcher) -> Summation {
    matcher.summation()
}

/// Named metric values, emitted as `key=value` lines or CSV.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    /// Free-form header lines (counts, settings).
    pub header: Vec<(String, String)>,
    /// `(metric, operating point, value)`.
    pub rows: Vec<(String, String, f64)>,
}

impl MetricsReport {
    pub fn push(&mut self, metric: &str, point: impl ToString, value: f64) {
        self.rows.push((metric.to_string(), point.to_string(), value));
    }

    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.header.push((key.to_string(), value.to_string()));
    }

    pub fn value(&self, metric: &str, point: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|(m, p, _)| m == metric && p == point)
            .map(|(_, _, v)| *v)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.header {
            let _ = writeln!(out, "# {k}={v}");
        }
        out.push_str("metric,operating_point,value\n");
        for (m, p, v) in &self.rows {
            let _ = writeln!(out, "{m},{p},{v}");
        }
        out
    }

    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.header {
            let _ = writeln!(out, "{k}={v}");
        }
        for (m, p, v) in &self.rows {
            if p.is_empty() {
                let _ = writeln!(out, "{m}={v}");
            } else {
                let _ = writeln!(out, "{m}@{p}={v}");
            }
        }
        out
    }
}

/// Sorts scores in descending order with ties broken by index; exposed for
/// callers that print ranked lists.
pub fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    idx
}
