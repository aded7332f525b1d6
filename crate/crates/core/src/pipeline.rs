//! End-to-end set scoring: restructure, pool, compare.

use rayon::prelude::*;

use crate::dfa::{set_similarity_with, CodingConfig, GalleryDictionary};
use crate::error::Result;
use crate::rsa::RsaModel;
use crate::setrep::{baseline_avepool_with, baseline_mean_l2_with, pool_set, FeatureSet, PooledSet, Summation};

/// A set-to-set similarity; larger is more similar.
#[derive(Debug, Clone, PartialEq)]
pub enum Matcher {
    /// Restructure, pool, then reconstruction-based alignment.
    Pifr {
        model: RsaModel,
        coding: CodingConfig,
        symmetric: bool,
    },
    /// Restructure, pool, then distance between set means.
    RsaOnly { model: RsaModel },
    /// Mean pairwise distance of raw pooled vectors.
    MeanL2 { summation: Summation },
    /// Distance between raw set means.
    AvePool { summation: Summation },
}

impl Matcher {
    pub fn summation(&self) -> Summation {
        match self {
            Matcher::Pifr { coding, .. } => coding.summation,
            Matcher::RsaOnly { model } => model.config.summation,
            Matcher::MeanL2 { summation } | Matcher::AvePool { summation } => *summation,
        }
    }

    /// Switches every reduction of the matcher to `mode`.
    pub fn with_summation(mut self, mode: Summation) -> Self {
        match &mut self {
            Matcher::Pifr { model, coding, .. } => {
                model.config.summation = mode;
                coding.summation = mode;
            }
            Matcher::RsaOnly { model } => model.config.summation = mode,
            Matcher::MeanL2 { summation } | Matcher::AvePool { summation } => *summation = mode,
        }
        self
    }

    /// Per-set work shared by every comparison the set takes part in.
    pub fn prepare(&self, set: &FeatureSet) -> Result<PooledSet> {
        match self {
            Matcher::Pifr { model, .. } | Matcher::RsaOnly { model } => Ok(pool_set(&model.restructure(set)?)),
            Matcher::MeanL2 { .. } | Matcher::AvePool { .. } => Ok(pool_set(set)),
        }
    }

    pub fn prepare_all(&self, sets: &[FeatureSet]) -> Result<Vec<PooledSet>> {
        sets.par_iter().map(|s| self.prepare(s)).collect()
    }

    pub fn score_prepared(&self, probe: &PooledSet, gallery: &PooledSet) -> Result<f64> {
        match self {
            Matcher::Pifr { coding, symmetric, .. } => {
                let forward = set_similarity_with(probe, &GalleryDictionary::new(gallery, *coding)?)?;
                if *symmetric {
                    let backward = set_similarity_with(gallery, &GalleryDictionary::new(probe, *coding)?)?;
                    Ok(0.5 * (forward + backward))
                } else {
                    Ok(forward)
                }
            }
            Matcher::RsaOnly { model } => baseline_avepool_with(probe, gallery, model.config.summation),
            Matcher::MeanL2 { summation } => baseline_mean_l2_with(probe, gallery, *summation),
            Matcher::AvePool { summation } => baseline_avepool_with(probe, gallery, *summation),
        }
    }

    pub fn score(&self, probe: &FeatureSet, gallery: &FeatureSet) -> Result<f64> {
        self.score_prepared(&self.prepare(probe)?, &self.prepare(gallery)?)
    }
}
