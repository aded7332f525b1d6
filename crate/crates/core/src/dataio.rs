//! On-disk formats and the synthetic set-recognition task.
//!
//! Feature container (little-endian, no padding):
//!
//! ```text
//! "PIFR" | version u32 = 1 | set_count u32
//! per set: identity u32 | N u32 | H u32 | W u32 | D u32 | N·H·W·D × f32
//! ```
//!
//! values run n-major, then h, then w, then d fastest. An unlabeled set is
//! stored with identity `u32::MAX`.
//!
//! Parameter checkpoint:
//!
//! ```text
//! "PIFC" | version u32 = 1 | L u32 | d_e u32 | D u32 | σ f64
//! Ω^1..Ω^L (L×D f64) | Ψ (d_e×D f64, row-major) | Φ (d_e×D f64, row-major)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{PifrError, Result};
use crate::numerics::DenseMatrix;
use crate::rsa::{RsaConfig, RsaParams};
use crate::setrep::{FeatureMap, FeatureSet, Summation};

pub const CONTAINER_MAGIC: [u8; 4] = *b"PIFR";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PIFC";
pub const FORMAT_VERSION: u32 = 1;
pub const UNLABELED: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContainerHeader {
    pub magic: [u8; 4],
    pub version: u32,
    pub set_count: u32,
}

fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| PifrError::Data(format!("{what} = {v} does not fit in u32")))
}

/// Serializes `sets` into the container byte layout.
pub fn encode_container(sets: &[FeatureSet]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CONTAINER_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&dim_u32(sets.len(), "set count")?.to_le_bytes());
    for set in sets {
        let (h, w, d) = set.dims();
        let label = set.identity().unwrap_or(UNLABELED);
        for v in [label, dim_u32(set.len(), "N")?, dim_u32(h, "H")?, dim_u32(w, "W")?, dim_u32(d, "D")?] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for map in set.maps() {
            for &v in map.values() {
                let f = v as f32;
                if !f.is_finite() {
                    return Err(PifrError::NonFinite(format!("value {v} overflows f32")));
                }
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn write_container(sets: &[FeatureSet], path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_container(sets)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            PifrError::Truncated(format!("{what} at byte {} needs {n} bytes", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4, "magic")?.try_into().expect("4 bytes");
        if found != expected {
            return Err(PifrError::BadMagic { expected, found });
        }
        Ok(())
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn read_header(bytes: &[u8]) -> Result<ContainerHeader> {
    let mut c = Cursor { bytes, pos: 0 };
    c.magic(CONTAINER_MAGIC)?;
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(PifrError::UnsupportedVersion(version));
    }
    let set_count = c.u32("set count")?;
    Ok(ContainerHeader {
        magic: CONTAINER_MAGIC,
        version,
        set_count,
    })
}

pub fn decode_container(bytes: &[u8]) -> Result<Vec<FeatureSet>> {
    let header = read_header(bytes)?;
    let mut c = Cursor { bytes, pos: 12 };
    let mut sets = Vec::with_capacity(header.set_count.min(1 << 16) as usize);
    for s in 0..header.set_count {
        let label = c.u32("identity")?;
        let n = c.u32("N")? as usize;
        let (h, w, d) = (c.u32("H")? as usize, c.u32("W")? as usize, c.u32("D")? as usize);
        let per_map = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(d))
            .ok_or_else(|| PifrError::Data(format!("set {s}: map size overflows")))?;
        let total = per_map
            .checked_mul(n)
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| PifrError::Data(format!("set {s}: payload size overflows")))?;
        let raw = c.take(total, &format!("set {s} values"))?;
        let mut maps = Vec::with_capacity(n);
        for chunk in raw.chunks_exact(per_map * 4).take(n) {
            let mut values = Vec::with_capacity(per_map);
            for b in chunk.chunks_exact(4) {
                let v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
                if !v.is_finite() {
                    return Err(PifrError::NonFinite(format!("set {s} holds {v}")));
                }
                values.push(f64::from(v));
            }
            maps.push(FeatureMap::new(h, w, d, values)?);
        }
        let identity = (label != UNLABELED).then_some(label);
        sets.push(FeatureSet::new(maps, identity)?);
    }
    if c.remaining() != 0 {
        return Err(PifrError::Data(format!("{} trailing bytes after last set", c.remaining())));
    }
    Ok(sets)
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Vec<FeatureSet>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_container(&bytes)
}

pub fn encode_checkpoint(params: &RsaParams, config: &RsaConfig) -> Result<Vec<u8>> {
    params.validate(config)?;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [
        dim_u32(config.blocks, "L")?,
        dim_u32(config.embed_dim, "d_e")?,
        dim_u32(params.d(), "D")?,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&config.sigma.to_le_bytes());
    for v in params.to_flat() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Decodes a checkpoint. Coordinate normalization and summation order are
/// not stored; they come back at their defaults.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(RsaParams, RsaConfig)> {
    let mut c = Cursor { bytes, pos: 0 };
    c.magic(CHECKPOINT_MAGIC)?;
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(PifrError::UnsupportedVersion(version));
    }
    let blocks = c.u32("L")? as usize;
    let embed_dim = c.u32("d_e")? as usize;
    let d = c.u32("D")? as usize;
    let sigma = c.f64("sigma")?;
    let config = RsaConfig {
        blocks,
        embed_dim,
        sigma,
        coord_normalization: true,
        summation: Summation::Canonical,
    };
    config.validate()?;
    if d == 0 {
        return Err(PifrError::Data("checkpoint has D = 0".into()));
    }
    let count = blocks * d + 2 * embed_dim * d;
    let expected = count * 8;
    if c.remaining() != expected {
        return Err(PifrError::Truncated(format!(
            "checkpoint header promises {expected} parameter bytes, file holds {}",
            c.remaining()
        )));
    }
    let flat = (0..count)
        .map(|_| c.f64("parameter"))
        .collect::<Result<Vec<f64>>>()?;
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(PifrError::NonFinite("checkpoint parameter".into()));
    }
    let template = RsaParams {
        omega: vec![vec![0.0; d]; blocks],
        psi: DenseMatrix::zeros(embed_dim, d),
        phi: DenseMatrix::zeros(embed_dim, d),
    };
    Ok((template.with_flat(&flat)?, config))
}

pub fn write_checkpoint(params: &RsaParams, config: &RsaConfig, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_checkpoint(params, config)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(RsaParams, RsaConfig)> {
    decode_checkpoint(&fs::read(path)?)
}

/// Settings for [`generate_synthetic`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub identities: usize,
    pub sets_per_identity: usize,
    pub n_per_set: usize,
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub noise_sigma: f64,
    pub redundancy_rate: f64,
    pub redundancy_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            identities: 40,
            sets_per_identity: 4,
            n_per_set: 8,
            h: 4,
            w: 4,
            d: 16,
            noise_sigma: 0.5,
            redundancy_rate: 0.5,
            redundancy_noise: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Amplitude of the shared nuisance field, relative to `noise_sigma`.
    pub const NUISANCE_GAIN: f64 = 4.0;

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("identities", self.identities),
            ("sets_per_identity", self.sets_per_identity),
            ("n_per_set", self.n_per_set),
            ("h", self.h),
            ("w", self.w),
            ("d", self.d),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(PifrError::Config(format!("{name} must be >= 1")));
        }
        if !(0.0..=1.0).contains(&self.redundancy_rate) {
            return Err(PifrError::Config(format!(
                "redundancy rate must lie in [0, 1], got {}",
                self.redundancy_rate
            )));
        }
        for (name, v) in [("noise_sigma", self.noise_sigma), ("redundancy_noise", self.redundancy_noise)] {
            if !v.is_finite() || v < 0.0 {
                return Err(PifrError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Smallest set size drawn. A set that must hold a near-duplicate needs
    /// a clean sample to copy from, so redundancy raises it to two.
    pub fn min_set_size(&self) -> usize {
        if self.redundancy_rate > 0.0 && self.n_per_set >= 2 {
            2
        } else {
            1
        }
    }

    fn duplicates_for(&self, size: usize) -> usize {
        if self.redundancy_rate == 0.0 || size < 2 {
            return 0;
        }
        ((self.redundancy_rate * size as f64).round() as usize).clamp(1, size - 1)
    }
}

/// Where a generated sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleOrigin {
    Clean,
    /// Heavily corrupted copy of the clean sample at this in-set index.
    DuplicateOf(usize),
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub sets: Vec<FeatureSet>,
    /// `origins[s][n]` describes map `n` of set `s`.
    pub origins: Vec<Vec<SampleOrigin>>,
}

fn normal_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

/// Synthetic sets of H×W×D maps.
///
/// Each identity owns a latent `z ~ N(0, I_D)`. A clean sample is `z`
/// broadcast over the plane, plus a smooth nuisance field along one
/// direction shared by every identity (random per-sample amplitude and
/// planar tilt, scale `NUISANCE_GAIN · noise_sigma`), plus white noise of
/// scale `noise_sigma`. A `redundancy_rate` fraction of each set are
/// copies of a clean in-set sample with a per-sample offset and white
/// noise, both of scale `redundancy_noise`.
pub fn generate_synthetic(config: &SynthConfig) -> Result<SyntheticTask> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (h, w, d) = (config.h, config.w, config.d);
    let hw = h * w;

    let mut nuisance = normal_vec(&mut rng, d, 1.0);
    let norm = nuisance.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let rescale = (d as f64).sqrt() / norm;
    nuisance.iter_mut().for_each(|v| *v *= rescale);

    let coord = |i: usize, len: usize| if len > 1 { i as f64 / (len - 1) as f64 - 0.5 } else { 0.0 };
    let field_scale = SynthConfig::NUISANCE_GAIN * config.noise_sigma;

    let mut sets = Vec::with_capacity(config.identities * config.sets_per_identity);
    let mut origins = Vec::with_capacity(sets.capacity());
    for id in 0..config.identities {
        let latent = normal_vec(&mut rng, d, 1.0);
        for _ in 0..config.sets_per_identity {
            let size = rng.random_range(config.min_set_size()..=config.n_per_set);
            let dups = config.duplicates_for(size);
            let clean = size - dups;
            let mut maps: Vec<Vec<f64>> = Vec::with_capacity(size);
            let mut origin = Vec::with_capacity(size);
            for _ in 0..clean {
                let amp: f64 = field_scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
                let tilt = normal_vec(&mut rng, 2, 0.5);
                let white = normal_vec(&mut rng, hw * d, config.noise_sigma);
                let mut values = Vec::with_capacity(hw * d);
                for p in 0..hw {
                    let profile = 1.0 + tilt[0] * coord(p / w, h) + tilt[1] * coord(p % w, w);
                    for c in 0..d {
                        values.push(latent[c] + amp * profile * nuisance[c] + white[p * d + c]);
                    }
                }
                maps.push(values);
                origin.push(SampleOrigin::Clean);
            }
            for _ in 0..dups {
                let src = rng.random_range(0..clean);
                let offset = normal_vec(&mut rng, d, config.redundancy_noise);
                let white = normal_vec(&mut rng, hw * d, config.redundancy_noise);
                let values = maps[src]
                    .iter()
                    .enumerate()
                    .map(|(k, v)| v + offset[k % d] + white[k])
                    .collect();
                maps.push(values);
                origin.push(SampleOrigin::DuplicateOf(src));
            }
            let maps = maps
                .into_iter()
                .map(|v| FeatureMap::new(h, w, d, v))
                .collect::<Result<Vec<_>>>()?;
            sets.push(FeatureSet::new(maps, Some(dim_u32(id, "identity")?))?);
            origins.push(origin);
        }
    }
    Ok(SyntheticTask { sets, origins })
}
