//! Synthetic feature-sequence benchmark with planted, class-bearing segments.
//!
//! Every video is white noise `𝒩(0, σ_n²)` with one informative segment that
//! carries the class prototype `p_c` and a few distractor segments that carry
//! a shared activity vector orthogonal to every prototype.
//!
//! Prototypes are `s·(√ρ·u + √(1−ρ)·v_c)` for an orthonormal frame
//! `{u, v_1, …, v_C, a}` drawn at random, so pairwise distances are exactly
//! `s·√(2(1−ρ))` and the activity direction `a` carries no class signal.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::io::ByteReader;

pub const DATASET_MAGIC: &[u8; 8] = b"STCSYNTH";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub videos: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub dim: usize,
    pub classes: usize,
    pub min_segment: usize,
    pub max_segment: usize,
    /// Prototype scale `s`.
    pub separation: f64,
    /// Per-entry noise deviation `σ_n`.
    pub noise: f64,
    /// Shared-direction fraction `ρ ∈ [0, 0.5]` of every prototype.
    pub prototype_overlap: f64,
    pub min_distractors: usize,
    pub max_distractors: usize,
    pub seed: u64,
    pub train_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            videos: 200,
            min_len: 300,
            max_len: 900,
            dim: 16,
            classes: 5,
            min_segment: 3,
            max_segment: 10,
            separation: 4.0,
            noise: 1.0,
            prototype_overlap: 0.5,
            min_distractors: 1,
            max_distractors: 3,
            seed: 0,
            train_fraction: 0.8,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.videos == 0 {
            return fail("videos must be at least 1".into());
        }
        if self.classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.dim < self.classes + 2 {
            return fail(format!(
                "dim {} too small for {} prototypes plus shared and activity directions",
                self.dim, self.classes
            ));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return fail(format!("bad length range [{}, {}]", self.min_len, self.max_len));
        }
        if self.min_segment == 0 || self.min_segment > self.max_segment {
            return fail(format!(
                "bad segment range [{}, {}]",
                self.min_segment, self.max_segment
            ));
        }
        if self.min_segment > self.min_len {
            return fail(format!(
                "segment length {} cannot fit in a {}-frame video",
                self.min_segment, self.min_len
            ));
        }
        if self.min_distractors > self.max_distractors {
            return fail("min_distractors exceeds max_distractors".into());
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return fail(format!("separation must be positive, got {}", self.separation));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail(format!("noise must be non-negative, got {}", self.noise));
        }
        if !(0.0..=0.5).contains(&self.prototype_overlap) {
            return fail(format!(
                "prototype_overlap {} outside [0, 0.5]",
                self.prototype_overlap
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return fail(format!("train_fraction {} outside (0, 1)", self.train_fraction));
        }
        Ok(())
    }

    fn train_count(&self) -> usize {
        ((self.videos as f64 * self.train_fraction).round() as usize).clamp(1, self.videos.max(2) - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthVideo {
    pub id: usize,
    /// `[T, D]` features (values are exactly representable as `f32`).
    pub features: Tensor,
    /// Grade in `1..=C`.
    pub grade: usize,
    pub timestamp: usize,
    /// Informative segment `[start, end)`.
    pub segment: (usize, usize),
    pub distractors: Vec<(usize, usize)>,
    pub split: Split,
}

impl SynthVideo {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub prototypes: Vec<Vec<f64>>,
    pub activity: Vec<f64>,
    pub videos: Vec<SynthVideo>,
}

fn to_f32_precision(v: f64) -> f64 {
    v as f32 as f64
}

fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `count` random orthonormal vectors in `ℝ^dim` (Gram–Schmidt with redraws).
fn orthonormal_frame(rng: &mut impl Rng, dim: usize, count: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = normal_vec(rng, dim);
        for b in &basis {
            let c = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        let norm = dot(&v, &v).sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    basis
}

pub fn min_pairwise_distance(vectors: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            let d: f64 = vectors[i]
                .iter()
                .zip(&vectors[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            best = best.min(d);
        }
    }
    best
}

fn overlaps(a: (usize, usize), b: (usize, usize)) -> bool {
    a.0 < b.1 && b.0 < a.1
}

pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (c, d, s) = (config.classes, config.dim, config.separation);

    // Redraw until the f32-rounded prototypes keep their separation.
    let (prototypes, activity) = loop {
        let frame = orthonormal_frame(&mut rng, d, c + 2);
        let (shared, own) = (config.prototype_overlap.sqrt(), (1.0 - config.prototype_overlap).sqrt());
        let protos: Vec<Vec<f64>> = (0..c)
            .map(|k| {
                (0..d)
                    .map(|j| to_f32_precision(s * (shared * frame[0][j] + own * frame[k + 1][j])))
                    .collect()
            })
            .collect();
        let activity: Vec<f64> = frame[c + 1].iter().map(|v| to_f32_precision(s * v)).collect();
        if min_pairwise_distance(&protos) >= s * (1.0 - 1e-6) {
            break (protos, activity);
        }
    };

    let mut grades: Vec<usize> = (0..config.videos).map(|i| i % c + 1).collect();
    grades.shuffle(&mut rng);
    let n_train = config.train_count();

    let mut videos = Vec::with_capacity(config.videos);
    for (id, &grade) in grades.iter().enumerate() {
        let mut vr = ChaCha8Rng::seed_from_u64(config.seed);
        vr.set_stream(id as u64 + 1);
        let len = vr.random_range(config.min_len..=config.max_len);
        let seg_len = vr.random_range(config.min_segment..=config.max_segment.min(len));
        let start = vr.random_range(0..=len - seg_len);
        let segment = (start, start + seg_len);
        let timestamp = vr.random_range(segment.0..segment.1);

        let n_distractors = vr.random_range(config.min_distractors..=config.max_distractors);
        let mut distractors: Vec<(usize, usize)> = Vec::with_capacity(n_distractors);
        for _ in 0..n_distractors {
            let dl = vr.random_range(config.min_segment..=config.max_segment.min(len));
            for _ in 0..100 {
                let ds = vr.random_range(0..=len - dl);
                let cand = (ds, ds + dl);
                if !overlaps(cand, segment) && distractors.iter().all(|&o| !overlaps(cand, o)) {
                    distractors.push(cand);
                    break;
                }
            }
        }
        distractors.sort_unstable();

        let mut data = Vec::with_capacity(len * d);
        for frame in 0..len {
            for j in 0..d {
                let z: f64 = StandardNormal.sample(&mut vr);
                let mut v = config.noise * z;
                if frame >= segment.0 && frame < segment.1 {
                    v += prototypes[grade - 1][j];
                }
                if distractors.iter().any(|&(a, b)| frame >= a && frame < b) {
                    v += activity[j];
                }
                data.push(to_f32_precision(v));
            }
        }
        videos.push(SynthVideo {
            id,
            features: Tensor::new(vec![len, d], data)?,
            grade,
            timestamp,
            segment,
            distractors,
            split: if id < n_train { Split::Train } else { Split::Test },
        });
    }
    log::debug!("generated {} videos ({n_train} train)", videos.len());
    Ok(Dataset {
        config: config.clone(),
        prototypes,
        activity,
        videos,
    })
}

/// Which frames the nearest-prototype oracle averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleInput {
    Segment,
    WholeVideo,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SynthVideo> {
        self.videos.iter().filter(move |v| v.split == split)
    }

    pub fn train(&self) -> impl Iterator<Item = &SynthVideo> {
        self.split(Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &SynthVideo> {
        self.split(Split::Test)
    }

    /// Grade of the prototype nearest to `mean`.
    pub fn nearest_prototype(&self, mean: &[f64]) -> usize {
        let dist = |p: &Vec<f64>| p.iter().zip(mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let mut best = 0;
        for k in 1..self.prototypes.len() {
            if dist(&self.prototypes[k]) < dist(&self.prototypes[best]) {
                best = k;
            }
        }
        best + 1
    }

    /// Accuracy of the nearest-prototype rule on frame means over `split`.
    pub fn oracle_accuracy(&self, input: OracleInput, split: Split) -> f64 {
        let mut hits = 0usize;
        let mut total = 0usize;
        for v in self.split(split) {
            let (a, b) = match input {
                OracleInput::Segment => v.segment,
                OracleInput::WholeVideo => (0, v.len()),
            };
            let d = v.features.row_len();
            let mut mean = vec![0.0; d];
            for r in a..b {
                mean.iter_mut().zip(v.features.row(r)).for_each(|(m, x)| *m += x);
            }
            mean.iter_mut().for_each(|m| *m /= (b - a) as f64);
            hits += usize::from(self.nearest_prototype(&mean) == v.grade);
            total += 1;
        }
        if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = &self.config;
        let mut out = Vec::new();
        let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        let f32le = |out: &mut Vec<u8>, v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        for v in [
            cfg.videos,
            cfg.min_len,
            cfg.max_len,
            cfg.dim,
            cfg.classes,
            cfg.min_segment,
            cfg.max_segment,
        ] {
            u32le(&mut out, v);
        }
        for v in [cfg.separation, cfg.noise, cfg.prototype_overlap] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        u32le(&mut out, cfg.min_distractors);
        u32le(&mut out, cfg.max_distractors);
        out.extend_from_slice(&cfg.seed.to_le_bytes());
        out.extend_from_slice(&cfg.train_fraction.to_le_bytes());
        for p in &self.prototypes {
            p.iter().for_each(|&v| f32le(&mut out, v));
        }
        self.activity.iter().for_each(|&v| f32le(&mut out, v));
        u32le(&mut out, self.videos.len());
        for v in &self.videos {
            u32le(&mut out, v.len());
            u32le(&mut out, v.features.row_len());
            u32le(&mut out, v.grade);
            u32le(&mut out, v.timestamp);
            u32le(&mut out, v.segment.0);
            u32le(&mut out, v.segment.1);
            u32le(&mut out, v.distractors.len());
            for &(a, b) in &v.distractors {
                u32le(&mut out, a);
                u32le(&mut out, b);
            }
            out.push(match v.split {
                Split::Train => 0,
                Split::Test => 1,
            });
            v.features.data().iter().for_each(|&x| f32le(&mut out, x));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(8)? != DATASET_MAGIC {
            return Err(r.error_at(0, "not a dataset file (bad magic)"));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::Version {
                what: "dataset",
                found: version,
                expected: DATASET_VERSION,
            });
        }
        let cfg_at = r.offset();
        let mut next = || -> Result<usize> { Ok(r.u32()? as usize) };
        let (videos, min_len, max_len, dim, classes, min_segment, max_segment) =
            (next()?, next()?, next()?, next()?, next()?, next()?, next()?);
        let config = SynthConfig {
            videos,
            min_len,
            max_len,
            dim,
            classes,
            min_segment,
            max_segment,
            separation: r.f64()?,
            noise: r.f64()?,
            prototype_overlap: r.f64()?,
            min_distractors: r.u32()? as usize,
            max_distractors: r.u32()? as usize,
            seed: r.u64()?,
            train_fraction: r.f64()?,
        };
        config
            .validate()
            .map_err(|e| r.error_at(cfg_at, format!("config echo: {e}")))?;
        let f32s = |r: &mut ByteReader, n: usize| -> Result<Vec<f64>> {
            (0..n).map(|_| Ok(r.f32()? as f64)).collect()
        };
        let mut prototypes = Vec::with_capacity(classes);
        for _ in 0..classes {
            prototypes.push(f32s(&mut r, dim)?);
        }
        let activity = f32s(&mut r, dim)?;
        let count = r.u32()? as usize;
        let mut list = Vec::with_capacity(count.min(bytes.len()));
        for id in 0..count {
            let at = r.offset();
            let len = r.u32()? as usize;
            let d = r.u32()? as usize;
            let grade = r.u32()? as usize;
            let timestamp = r.u32()? as usize;
            let segment = (r.u32()? as usize, r.u32()? as usize);
            let nd = r.u32()? as usize;
            let mut distractors = Vec::with_capacity(nd.min(1024));
            for _ in 0..nd {
                distractors.push((r.u32()? as usize, r.u32()? as usize));
            }
            let split = match r.u8()? {
                0 => Split::Train,
                1 => Split::Test,
                other => return Err(r.error_here(format!("bad split flag {other}"))),
            };
            if d != dim || len == 0 {
                return Err(r.error_at(at, format!("video {id}: shape [{len}, {d}] invalid for D = {dim}")));
            }
            if grade == 0 || grade > classes {
                return Err(r.error_at(at, format!("video {id}: grade {grade} outside 1..={classes}")));
            }
            if !(segment.0 <= timestamp && timestamp < segment.1 && segment.1 <= len) {
                return Err(r.error_at(at, format!("video {id}: inconsistent annotation")));
            }
            let data = f32s(&mut r, len * d)?;
            list.push(SynthVideo {
                id,
                features: Tensor::new(vec![len, d], data)?,
                grade,
                timestamp,
                segment,
                distractors,
                split,
            });
        }
        if !r.is_at_end() {
            return Err(r.error_here("trailing bytes after last video"));
        }
        Ok(Self {
            config,
            prototypes,
            activity,
            videos: list,
        })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}
