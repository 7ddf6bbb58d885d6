//! Planted-moment synthetic data.
//!
//! Background frames are i.i.d. standard normal vectors. Every class owns a
//! centroid drawn from the same distribution; a moment is a run of frames
//! `centroid + sigma * noise`, and its query is an independent draw around
//! the same centroid. Train, validation and test use disjoint classes.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::features::{round_to_f32, AnnotationRecord, FeatureSequence};
use super::labels::labels_to_timestamps;
use crate::autodiff::Array;
use crate::error::{MatrError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Unlabeled target videos for self-supervised pre-training.
    pub n_unlabeled: usize,
    /// Inclusive target length range.
    pub m_range: (usize, usize),
    /// Inclusive query length range.
    pub n_range: (usize, usize),
    /// Planted moment length as a fraction of the target, inclusive range.
    pub moment_frac: (f64, f64),
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub n_train_classes: usize,
    pub n_val_classes: usize,
    pub n_test_classes: usize,
    pub frame_period_sec: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_train: 400,
            n_val: 50,
            n_test: 100,
            n_unlabeled: 200,
            m_range: (20, 40),
            n_range: (4, 8),
            moment_frac: (0.2, 0.5),
            feature_dim: 32,
            noise_sigma: 0.3,
            n_train_classes: 8,
            n_val_classes: 4,
            n_test_classes: 4,
            frame_period_sec: 2.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MatrError::InvalidArgument(format!("synthetic config: {m}")));
        if self.m_range.0 < 2 || self.m_range.0 > self.m_range.1 {
            return bad("m_range must satisfy 2 <= min <= max");
        }
        if self.n_range.0 < 1 || self.n_range.0 > self.n_range.1 {
            return bad("n_range must satisfy 1 <= min <= max");
        }
        let (a, b) = self.moment_frac;
        if !(0.0 < a && a <= b && b <= 1.0) {
            return bad("moment_frac must satisfy 0 < lo <= hi <= 1");
        }
        if self.feature_dim == 0 || !(self.noise_sigma >= 0.0) || !(self.frame_period_sec > 0.0) {
            return bad("feature_dim, noise_sigma and frame_period_sec out of range");
        }
        if self.n_train_classes == 0 || self.n_test_classes == 0 || (self.n_val > 0 && self.n_val_classes == 0) {
            return bad("every non-empty split needs at least one class");
        }
        Ok(())
    }

    /// Inclusive planted-length bounds for a target of `m` frames.
    pub fn moment_len_bounds(&self, m: usize) -> (usize, usize) {
        let lo = ((self.moment_frac.0 * m as f64).round() as usize).clamp(2.min(m), m);
        let hi = ((self.moment_frac.1 * m as f64).round() as usize).clamp(lo, m);
        (lo, hi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    Unlabeled,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unlabeled => "unlabeled",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
            Split::Unlabeled => 4,
        }
    }
}

/// One generated (target, query) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    pub split: Split,
    pub class_id: usize,
    pub target: FeatureSequence,
    pub query: FeatureSequence,
    pub annotation: AnnotationRecord,
    /// Planted frames, inclusive.
    pub span: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub train: Vec<SyntheticPair>,
    pub val: Vec<SyntheticPair>,
    pub test: Vec<SyntheticPair>,
    /// Targets without annotations (their queries are discarded).
    pub unlabeled: Vec<FeatureSequence>,
    /// Class ids used by each split.
    pub classes: Vec<(Split, Vec<usize>)>,
    pub centroids: Vec<Vec<f64>>,
}

/// splitmix64 finaliser, used to derive independent per-item seeds.
pub fn mix_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED69));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn normal_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn planted_pair<R: Rng>(
    cfg: &SynthConfig,
    rng: &mut R,
    centroid: &[f64],
    target_id: String,
    query_id: String,
) -> (FeatureSequence, FeatureSequence, (usize, usize)) {
    let d = cfg.feature_dim;
    let m = rng.random_range(cfg.m_range.0..=cfg.m_range.1);
    let n = rng.random_range(cfg.n_range.0..=cfg.n_range.1);
    let (lo, hi) = cfg.moment_len_bounds(m);
    let len = rng.random_range(lo..=hi);
    let s = rng.random_range(0..=m - len);
    let e = s + len - 1;
    let mut target = Vec::with_capacity(m * d);
    for i in 0..m {
        if (s..=e).contains(&i) {
            target.extend(centroid.iter().map(|c| c + cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal)));
        } else {
            target.extend(normal_vec(rng, d));
        }
    }
    let mut query = Vec::with_capacity(n * d);
    for _ in 0..n {
        query.extend(centroid.iter().map(|c| c + cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal)));
    }
    let mut t = Array::from_parts(vec![m, d], target);
    let mut q = Array::from_parts(vec![n, d], query);
    round_to_f32(&mut t);
    round_to_f32(&mut q);
    let p = cfg.frame_period_sec;
    (
        FeatureSequence { video_id: target_id, features: t, frame_period_sec: p },
        FeatureSequence { video_id: query_id, features: q, frame_period_sec: p },
        (s, e),
    )
}

/// Generates all splits. Each item draws from its own generator derived from
/// `(seed, split, index)`, so output does not depend on generation order.
pub fn gen_synthetic(cfg: &SynthConfig, seed: u64) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let n_classes = cfg.n_train_classes + cfg.n_val_classes + cfg.n_test_classes;
    let mut crng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0, 0));
    let mut centroids: Vec<Vec<f64>> = (0..n_classes).map(|_| normal_vec(&mut crng, cfg.feature_dim)).collect();
    for c in &mut centroids {
        c.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
    let train_classes: Vec<usize> = (0..cfg.n_train_classes).collect();
    let val_classes: Vec<usize> = (cfg.n_train_classes..cfg.n_train_classes + cfg.n_val_classes).collect();
    let test_classes: Vec<usize> = (cfg.n_train_classes + cfg.n_val_classes..n_classes).collect();

    let make = |split: Split, count: usize, classes: &[usize]| -> Vec<SyntheticPair> {
        (0..count)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, split.stream(), i as u64));
                let class_id = classes[rng.random_range(0..classes.len())];
                let tid = format!("{}_{i:05}_t", split.name());
                let qid = format!("{}_{i:05}_q", split.name());
                let (target, query, span) = planted_pair(cfg, &mut rng, &centroids[class_id], tid.clone(), qid.clone());
                let (start_sec, end_sec) = labels_to_timestamps(span, cfg.frame_period_sec);
                SyntheticPair {
                    split,
                    class_id,
                    target,
                    query,
                    annotation: AnnotationRecord { target_id: tid, query_id: qid, start_sec, end_sec },
                    span,
                }
            })
            .collect()
    };
    let train = make(Split::Train, cfg.n_train, &train_classes);
    let val = if cfg.n_val > 0 { make(Split::Val, cfg.n_val, &val_classes) } else { Vec::new() };
    let test = make(Split::Test, cfg.n_test, &test_classes);
    let unlabeled = make(Split::Unlabeled, cfg.n_unlabeled, &train_classes)
        .into_iter()
        .map(|p| p.target)
        .collect();
    Ok(SyntheticDataset {
        train,
        val,
        test,
        unlabeled,
        classes: vec![
            (Split::Train, train_classes),
            (Split::Val, val_classes),
            (Split::Test, test_classes),
        ],
        centroids,
    })
}
