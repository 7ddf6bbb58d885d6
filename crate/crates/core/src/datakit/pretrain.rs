//! Self-supervised samples: a random clip of a video serves as the query for
//! that same video, optionally augmented.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::features::{round_to_f32, FeatureSequence};
use crate::autodiff::Array;
use crate::error::{MatrError, Result};
use crate::objectives::MomentLabels;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    None,
    Reverse,
    GaussianNoise,
    SlowDown,
    SpeedUp,
}

impl Augmentation {
    /// Augmentations drawn for the second copy of each clip.
    pub const RANDOM: [Augmentation; 4] = [
        Augmentation::Reverse,
        Augmentation::GaussianNoise,
        Augmentation::SlowDown,
        Augmentation::SpeedUp,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub min_clip: usize,
    /// Emit an augmented copy next to each clean clip.
    pub augment: bool,
    /// Noise standard deviation relative to the clip's RMS value.
    pub noise_rel_sigma: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            min_clip: 2,
            augment: true,
            noise_rel_sigma: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSample {
    pub target: FeatureSequence,
    pub query: FeatureSequence,
    pub labels: MomentLabels,
    pub span: (usize, usize),
    pub augmentation: Augmentation,
}

/// Applies one augmentation to a `[n, d]` clip.
pub fn augment<R: Rng>(clip: &Array, tag: Augmentation, noise_rel_sigma: f64, rng: &mut R) -> Array {
    let (n, d) = (clip.rows(), clip.cols());
    let rows = || (0..n).map(|i| clip.row(i));
    match tag {
        Augmentation::None => clip.clone(),
        Augmentation::Reverse => {
            let data: Vec<f64> = rows().rev().flatten().copied().collect();
            Array::from_parts(vec![n, d], data)
        }
        Augmentation::GaussianNoise => {
            let rms = (clip.data().iter().map(|v| v * v).sum::<f64>() / clip.len() as f64).sqrt();
            let sigma = noise_rel_sigma * rms;
            let data = clip
                .data()
                .iter()
                .map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let mut out = Array::from_parts(vec![n, d], data);
            round_to_f32(&mut out);
            out
        }
        Augmentation::SlowDown => {
            let data: Vec<f64> = rows().flat_map(|r| r.iter().chain(r)).copied().collect();
            Array::from_parts(vec![2 * n, d], data)
        }
        Augmentation::SpeedUp => {
            let data: Vec<f64> = rows().step_by(2).flatten().copied().collect();
            Array::from_parts(vec![n.div_ceil(2), d], data)
        }
    }
}

/// Builds the sample whose query is target rows `s..=e` under `tag`.
pub fn sample_with_span<R: Rng>(
    target: &FeatureSequence,
    span: (usize, usize),
    tag: Augmentation,
    cfg: &PretrainConfig,
    rng: &mut R,
) -> Result<PretrainSample> {
    let (s, e) = span;
    let labels = MomentLabels::from_span(target.len(), s, e)?;
    let clip = augment(&target.rows(s, e), tag, cfg.noise_rel_sigma, rng);
    Ok(PretrainSample {
        target: target.clone(),
        query: FeatureSequence {
            video_id: format!("{}_clip_{s}_{e}", target.video_id),
            features: clip,
            frame_period_sec: target.frame_period_sec,
        },
        labels,
        span,
        augmentation: tag,
    })
}

/// Draws a clip of length uniform in `[min_clip, L/2]` at a uniform start.
/// Returns the clean sample, followed by an augmented copy when enabled.
pub fn sample_pretrain(target: &FeatureSequence, seed: u64, cfg: &PretrainConfig) -> Result<Vec<PretrainSample>> {
    let l = target.len();
    let max_len = l / 2;
    if cfg.min_clip == 0 || max_len < cfg.min_clip {
        return Err(MatrError::InvalidArgument(format!(
            "video {} has {l} frames, needs at least {}",
            target.video_id,
            2 * cfg.min_clip.max(1)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = rng.random_range(cfg.min_clip..=max_len);
    let s = rng.random_range(0..=l - len);
    let span = (s, s + len - 1);
    let mut out = vec![sample_with_span(target, span, Augmentation::None, cfg, &mut rng)?];
    if cfg.augment {
        let tag = Augmentation::RANDOM[rng.random_range(0..Augmentation::RANDOM.len())];
        out.push(sample_with_span(target, span, tag, cfg, &mut rng)?);
    }
    Ok(out)
}

/// Samples for every video; videos too short to sample are skipped and counted.
pub fn build_pretrain_set(videos: &[FeatureSequence], seed: u64, cfg: &PretrainConfig) -> (Vec<PretrainSample>, usize) {
    let mut samples = Vec::new();
    let mut skipped = 0;
    for (i, v) in videos.iter().enumerate() {
        match sample_pretrain(v, super::synth::mix_seed(seed, 5, i as u64), cfg) {
            Ok(s) => samples.extend(s),
            Err(_) => skipped += 1,
        }
    }
    (samples, skipped)
}
