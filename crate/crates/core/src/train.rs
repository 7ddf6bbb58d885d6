//! Mini-batch training loop and evaluation driver.

use std::borrow::Cow;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, Array, Gradients, Tape};
use crate::checkpoint::{Checkpoint, Phase};
use crate::datakit::{mix_seed, span_to_grid_segment, timestamps_to_labels, AnnotationRecord, FeatureSequence};
use crate::error::{MatrError, Result};
use crate::heads::{decode_segments, nms_1d, select_top1, Segment, NMS_IOU_THRESHOLD};
use crate::metrics::{evaluate, EvalReport, PairId};
use crate::model::Matr;
use crate::objectives::{overall_loss, pretrain_loss, LossBreakdown, LossWeights, MomentLabels};

/// One supervised example in raw feature space.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub target: Array,
    pub query: Array,
    pub labels: MomentLabels,
}

#[derive(Clone, Debug)]
pub struct TrainOptions<'a> {
    pub phase: Phase,
    /// Total epochs for this phase; training resumes from the checkpoint epoch.
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Append-only JSON-lines log.
    pub log: Option<&'a Path>,
    /// Written after every epoch.
    pub checkpoint: Option<&'a Path>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub phase: Phase,
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub fg: f64,
    pub seg: f64,
    pub align_pre: f64,
    pub align_post: f64,
    pub wall_time_sec: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub final_epoch: usize,
    pub final_step: u64,
    /// Mean total loss per epoch.
    pub epoch_losses: Vec<f64>,
}

fn phase_stream(phase: Phase) -> u64 {
    match phase {
        Phase::Pretrain => 101,
        Phase::Train => 102,
    }
}

/// Loss and parameter gradients for one batch.
pub fn batch_gradients(
    model: &Matr,
    batch: &[&Sample],
    phase: Phase,
    weights: &LossWeights,
    dropout_seed: u64,
) -> Result<(LossBreakdown, Gradients)> {
    let mut tape = Tape::train(model.params(), dropout_seed);
    let mut outputs = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for s in batch {
        outputs.push(model.forward(&mut tape, &s.target, &s.query)?);
        labels.push(s.labels.clone());
    }
    let (loss, br) = match phase {
        Phase::Pretrain => pretrain_loss(&mut tape, &outputs, &labels, weights)?,
        Phase::Train => overall_loss(&mut tape, &outputs, &labels, weights)?,
    };
    let mut grads = Gradients::zeros_like(model.params());
    if br.total.is_finite() {
        tape.backward(loss)?;
        tape.accumulate_param_grads(&mut grads, 1.0);
    }
    Ok((br, grads))
}

/// Runs epochs `start_epoch..opts.epochs`. A non-finite loss aborts with
/// [`MatrError::Divergence`]; the checkpoint on disk is then the last good one.
pub fn train_epochs(
    model: &mut Matr,
    opt: &mut AdamW,
    samples: &[Sample],
    start_epoch: usize,
    opts: &TrainOptions<'_>,
) -> Result<TrainSummary> {
    if samples.is_empty() {
        return Err(MatrError::InvalidArgument("no training samples".into()));
    }
    train_epochs_with(model, opt, start_epoch, opts, |_| Ok(Cow::Borrowed(samples)))
}

/// Like [`train_epochs`], but draws the sample set for each epoch from
/// `samples_for(epoch)`.
pub fn train_epochs_with<'s, F>(
    model: &mut Matr,
    opt: &mut AdamW,
    start_epoch: usize,
    opts: &TrainOptions<'_>,
    mut samples_for: F,
) -> Result<TrainSummary>
where
    F: FnMut(usize) -> Result<Cow<'s, [Sample]>>,
{
    if opts.batch_size == 0 {
        return Err(MatrError::InvalidArgument("batch_size must be at least 1".into()));
    }
    opts.weights.validate()?;
    let mut log = match opts.log {
        Some(p) => {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir).map_err(|e| MatrError::io(dir, e))?;
            }
            Some(OpenOptions::new().create(true).append(true).open(p).map_err(|e| MatrError::io(p, e))?)
        }
        None => None,
    };
    if let Some(p) = opts.checkpoint {
        Checkpoint::capture(model, Some(opt), opts.phase, start_epoch).save(p)?;
    }
    let clock = Instant::now();
    let stream = phase_stream(opts.phase);
    let mut summary = TrainSummary { final_epoch: start_epoch, final_step: opt.step_count(), ..Default::default() };
    for epoch in start_epoch..opts.epochs {
        let samples = samples_for(epoch)?;
        if samples.is_empty() {
            return Err(MatrError::InvalidArgument("no training samples".into()));
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(opts.seed, stream, epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let step = opt.step_count() + 1;
            let dropout_seed = mix_seed(opts.seed, stream + 1000, step);
            let (br, grads) = batch_gradients(model, &batch, opts.phase, &opts.weights, dropout_seed)?;
            if !br.total.is_finite() {
                return Err(MatrError::Divergence { step });
            }
            opt.step(model.params_mut(), &grads)?;
            total += br.total;
            batches += 1;
            if let Some(f) = log.as_mut() {
                let rec = StepLog {
                    phase: opts.phase,
                    epoch,
                    step,
                    loss: br.total,
                    fg: br.fg,
                    seg: br.seg,
                    align_pre: br.align_pre,
                    align_post: br.align_post,
                    wall_time_sec: clock.elapsed().as_secs_f64(),
                };
                let line = serde_json::to_string(&rec)?;
                writeln!(f, "{line}").map_err(|e| MatrError::io(opts.log.unwrap(), e))?;
            }
        }
        summary.epoch_losses.push(total / batches as f64);
        summary.epochs_run += 1;
        summary.final_epoch = epoch + 1;
        summary.final_step = opt.step_count();
        if let Some(p) = opts.checkpoint {
            Checkpoint::capture(model, Some(opt), opts.phase, epoch + 1).save(p)?;
        }
    }
    Ok(summary)
}

/// A labelled pair ready for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPair {
    pub target: FeatureSequence,
    pub query: FeatureSequence,
    pub annotation: AnnotationRecord,
}

impl EvalPair {
    pub fn id(&self) -> PairId {
        PairId::new(&self.annotation.target_id, &self.annotation.query_id)
    }

    pub fn labels(&self) -> Result<MomentLabels> {
        let a = &self.annotation;
        timestamps_to_labels((a.start_sec, a.end_sec), self.target.len(), self.target.frame_period_sec)
    }

    /// Ground truth on the frame grid used by decoded predictions.
    pub fn ground_truth(&self) -> Result<Segment> {
        let span = self.labels()?.span().ok_or(MatrError::EmptyPath)?;
        let (a, b) = span_to_grid_segment(span, self.target.frame_period_sec);
        Ok(Segment::new(a, b, 1.0))
    }

    pub fn sample(&self) -> Result<Sample> {
        Ok(Sample {
            target: self.target.features.clone(),
            query: self.query.features.clone(),
            labels: self.labels()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub target_id: String,
    pub query_id: String,
    pub top1: Segment,
    /// Candidates surviving NMS, best first.
    pub kept: Vec<Segment>,
}

/// Forward, decode, NMS and top-1 selection for one pair.
pub fn predict_pair(model: &Matr, pair: &EvalPair) -> Result<PredictionRecord> {
    let pred = model.predict(&pair.target.features, &pair.query.features)?;
    let cands = decode_segments(&pred, pair.target.frame_period_sec)?;
    let kept = nms_1d(&cands, NMS_IOU_THRESHOLD);
    let top1 = select_top1(&kept)?;
    Ok(PredictionRecord {
        target_id: pair.annotation.target_id.clone(),
        query_id: pair.annotation.query_id.clone(),
        top1,
        kept,
    })
}

pub fn evaluate_pairs(model: &Matr, pairs: &[EvalPair]) -> Result<(EvalReport, Vec<PredictionRecord>)> {
    let mut preds = std::collections::BTreeMap::new();
    let mut gt = std::collections::BTreeMap::new();
    let mut records = Vec::with_capacity(pairs.len());
    for p in pairs {
        let rec = predict_pair(model, p)?;
        preds.insert(p.id(), rec.top1);
        gt.insert(p.id(), p.ground_truth()?);
        records.push(rec);
    }
    Ok((evaluate(&preds, &gt)?, records))
}

/// Rebuilds the optimizer and epoch counter from a checkpoint of the same
/// phase, or starts fresh.
pub fn resume_state(ck: Option<&Checkpoint>, model: &Matr, config: crate::autodiff::AdamWConfig) -> Result<(AdamW, usize)> {
    match ck {
        Some(c) => Ok((c.optimizer(config)?, c.meta.epoch)),
        None => Ok((AdamW::new(config, model.params()), 0)),
    }
}
