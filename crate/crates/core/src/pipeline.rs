//! Run configuration, on-disk dataset layout and the subcommand bodies.
//!
//! Dataset layout under `data_dir`:
//!
//! ```text
//! features/<video_id>.feat       feature files
//! <split>.jsonl                  manifest (one ManifestRecord per line)
//! <split>_annotations.jsonl      annotations for labelled splits
//! ```

use std::borrow::Cow;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::{align, cosine_cost, AlignmentDump, CostMatrix};
use crate::autodiff::{AdamWConfig, Tape};
use crate::checkpoint::{Checkpoint, Phase};
use crate::datakit::{
    build_pretrain_set, gen_synthetic, load_features, mix_seed, save_features, write_jsonl, read_jsonl,
    AnnotationRecord, FeatureSequence, PretrainConfig, Split, SynthConfig, SyntheticPair,
};
use crate::error::{MatrError, Result};
use crate::metrics::{EvalReport, PairId};
use crate::model::{Matr, ModelConfig};
use crate::objectives::LossWeights;
use crate::train::{evaluate_pairs, resume_state, train_epochs, train_epochs_with, EvalPair, Sample, TrainOptions, TrainSummary};

pub const RUN_CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    /// Default location for checkpoints, logs and evaluation output.
    pub out_dir: PathBuf,
    /// Initialises `train` when set (and `--checkpoint` is not given).
    pub pretrain_checkpoint: Option<PathBuf>,
    /// Evaluated by `eval` when `--checkpoint` is not given.
    pub checkpoint: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            pretrain_checkpoint: None,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub pretrain_loss: LossWeights,
    /// Fine-tuning optimiser.
    pub optimizer: AdamWConfig,
    pub pretrain_optimizer: AdamWConfig,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub data: SynthConfig,
    pub pretrain: PretrainConfig,
    /// Used by [`run_pipeline`]: whether to pre-train before fine-tuning.
    pub use_pretraining: bool,
    pub eval_split: Split,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = SynthConfig::default();
        RunConfig {
            version: RUN_CONFIG_VERSION,
            seed: 0,
            model: ModelConfig { input_dim: data.feature_dim, ..ModelConfig::default() },
            loss: LossWeights::default(),
            pretrain_loss: LossWeights::default(),
            optimizer: AdamWConfig::default(),
            pretrain_optimizer: AdamWConfig::default(),
            epochs: 200,
            pretrain_epochs: 200,
            batch_size: 32,
            data,
            pretrain: PretrainConfig::default(),
            use_pretraining: true,
            eval_split: Split::Test,
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MatrError::io(path, e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| MatrError::format(path, format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != RUN_CONFIG_VERSION {
            return Err(MatrError::Version(format!(
                "run config version {}, expected {RUN_CONFIG_VERSION}",
                self.version
            )));
        }
        if self.epochs == 0 || self.pretrain_epochs == 0 {
            return Err(MatrError::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(MatrError::InvalidArgument("batch_size must be at least 1".into()));
        }
        self.model.validate()?;
        self.loss.validate()?;
        self.pretrain_loss.validate()?;
        self.data.validate()
    }

    fn model_seed(&self) -> u64 {
        mix_seed(self.seed, 200, 0)
    }

    pub fn default_pretrain_checkpoint(&self) -> PathBuf {
        self.paths.out_dir.join("pretrain.ckpt")
    }

    pub fn default_train_checkpoint(&self) -> PathBuf {
        self.paths.out_dir.join("train.ckpt")
    }
}

/// Log file written next to a checkpoint.
pub fn log_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("log.jsonl")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<usize>,
    pub target_id: String,
    /// Relative to the dataset directory.
    pub target_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_sec: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_sec: Option<f64>,
    pub frame_period_sec: f64,
}

pub fn manifest_path(data_dir: &Path, split: Split) -> PathBuf {
    data_dir.join(format!("{}.jsonl", split.name()))
}

fn feature_rel(id: &str) -> PathBuf {
    PathBuf::from("features").join(format!("{id}.feat"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenDataSummary {
    pub data_dir: PathBuf,
    pub counts: Vec<(Split, usize)>,
    pub classes: Vec<(Split, Vec<usize>)>,
}

pub fn cmd_gen_data(cfg: &RunConfig, out: Option<&Path>) -> Result<GenDataSummary> {
    cfg.validate()?;
    let dir = out.unwrap_or(&cfg.paths.data_dir);
    let ds = gen_synthetic(&cfg.data, cfg.seed)?;
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| MatrError::io(&feat_dir, e))?;

    let write_pairs = |split: Split, pairs: &[SyntheticPair]| -> Result<usize> {
        let mut manifest = Vec::with_capacity(pairs.len());
        let mut annotations = Vec::with_capacity(pairs.len());
        for p in pairs {
            let (tp, qp) = (feature_rel(&p.target.video_id), feature_rel(&p.query.video_id));
            save_features(&dir.join(&tp), &p.target)?;
            save_features(&dir.join(&qp), &p.query)?;
            manifest.push(ManifestRecord {
                split,
                class_id: Some(p.class_id),
                target_id: p.target.video_id.clone(),
                target_path: tp,
                query_id: Some(p.query.video_id.clone()),
                query_path: Some(qp),
                start_sec: Some(p.annotation.start_sec),
                end_sec: Some(p.annotation.end_sec),
                frame_period_sec: p.target.frame_period_sec,
            });
            annotations.push(p.annotation.clone());
        }
        write_jsonl(&manifest_path(dir, split), &manifest)?;
        write_jsonl(&dir.join(format!("{}_annotations.jsonl", split.name())), &annotations)?;
        Ok(pairs.len())
    };
    let mut counts = vec![
        (Split::Train, write_pairs(Split::Train, &ds.train)?),
        (Split::Val, write_pairs(Split::Val, &ds.val)?),
        (Split::Test, write_pairs(Split::Test, &ds.test)?),
    ];
    let mut manifest = Vec::with_capacity(ds.unlabeled.len());
    for v in &ds.unlabeled {
        let tp = feature_rel(&v.video_id);
        save_features(&dir.join(&tp), v)?;
        manifest.push(ManifestRecord {
            split: Split::Unlabeled,
            class_id: None,
            target_id: v.video_id.clone(),
            target_path: tp,
            query_id: None,
            query_path: None,
            start_sec: None,
            end_sec: None,
            frame_period_sec: v.frame_period_sec,
        });
    }
    write_jsonl(&manifest_path(dir, Split::Unlabeled), &manifest)?;
    counts.push((Split::Unlabeled, manifest.len()));
    Ok(GenDataSummary { data_dir: dir.to_path_buf(), counts, classes: ds.classes })
}

fn read_manifest(data_dir: &Path, split: Split) -> Result<Vec<ManifestRecord>> {
    let p = manifest_path(data_dir, split);
    if !p.exists() {
        return Err(MatrError::InvalidArgument(format!(
            "manifest {} not found (run gen-data first)",
            p.display()
        )));
    }
    read_jsonl(&p)
}

fn check_dim(seq: &FeatureSequence, model: &ModelConfig) -> Result<()> {
    if seq.dim() != model.input_dim {
        return Err(MatrError::shape(
            "load",
            format!("{} has dim {}, model expects {}", seq.video_id, seq.dim(), model.input_dim),
        ));
    }
    Ok(())
}

/// Loads all labelled pairs of a split.
pub fn load_pairs(data_dir: &Path, split: Split, model: &ModelConfig) -> Result<Vec<EvalPair>> {
    let mut out = Vec::new();
    for r in read_manifest(data_dir, split)? {
        let (Some(qid), Some(qp), Some(s), Some(e)) = (&r.query_id, &r.query_path, r.start_sec, r.end_sec) else {
            return Err(MatrError::format(
                &manifest_path(data_dir, split),
                format!("record {} lacks query or annotation", r.target_id),
            ));
        };
        let target = load_features(&data_dir.join(&r.target_path), r.frame_period_sec)?;
        let query = load_features(&data_dir.join(qp), r.frame_period_sec)?;
        check_dim(&target, model)?;
        check_dim(&query, model)?;
        let annotation = AnnotationRecord { target_id: r.target_id.clone(), query_id: qid.clone(), start_sec: s, end_sec: e };
        annotation.validate(Some(target.duration_sec()))?;
        out.push(EvalPair { target, query, annotation });
    }
    Ok(out)
}

pub fn load_unlabeled(data_dir: &Path, model: &ModelConfig) -> Result<Vec<FeatureSequence>> {
    let mut out = Vec::new();
    for r in read_manifest(data_dir, Split::Unlabeled)? {
        let v = load_features(&data_dir.join(&r.target_path), r.frame_period_sec)?;
        check_dim(&v, model)?;
        out.push(v);
    }
    Ok(out)
}

fn load_checked(path: &Path, cfg: &RunConfig) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    ck.check_config(&cfg.model)?;
    Ok(ck)
}

/// Self-supervised clip localisation on the unlabeled videos.
pub fn cmd_pretrain(cfg: &RunConfig, resume: Option<&Path>, out: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    let resume_ck = resume.map(|p| load_checked(p, cfg)).transpose()?;
    if let Some(ck) = &resume_ck {
        if ck.meta.phase != Phase::Pretrain {
            return Err(MatrError::InvalidArgument("pretrain can only resume a pretrain checkpoint".into()));
        }
    }
    let videos = load_unlabeled(&cfg.paths.data_dir, &cfg.model)?;
    // fresh clips every epoch
    let clips = |epoch: usize| -> Result<Cow<'static, [Sample]>> {
        let (set, _skipped) = build_pretrain_set(&videos, mix_seed(cfg.seed, 300, epoch as u64), &cfg.pretrain);
        if set.is_empty() {
            return Err(MatrError::InvalidArgument("no video long enough for pre-training".into()));
        }
        Ok(Cow::Owned(
            set.into_iter()
                .map(|s| Sample { target: s.target.features, query: s.query.features, labels: s.labels })
                .collect(),
        ))
    };
    clips(0)?;
    let mut model = match &resume_ck {
        Some(ck) => ck.model()?,
        None => Matr::new(cfg.model.clone(), cfg.model_seed())?,
    };
    let (mut opt, start) = resume_state(resume_ck.as_ref(), &model, cfg.pretrain_optimizer.clone())?;
    let ckpt = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.default_pretrain_checkpoint());
    let log = log_path(&ckpt);
    let opts = TrainOptions {
        phase: Phase::Pretrain,
        epochs: cfg.pretrain_epochs,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        weights: cfg.pretrain_loss.clone(),
        log: Some(&log),
        checkpoint: Some(&ckpt),
    };
    train_epochs_with(&mut model, &mut opt, start, &opts, clips)
}

/// Supervised training. `init` (or `paths.pretrain_checkpoint`) may be a
/// pre-training checkpoint, whose weights initialise a fresh run, or a
/// training checkpoint, which is resumed.
pub fn cmd_train(cfg: &RunConfig, init: Option<&Path>, out: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    let init = init.or(cfg.paths.pretrain_checkpoint.as_deref());
    let init_ck = init.map(|p| load_checked(p, cfg)).transpose()?;
    let pairs = load_pairs(&cfg.paths.data_dir, Split::Train, &cfg.model)?;
    let samples = pairs.iter().map(EvalPair::sample).collect::<Result<Vec<_>>>()?;
    let (mut model, resume) = match &init_ck {
        Some(ck) => (ck.model()?, (ck.meta.phase == Phase::Train).then_some(ck)),
        None => (Matr::new(cfg.model.clone(), cfg.model_seed())?, None),
    };
    let (mut opt, start) = resume_state(resume, &model, cfg.optimizer.clone())?;
    let ckpt = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.default_train_checkpoint());
    let log = log_path(&ckpt);
    let opts = TrainOptions {
        phase: Phase::Train,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        weights: cfg.loss.clone(),
        log: Some(&log),
        checkpoint: Some(&ckpt),
    };
    train_epochs(&mut model, &mut opt, &samples, start, &opts)
}

/// Evaluates a checkpoint on `cfg.eval_split`, writing `report.json`,
/// `summary.txt` and `predictions.jsonl` into `out` (default `<out_dir>/eval`).
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, out: Option<&Path>) -> Result<EvalReport> {
    cfg.validate()?;
    let default_ck = cfg.default_train_checkpoint();
    let ck_path = checkpoint.or(cfg.paths.checkpoint.as_deref()).unwrap_or(&default_ck);
    let model = load_checked(ck_path, cfg)?.model()?;
    let pairs = load_pairs(&cfg.paths.data_dir, cfg.eval_split, &cfg.model)?;
    let (report, preds) = evaluate_pairs(&model, &pairs)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.out_dir.join("eval"));
    fs::create_dir_all(&dir).map_err(|e| MatrError::io(&dir, e))?;
    let rp = dir.join("report.json");
    fs::write(&rp, serde_json::to_string_pretty(&report)?).map_err(|e| MatrError::io(&rp, e))?;
    let sp = dir.join("summary.txt");
    fs::write(&sp, report.summary() + "\n").map_err(|e| MatrError::io(&sp, e))?;
    write_jsonl(&dir.join("predictions.jsonl"), &preds)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AlignOutput {
    pub target_id: String,
    pub query_id: String,
    /// `features` for raw inputs, `model` when a checkpoint was given.
    pub source: String,
    /// Annotated frames, inclusive.
    pub annotated_span: Option<(usize, usize)>,
    /// Raw features, or projected features before fusion.
    pub pre: AlignmentDump,
    /// Encoder outputs; only with a checkpoint.
    pub post: Option<AlignmentDump>,
}

fn find_pair(cfg: &RunConfig, id: &PairId) -> Result<EvalPair> {
    for split in [Split::Train, Split::Val, Split::Test] {
        if !manifest_path(&cfg.paths.data_dir, split).exists() {
            continue;
        }
        let recs = read_manifest(&cfg.paths.data_dir, split)?;
        if recs.iter().any(|r| r.target_id == id.target_id && r.query_id.as_deref() == Some(id.query_id.as_str())) {
            return load_pairs(&cfg.paths.data_dir, split, &cfg.model)?
                .into_iter()
                .find(|p| &p.id() == id)
                .ok_or_else(|| MatrError::UnknownIds(vec![id.to_string()]));
        }
    }
    Err(MatrError::UnknownIds(vec![id.to_string()]))
}

/// Dumps cost, DP table, expected alignment and hard path for one pair using
/// `cfg.model.gamma` and `cfg.model.align_mode`.
pub fn cmd_align(cfg: &RunConfig, checkpoint: Option<&Path>, pair: &PairId, out: Option<&Path>) -> Result<AlignOutput> {
    cfg.validate()?;
    let model = checkpoint.map(|p| load_checked(p, cfg)?.model()).transpose()?;
    let p = find_pair(cfg, pair)?;
    let (gamma, mode) = (cfg.model.gamma, cfg.model.align_mode);
    let annotated_span = p.labels().ok().and_then(|l| l.span());
    let dump = |cost: CostMatrix| -> Result<AlignmentDump> {
        let r = align(&cost, gamma, mode)?;
        Ok(AlignmentDump::new(&cost, &r))
    };
    let (source, pre, post) = match &model {
        None => ("features", dump(cosine_cost(&p.target.features, &p.query.features)?)?, None),
        Some(m) => {
            let mut tape = Tape::eval(m.params());
            let o = m.forward(&mut tape, &p.target.features, &p.query.features)?;
            let pre = cosine_cost(tape.value(o.projected_target), tape.value(o.projected_query))?;
            let post = cosine_cost(tape.value(o.encoder_target), tape.value(o.encoder_query))?;
            ("model", dump(pre)?, Some(dump(post)?))
        }
    };
    let result = AlignOutput {
        target_id: pair.target_id.clone(),
        query_id: pair.query_id.clone(),
        source: source.into(),
        annotated_span,
        pre,
        post,
    };
    if let Some(path) = out {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| MatrError::io(dir, e))?;
        }
        fs::write(path, serde_json::to_string_pretty(&result)?).map_err(|e| MatrError::io(path, e))?;
    }
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub pretrain: Option<TrainSummary>,
    pub train: TrainSummary,
    pub report: EvalReport,
}

/// gen-data, optional pre-training, training and evaluation with all
/// artefacts under the configured directories.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineResult> {
    cmd_gen_data(cfg, None)?;
    let mut c = cfg.clone();
    c.paths.pretrain_checkpoint = None;
    let pretrain = if cfg.use_pretraining {
        let ck = cfg.default_pretrain_checkpoint();
        let s = cmd_pretrain(cfg, None, Some(&ck))?;
        c.paths.pretrain_checkpoint = Some(ck);
        Some(s)
    } else {
        None
    };
    let train = cmd_train(&c, None, None)?;
    let report = cmd_eval(&c, None, None)?;
    Ok(PipelineResult { pretrain, train, report })
}
