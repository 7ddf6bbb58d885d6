//! Data ingestion and generation.

mod features;
mod labels;
mod pretrain;
mod synth;

pub use features::{
    load_annotations, load_features, read_jsonl, round_to_f32, save_features, write_jsonl, AnnotationRecord,
    FeatureSequence, DEFAULT_FRAME_PERIOD_SEC, FEATURE_MAGIC, FEATURE_VERSION,
};
pub use labels::{labels_to_timestamps, span_to_grid_segment, timestamps_to_labels};
pub use pretrain::{
    augment, build_pretrain_set, sample_pretrain, sample_with_span, Augmentation, PretrainConfig, PretrainSample,
};
pub use synth::{gen_synthetic, mix_seed, Split, SynthConfig, SyntheticDataset, SyntheticPair};
