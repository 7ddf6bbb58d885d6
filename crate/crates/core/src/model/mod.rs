//! The moment-alignment transformer.
//!
//! Target and query frame features are projected to the hidden width, aligned
//! (loss only), fused by a shared encoder over their concatenation, aligned
//! again to pick the target span, refined by a decoder of learnable queries
//! that cross-attends to that span, and finally concatenated with the
//! encoder's target states for the prediction heads.

mod config;
pub mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::ModelConfig;
pub use layers::{positional_encoding, positional_rows};

use crate::alignment::{self, AlignmentResult, CostMatrix};
use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{MatrError, Result};
use crate::heads::{HeadOutput, Prediction, PredictionHeads};
use layers::{FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamBuilder};

#[derive(Clone, Copy, Debug)]
struct Projection {
    first: Linear,
    first_norm: LayerNorm,
    second: Linear,
    second_norm: LayerNorm,
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    attn: MultiHeadAttention,
    attn_norm: LayerNorm,
    ffn: FeedForward,
    ffn_norm: LayerNorm,
}

#[derive(Clone, Copy, Debug)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    self_norm: LayerNorm,
    cross_attn: MultiHeadAttention,
    cross_norm: LayerNorm,
    ffn: FeedForward,
    ffn_norm: LayerNorm,
}

/// Model weights plus the handles that address them.
#[derive(Clone, Debug)]
pub struct Matr {
    config: ModelConfig,
    params: ParamStore,
    projection: Projection,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    queries: ParamId,
    heads: PredictionHeads,
}

/// Everything produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// Target length `M`.
    pub m: usize,
    pub projected_target: Var,
    pub projected_query: Var,
    /// `[M, d]`
    pub encoder_target: Var,
    /// `[N, d]`
    pub encoder_query: Var,
    /// `[l, d]`
    pub decoder_out: Var,
    /// `[M + l, d]`
    pub fused: Var,
    pub pre_align_loss: Var,
    pub post_align_loss: Var,
    pub pre_align: AlignmentResult,
    pub post_align: AlignmentResult,
    /// Target rows the decoder attended to.
    pub span: (usize, usize),
    pub heads: HeadOutput,
    /// Per-layer, per-head encoder attention maps.
    pub encoder_attention: Vec<Vec<Var>>,
}

impl ModelOutput {
    pub fn prediction(&self, tape: &Tape) -> Prediction {
        self.heads.prediction(tape)
    }
}

impl Matr {
    /// Builds a freshly initialised model; `seed` drives Xavier initialisation.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder {
            store: &mut store,
            rng: &mut rng,
        };
        let (d, hidden) = (config.d, config.d * config.ffn_mult);
        let projection = Projection {
            first: pb.linear("proj.0", config.input_dim, d)?,
            first_norm: pb.layer_norm("proj.0.norm", d)?,
            second: pb.linear("proj.1", d, d)?,
            second_norm: pb.layer_norm("proj.1.norm", d)?,
        };
        let mut encoder = Vec::with_capacity(config.k);
        for i in 0..config.k {
            let p = format!("enc.{i}");
            encoder.push(EncoderLayer {
                attn: pb.attention(&format!("{p}.attn"), d, config.heads)?,
                attn_norm: pb.layer_norm(&format!("{p}.attn.norm"), d)?,
                ffn: pb.feed_forward(&format!("{p}.ffn"), d, hidden)?,
                ffn_norm: pb.layer_norm(&format!("{p}.ffn.norm"), d)?,
            });
        }
        let mut decoder = Vec::with_capacity(config.k);
        for i in 0..config.k {
            let p = format!("dec.{i}");
            decoder.push(DecoderLayer {
                self_attn: pb.attention(&format!("{p}.self"), d, config.heads)?,
                self_norm: pb.layer_norm(&format!("{p}.self.norm"), d)?,
                cross_attn: pb.attention(&format!("{p}.cross"), d, config.heads)?,
                cross_norm: pb.layer_norm(&format!("{p}.cross.norm"), d)?,
                ffn: pb.feed_forward(&format!("{p}.ffn"), d, hidden)?,
                ffn_norm: pb.layer_norm(&format!("{p}.ffn.norm"), d)?,
            });
        }
        let queries = pb.weight("dec.queries", &[config.l, d])?;
        let heads = PredictionHeads::build(&mut pb, d)?;
        Ok(Matr {
            config,
            params: store,
            projection,
            encoder,
            decoder,
            queries,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn queries_id(&self) -> ParamId {
        self.queries
    }

    /// Maps `[L, input_dim]` features to `[L, d]`.
    pub fn project(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let width = tape.shape(x)[1];
        if width != self.config.input_dim {
            return Err(MatrError::shape(
                "project",
                format!("features have {width} columns, model expects {}", self.config.input_dim),
            ));
        }
        let p = self.config.dropout_projection;
        let pr = &self.projection;
        let h = pr.first.forward(tape, x)?;
        let h = pr.first_norm.forward(tape, h)?;
        let h = tape.relu(h);
        let h = tape.dropout(h, p)?;
        let h = pr.second.forward(tape, h)?;
        let h = pr.second_norm.forward(tape, h)?;
        tape.dropout(h, p)
    }

    /// Joint encoder over `[E_t; E_q]`. Returns the target part, the query
    /// part and every attention map. Positions continue from `M` into the
    /// query segment.
    pub fn encode(&self, tape: &mut Tape, et: Var, eq: Var) -> Result<(Var, Var, Vec<Vec<Var>>)> {
        let (m, n) = (tape.shape(et)[0], tape.shape(eq)[0]);
        let d = self.config.d;
        let pdrop = self.config.dropout_transformer;
        let joint = tape.concat(&[et, eq], 0)?;
        let pos = tape.constant(positional_encoding(m + n, d));
        let mut x = tape.add(joint, pos)?;
        let mut maps = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let qk = tape.add(x, pos)?;
            let att = layer.attn.forward(tape, qk, qk, x)?;
            maps.push(att.weights);
            let a = tape.dropout(att.out, pdrop)?;
            let r = tape.add(x, a)?;
            x = layer.attn_norm.forward(tape, r)?;
            let f = layer.ffn.forward(tape, x, pdrop)?;
            let f = tape.dropout(f, pdrop)?;
            let r = tape.add(x, f)?;
            x = layer.ffn_norm.forward(tape, r)?;
        }
        let t = tape.slice_rows(x, 0, m)?;
        let q = tape.slice_rows(x, m, m + n)?;
        Ok((t, q, maps))
    }

    /// Refines the learnable queries against encoder rows `span.0..=span.1`.
    /// An out-of-range span falls back to the whole target.
    pub fn decode(&self, tape: &mut Tape, etg: Var, span: (usize, usize)) -> Result<Var> {
        let m = tape.shape(etg)[0];
        let (s, e) = if span.0 <= span.1 && span.1 < m { span } else { (0, m - 1) };
        let d = self.config.d;
        let pdrop = self.config.dropout_transformer;
        let memory = tape.slice_rows(etg, s, e + 1)?;
        let mem_pos = tape.constant(positional_rows(s, e + 1 - s, d));
        let mem_keys = tape.add(memory, mem_pos)?;
        let query_pos = tape.constant(positional_encoding(self.config.l, d));
        let mut x = tape.param(self.queries);
        for layer in &self.decoder {
            let qk = tape.add(x, query_pos)?;
            let att = layer.self_attn.forward(tape, qk, qk, x)?;
            let a = tape.dropout(att.out, pdrop)?;
            let r = tape.add(x, a)?;
            x = layer.self_norm.forward(tape, r)?;

            let q = tape.add(x, query_pos)?;
            let att = layer.cross_attn.forward(tape, q, mem_keys, memory)?;
            let a = tape.dropout(att.out, pdrop)?;
            let r = tape.add(x, a)?;
            x = layer.cross_norm.forward(tape, r)?;

            let f = layer.ffn.forward(tape, x, pdrop)?;
            let f = tape.dropout(f, pdrop)?;
            let r = tape.add(x, f)?;
            x = layer.ffn_norm.forward(tape, r)?;
        }
        Ok(x)
    }

    pub fn heads(&self) -> &PredictionHeads {
        &self.heads
    }

    /// Full forward pass over raw `[M, input_dim]` target and `[N, input_dim]`
    /// query features. The tape's mode selects train/eval behaviour.
    pub fn forward(
        &self,
        tape: &mut Tape,
        target: &crate::autodiff::Array,
        query: &crate::autodiff::Array,
    ) -> Result<ModelOutput> {
        if !std::ptr::eq(tape.params(), &self.params) {
            return Err(MatrError::InvalidArgument(
                "tape was created over a different parameter store".into(),
            ));
        }
        let (gamma, mode) = (self.config.gamma, self.config.align_mode);
        let m = target.rows();
        let t = tape.constant(target.clone());
        let q = tape.constant(query.clone());
        let et = self.project(tape, t)?;
        let eq = self.project(tape, q)?;

        let pre_cost = tape.cosine_cost(et, eq)?;
        let (pre_align_loss, _) = alignment::soft_dtw_var(tape, pre_cost, gamma, mode)?;
        let pre_align = alignment::align(&CostMatrix::new(tape.value(pre_cost).clone())?, gamma, mode)?;

        let (etg, eqg, encoder_attention) = self.encode(tape, et, eq)?;

        let post_cost = tape.cosine_cost(etg, eqg)?;
        let (post_align_loss, _) = alignment::soft_dtw_var(tape, post_cost, gamma, mode)?;
        let post_align = alignment::align(&CostMatrix::new(tape.value(post_cost).clone())?, gamma, mode)?;
        let span = post_align.span.unwrap_or((0, m - 1));

        let etl = self.decode(tape, etg, span)?;
        let fused = tape.concat(&[etg, etl], 0)?;
        let heads = self.heads.forward(tape, fused, m)?;
        Ok(ModelOutput {
            m,
            projected_target: et,
            projected_query: eq,
            encoder_target: etg,
            encoder_query: eqg,
            decoder_out: etl,
            fused,
            pre_align_loss,
            post_align_loss,
            pre_align,
            post_align,
            span,
            heads,
            encoder_attention,
        })
    }

    /// Evaluation-mode forward returning the decoded per-position prediction.
    pub fn predict(&self, target: &crate::autodiff::Array, query: &crate::autodiff::Array) -> Result<Prediction> {
        let mut tape = Tape::eval(&self.params);
        let out = self.forward(&mut tape, target, query)?;
        Ok(out.prediction(&tape))
    }

    /// Replaces all weights, checking names and shapes.
    pub fn load_params(&mut self, other: &ParamStore) -> Result<()> {
        self.params.load_from(other)
    }
}
