//! Parameterised building blocks recorded onto a [`Tape`].

use rand::Rng;

use crate::autodiff::{xavier_init, Array, ParamId, ParamStore, Tape, Var};
use crate::error::Result;

/// Registers parameters with Xavier-initialised weights.
pub struct ParamBuilder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> ParamBuilder<'_, R> {
    pub fn weight(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let w = xavier_init(shape, self.rng)?;
        self.store.insert(name, w)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store.insert(name, Array::full(shape, value))
    }

    pub fn linear(&mut self, name: &str, input: usize, output: usize) -> Result<Linear> {
        Ok(Linear {
            w: self.weight(&format!("{name}.w"), &[input, output])?,
            b: self.constant(&format!("{name}.b"), &[output], 0.0)?,
        })
    }

    pub fn layer_norm(&mut self, name: &str, width: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gain: self.constant(&format!("{name}.gain"), &[width], 1.0)?,
            bias: self.constant(&format!("{name}.bias"), &[width], 0.0)?,
        })
    }

    pub fn conv(&mut self, name: &str, input: usize, output: usize) -> Result<Conv> {
        Ok(Conv {
            w: self.weight(&format!("{name}.w"), &[3, input, output])?,
            b: self.constant(&format!("{name}.b"), &[output], 0.0)?,
        })
    }

    pub fn attention(&mut self, name: &str, d: usize, heads: usize) -> Result<MultiHeadAttention> {
        Ok(MultiHeadAttention {
            q: self.linear(&format!("{name}.q"), d, d)?,
            k: self.linear(&format!("{name}.k"), d, d)?,
            v: self.linear(&format!("{name}.v"), d, d)?,
            out: self.linear(&format!("{name}.out"), d, d)?,
            heads,
        })
    }

    pub fn feed_forward(&mut self, name: &str, d: usize, hidden: usize) -> Result<FeedForward> {
        Ok(FeedForward {
            up: self.linear(&format!("{name}.up"), d, hidden)?,
            down: self.linear(&format!("{name}.down"), hidden, d)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// Width-3, same-length temporal convolution.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        tape.conv1d(x, w, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn forward(&self, tape: &mut Tape, x: Var, dropout: f64) -> Result<Var> {
        let h = self.up.forward(tape, x)?;
        let h = tape.relu(h);
        let h = tape.dropout(h, dropout)?;
        self.down.forward(tape, h)
    }
}

/// Scaled dot-product attention split over `heads` column groups.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

/// Output of [`MultiHeadAttention::forward`].
pub struct Attended {
    pub out: Var,
    /// Row-stochastic attention matrix of each head.
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn forward(&self, tape: &mut Tape, query: Var, key: Var, value: Var) -> Result<Attended> {
        let q = self.q.forward(tape, query)?;
        let k = self.k.forward(tape, key)?;
        let v = self.v.forward(tape, value)?;
        let d = tape.shape(q)[1];
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, c0, c1)?;
            let kh = tape.slice_cols(k, c0, c1)?;
            let vh = tape.slice_cols(v, c0, c1)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            outs.push(tape.matmul(attn, vh)?);
            weights.push(attn);
        }
        let cat = tape.concat(&outs, 1)?;
        let out = self.out.forward(tape, cat)?;
        Ok(Attended { out, weights })
    }
}

/// Sinusoidal table: `pe[p][2i] = sin(p / 10000^(2i/d))`, `pe[p][2i+1] = cos(..)`.
pub fn positional_encoding(length: usize, d: usize) -> Array {
    positional_rows(0, length, d)
}

/// Rows `start..start+length` of the sinusoidal table.
pub fn positional_rows(start: usize, length: usize, d: usize) -> Array {
    let mut data = Vec::with_capacity(length * d);
    for p in start..start + length {
        for c in 0..d {
            let i = (c / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * i / d as f64);
            data.push(if c % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Array::from_parts(vec![length, d], data)
}
