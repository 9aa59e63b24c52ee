//! Parameterized building blocks shared by the backbone and the adapter.

use super::params::{Bound, Group, ParamId, ParameterStore};
use crate::error::Result;
use crate::numerics::{Initializer, Mask, Tape, Tensor, Var};

/// Registers parameters under a common name prefix and group.
pub struct Builder<'a> {
    pub store: &'a mut ParameterStore,
    pub init: &'a mut Initializer,
    pub group: Group,
    pub prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(
        store: &'a mut ParameterStore,
        init: &'a mut Initializer,
        group: Group,
        prefix: &str,
    ) -> Self {
        Builder {
            store,
            init,
            group,
            prefix: prefix.to_string(),
        }
    }

    pub fn scoped(&mut self, group: Group, prefix: &str) -> Builder<'_> {
        Builder {
            store: self.store,
            init: self.init,
            group,
            prefix: prefix.to_string(),
        }
    }

    fn name(&self, local: &str) -> String {
        format!("{}.{local}", self.prefix)
    }

    pub fn weight(&mut self, local: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let t = self.init.fan_in(shape, fan_in);
        self.store.add(&self.name(local), self.group, t)
    }

    pub fn uniform(&mut self, local: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let t = self.init.uniform(shape, bound);
        self.store.add(&self.name(local), self.group, t)
    }

    pub fn constant(&mut self, local: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store.add(&self.name(local), self.group, Tensor::full(shape, value))
    }

    pub fn buffer(&mut self, local: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store
            .add_buffer(&self.name(local), self.group, Tensor::full(shape, value))
    }

    pub fn linear(&mut self, local: &str, d_in: usize, d_out: usize) -> Result<Linear> {
        Ok(Linear {
            w: self.weight(&format!("{local}.w"), &[d_in, d_out], d_in)?,
            b: self.weight(&format!("{local}.b"), &[d_out], d_in)?,
        })
    }

    pub fn zero_linear(&mut self, local: &str, d_in: usize, d_out: usize) -> Result<Linear> {
        Ok(Linear {
            w: self.constant(&format!("{local}.w"), &[d_in, d_out], 0.0)?,
            b: self.constant(&format!("{local}.b"), &[d_out], 0.0)?,
        })
    }

    pub fn conv1d(&mut self, local: &str, k: usize, c_in: usize, c_out: usize) -> Result<Conv1d> {
        Ok(Conv1d {
            w: self.weight(&format!("{local}.w"), &[k, c_in, c_out], k * c_in)?,
            b: self.weight(&format!("{local}.b"), &[c_out], k * c_in)?,
        })
    }

    pub fn layer_norm(&mut self, local: &str, c: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gamma: self.constant(&format!("{local}.gamma"), &[c], 1.0)?,
            beta: self.constant(&format!("{local}.beta"), &[c], 0.0)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.w), p.var(self.b))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv1d {
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv1d(x, p.var(self.w))?;
        tape.add_bias(y, p.var(self.b))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gamma), p.var(self.beta))
    }
}

/// Self-attention and a two-layer convolution, each wrapped in a residual
/// connection followed by layer normalization.
#[derive(Clone, Debug)]
pub struct FftBlock {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln_attn: LayerNorm,
    conv1: Conv1d,
    conv2: Conv1d,
    ln_conv: LayerNorm,
    heads: usize,
    dropout: f64,
}

impl FftBlock {
    pub fn build(
        b: &mut Builder<'_>,
        local: &str,
        hidden: usize,
        filters: usize,
        kernel: usize,
        heads: usize,
        dropout: f64,
    ) -> Result<Self> {
        Ok(FftBlock {
            q: b.linear(&format!("{local}.q"), hidden, hidden)?,
            k: b.linear(&format!("{local}.k"), hidden, hidden)?,
            v: b.linear(&format!("{local}.v"), hidden, hidden)?,
            o: b.linear(&format!("{local}.o"), hidden, hidden)?,
            ln_attn: b.layer_norm(&format!("{local}.ln_attn"), hidden)?,
            conv1: b.conv1d(&format!("{local}.conv1"), kernel, hidden, filters)?,
            conv2: b.conv1d(&format!("{local}.conv2"), kernel, filters, hidden)?,
            ln_conv: b.layer_norm(&format!("{local}.ln_conv"), hidden)?,
            heads,
            dropout,
        })
    }

    /// `x[B, L, H]` with padded rows already zero.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, mask: &Mask) -> Result<Var> {
        let q = self.q.forward(tape, p, x)?;
        let k = self.k.forward(tape, p, x)?;
        let v = self.v.forward(tape, p, x)?;
        let a = tape.attention(q, k, v, self.heads, Some(mask))?;
        let a = self.o.forward(tape, p, a)?;
        let a = tape.dropout(a, self.dropout)?;
        let h = tape.add(x, a)?;
        let h = self.ln_attn.forward(tape, p, h)?;
        let h = tape.mask_rows(h, mask)?;

        let c = self.conv1.forward(tape, p, h)?;
        let c = tape.relu(c)?;
        let c = tape.mask_rows(c, mask)?;
        let c = self.conv2.forward(tape, p, c)?;
        let c = tape.dropout(c, self.dropout)?;
        let out = tape.add(h, c)?;
        let out = self.ln_conv.forward(tape, p, out)?;
        tape.mask_rows(out, mask)
    }
}

/// Two convolution layers with ReLU, layer normalization and dropout, then
/// a linear projection. Used for the variance predictors and the residual
/// encoders.
#[derive(Clone, Debug)]
pub struct ConvStack {
    conv1: Conv1d,
    ln1: LayerNorm,
    conv2: Conv1d,
    ln2: LayerNorm,
    pub out: Linear,
    dropout: f64,
}

impl ConvStack {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        b: &mut Builder<'_>,
        local: &str,
        d_in: usize,
        filters: usize,
        kernel: usize,
        d_out: usize,
        dropout: f64,
        zero_out: bool,
    ) -> Result<Self> {
        Ok(ConvStack {
            conv1: b.conv1d(&format!("{local}.conv1"), kernel, d_in, filters)?,
            ln1: b.layer_norm(&format!("{local}.ln1"), filters)?,
            conv2: b.conv1d(&format!("{local}.conv2"), kernel, filters, filters)?,
            ln2: b.layer_norm(&format!("{local}.ln2"), filters)?,
            out: if zero_out {
                b.zero_linear(&format!("{local}.out"), filters, d_out)?
            } else {
                b.linear(&format!("{local}.out"), filters, d_out)?
            },
            dropout,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, mask: &Mask) -> Result<Var> {
        let mut h = x;
        for (conv, ln) in [(&self.conv1, &self.ln1), (&self.conv2, &self.ln2)] {
            h = conv.forward(tape, p, h)?;
            h = tape.relu(h)?;
            h = ln.forward(tape, p, h)?;
            h = tape.dropout(h, self.dropout)?;
            h = tape.mask_rows(h, mask)?;
        }
        let y = self.out.forward(tape, p, h)?;
        tape.mask_rows(y, mask)
    }
}

/// Sinusoidal position table `[len, dim]`: even channels `sin`, odd `cos`.
pub fn positional_encoding(len: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for i in 0..dim {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 / rate;
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![len, dim], data).expect("positive extents")
}

/// Adds the positional table to `x[B, L, H]` and re-masks.
pub fn add_positions(tape: &mut Tape, x: Var, mask: &Mask) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let pe = positional_encoding(s[1], s[2]);
    let mut full = Vec::with_capacity(s[0] * pe.numel());
    for _ in 0..s[0] {
        full.extend_from_slice(pe.data());
    }
    let pe = tape.constant(Tensor::new(s, full)?);
    let y = tape.add(x, pe)?;
    tape.mask_rows(y, mask)
}
