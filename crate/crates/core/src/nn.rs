//! Transformer building blocks shared by both models.

use cadenza_tensor::{Graph, ParamId, ParamStore, Result, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const LN_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        std: f32,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w: store.add_normal(format!("{name}.w"), &[din, dout], std, rng)?,
            b: Some(store.add_zeros(format!("{name}.b"), &[1, dout])?),
            din,
            dout,
        })
    }

    pub fn without_bias<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        std: f32,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w: store.add_normal(format!("{name}.w"), &[din, dout], std, rng)?,
            b: None,
            din,
            dout,
        })
    }

    pub fn zeros(store: &mut ParamStore, name: &str, din: usize, dout: usize) -> Result<Self> {
        Ok(Self {
            w: store.add_zeros(format!("{name}.w"), &[din, dout])?,
            b: Some(store.add_zeros(format!("{name}.b"), &[1, dout])?),
            din,
            dout,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.linear(x, w, b)
            }
            None => g.matmul(x, w),
        }
    }

    /// `out = x W + b` for one row, outside any graph.
    pub fn apply(&self, store: &ParamStore, x: &[f32], out: &mut [f32]) {
        let w = store.value(self.w).data();
        match self.b {
            Some(b) => out.copy_from_slice(store.value(b).data()),
            None => out.fill(0.0),
        }
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &w[i * self.dout..(i + 1) * self.dout];
            for (o, &wv) in out.iter_mut().zip(row) {
                *o += xi * wv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add_ones(format!("{name}.gamma"), &[1, d])?,
            beta: store.add_zeros(format!("{name}.beta"), &[1, d])?,
        })
    }

    /// With `shift`, `(dgamma, dbeta)` are added to the learned scale and bias.
    pub fn forward(&self, g: &mut Graph, x: Var, shift: Option<(Var, Var)>) -> Result<Var> {
        let (mut gamma, mut beta) = (g.param(self.gamma), g.param(self.beta));
        if let Some((dg, db)) = shift {
            gamma = g.add(gamma, dg)?;
            beta = g.add(beta, db)?;
        }
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Row layer norm outside any graph.
pub fn layer_norm_row(x: &[f32], gamma: &[f32], beta: &[f32], out: &mut [f32]) {
    let d = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / d;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d;
    let rs = 1.0 / (var + LN_EPS as f64).sqrt();
    for i in 0..x.len() {
        out[i] = ((x[i] as f64 - mean) * rs) as f32 * gamma[i] + beta[i];
    }
}

pub fn gelu(v: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    0.5 * v * (1.0 + (C * (v + 0.044_715 * v * v * v)).tanh())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockShape {
    pub d_model: usize,
    pub heads: usize,
    pub ff_mult: usize,
}

/// Pre-norm transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub heads: usize,
}

impl Block {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        shape: BlockShape,
        layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let d = shape.d_model;
        let f = d * shape.ff_mult;
        let std = (1.0 / d as f32).sqrt();
        let out_std = std / (2.0 * layers as f32).sqrt();
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d)?,
            q: Linear::new(store, &format!("{name}.q"), d, d, std, rng)?,
            // a key bias only adds a per-query constant to the scores
            k: Linear::without_bias(store, &format!("{name}.k"), d, d, std, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, std, rng)?,
            o: Linear::new(store, &format!("{name}.o"), d, d, out_std, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), d, f, std, rng)?,
            ff2: Linear::new(
                store,
                &format!("{name}.ff2"),
                f,
                d,
                (1.0 / f as f32).sqrt() / (2.0 * layers as f32).sqrt(),
                rng,
            )?,
            heads: shape.heads,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        causal: bool,
        dropout: f32,
        shifts: [Option<(Var, Var)>; 2],
    ) -> Result<Var> {
        let h = self.ln1.forward(g, x, shifts[0])?;
        let (q, k, v) = (
            self.q.forward(g, h)?,
            self.k.forward(g, h)?,
            self.v.forward(g, h)?,
        );
        let a = g.attention(q, k, v, self.heads, causal)?;
        let a = self.o.forward(g, a)?;
        let a = g.dropout(a, dropout);
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x, shifts[1])?;
        let h = self.ff1.forward(g, h)?;
        let h = g.gelu(h);
        let h = self.ff2.forward(g, h)?;
        let h = g.dropout(h, dropout);
        g.add(x, h)
    }
}
