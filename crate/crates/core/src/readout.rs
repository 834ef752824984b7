//! Set readout: molecule embeddings in fixed slots, masked multi-head
//! self-attention without positional encoding, then a regression head.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tensor, Var};
use crate::config::ReadoutMode;
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp, ParamStore, Scope};

#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ffn: Mlp,
}

#[derive(Clone, Debug)]
pub struct Readout {
    pub mode: ReadoutMode,
    pub layers: Vec<AttentionLayer>,
    pub head: Mlp,
    pub heads: usize,
    pub capacity: usize,
    pub temperature: f64,
    pub dropout: f64,
    pub hidden: usize,
}

pub struct ReadoutSettings {
    pub mode: ReadoutMode,
    pub hidden: usize,
    pub env_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub capacity: usize,
    pub temperature: f64,
    pub dropout: f64,
    pub head_layers: usize,
}

impl AttentionLayer {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize) -> Self {
        Self {
            query: Linear::new(store, rng, &format!("{name}.q"), d, d, false),
            key: Linear::new(store, rng, &format!("{name}.k"), d, d, false),
            value: Linear::new(store, rng, &format!("{name}.v"), d, d, false),
            out: Linear::new(store, rng, &format!("{name}.o"), d, d, true),
            ffn: Mlp::new(store, rng, &format!("{name}.ffn"), &[d, d, d], false),
        }
    }

    /// `slots: [S, d]`. Masked keys get zero weight; outputs of masked
    /// queries are computed but never read.
    fn forward(
        &self,
        s: &mut Scope,
        slots: Var,
        mask: &Arc<[bool]>,
        heads: usize,
        temperature: f64,
        dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Var {
        let d = s.shape(slots)[1];
        let n_slots = s.shape(slots)[0];
        let dh = d / heads;
        let q = self.query.forward(s, slots);
        let k = self.key.forward(s, slots);
        let v = self.value.forward(s, slots);
        let scale = 1.0 / ((dh as f64).sqrt() * temperature);
        let mut drop = dropout;
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = s.slice_last(q, hd * dh, dh);
            let kh = s.slice_last(k, hd * dh, dh);
            let vh = s.slice_last(v, hd * dh, dh);
            let kt = s.transpose(kh);
            let logits = s.matmul(qh, kt);
            let logits = s.scale(logits, scale);
            let mut attn = s.softmax_last(logits, Some(mask.clone()));
            if let Some((p, rng)) = drop.as_mut() {
                let keep = 1.0 - *p;
                let m: Vec<f64> = (0..n_slots * n_slots)
                    .map(|_| if rng.gen::<f64>() < *p { 0.0 } else { 1.0 / keep })
                    .collect();
                let m = s.constant(Tensor::new(vec![n_slots, n_slots], m).expect("square mask"));
                attn = s.mul(attn, m);
            }
            // The inner index runs over molecules.
            outs.push(s.matmul_exact(attn, vh));
        }
        let cat = s.concat(&outs);
        let o = self.out.forward(s, cat);
        let x = s.add(slots, o);
        let f = self.ffn.forward(s, x);
        s.add(x, f)
    }
}

impl Readout {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ReadoutSettings) -> Self {
        let layers = match cfg.mode {
            ReadoutMode::Attention => (0..cfg.layers)
                .map(|l| AttentionLayer::new(store, rng, &format!("{name}.attn{l}"), cfg.hidden))
                .collect(),
            ReadoutMode::Linear => Vec::new(),
        };
        let mut dims = vec![cfg.hidden + cfg.env_dim];
        dims.extend(std::iter::repeat(cfg.hidden).take(cfg.head_layers - 1));
        dims.push(1);
        let head = Mlp::new(store, rng, &format!("{name}.head"), &dims, false);
        Self {
            mode: cfg.mode,
            layers,
            head,
            heads: cfg.heads,
            capacity: cfg.capacity,
            temperature: cfg.temperature,
            dropout: cfg.dropout,
            hidden: cfg.hidden,
        }
    }

    /// Pools `[M, d]` molecule embeddings into one `[1, d]` system embedding.
    pub fn pool(&self, s: &mut Scope, mols: Var, mut dropout_rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let m = s.shape(mols)[0];
        if m > self.capacity {
            return Err(Error::Capacity {
                molecules: m,
                capacity: self.capacity,
            });
        }
        let inv_m = 1.0 / m as f64;
        match self.mode {
            ReadoutMode::Linear => {
                let sum = s.segment_sum(mols, vec![0; m].into(), 1);
                Ok(s.scale(sum, inv_m))
            }
            ReadoutMode::Attention => {
                let place: Arc<[usize]> = (0..m).collect();
                let mut slots = s.segment_sum(mols, place, self.capacity);
                let mask: Arc<[bool]> = (0..self.capacity).map(|k| k < m).collect();
                for layer in &self.layers {
                    let drop = match (&mut dropout_rng, self.dropout > 0.0) {
                        (Some(r), true) => Some((self.dropout, &mut **r)),
                        _ => None,
                    };
                    slots = layer.forward(s, slots, &mask, self.heads, self.temperature, drop);
                }
                let real: Arc<[usize]> = (0..self.capacity).map(|k| if k < m { 0 } else { 1 }).collect();
                let sums = s.segment_sum(slots, real, 2);
                let first = s.gather(sums, vec![0].into());
                Ok(s.scale(first, inv_m))
            }
        }
    }

    /// Head on `[pooled, env]`, `[1, 1]` in normalized target units.
    pub fn predict(&self, s: &mut Scope, pooled: Var, env: Var) -> Var {
        let x = s.concat(&[pooled, env]);
        self.head.forward(s, x)
    }
}
