//! Parameter storage and the dense layers everything else is made of.

use std::ops::{Deref, DerefMut};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// All parameter values concatenated in store order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Contract(format!(
                "expected {} parameter values, got {}",
                self.num_scalars(),
                flat.len()
            )));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Replaces values with those of `other`, which must have the same
    /// names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Checkpoint(format!(
                "parameter layout mismatch: expected {} tensors, found {}",
                self.len(),
                other.len()
            )));
        }
        for ((name, dst), src) in self.names.iter().zip(&mut self.tensors).zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            if !src.is_finite() {
                return Err(Error::Checkpoint(format!("parameter `{name}` is not finite")));
            }
            *dst = src.clone();
        }
        Ok(())
    }
}

/// A tape plus a lazy binding of store parameters to tape leaves.
pub struct Scope<'a> {
    tape: Tape,
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> Scope<'a> {
    /// `trainable = false` binds parameters as constants, so no gradients
    /// are tracked.
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            vars: vec![None; store.len()],
            trainable,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = self.tape.leaf(t, self.trainable);
        self.vars[id.0] = Some(v);
        v
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// One gradient per store entry; unused parameters get zeros.
    pub fn param_gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.store
            .tensors()
            .iter()
            .zip(&self.vars)
            .map(|(t, v)| {
                v.and_then(|v| grads.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    }
}

impl Deref for Scope<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Scope<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// `y = x W + b`, `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Uniform(±1/√fan_in) for weights and bias.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        Self::with_scale(store, rng, name, fan_in, fan_out, bias, 1.0)
    }

    pub fn with_scale(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        scale: f64,
    ) -> Self {
        let bound = scale / (fan_in.max(1) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[fan_in, fan_out], bound));
        let bias = bias.then(|| store.add(format!("{name}.bias"), uniform(rng, &[fan_out], bound)));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    /// Sets the bias to a fixed vector (e.g. an identity transform).
    pub fn set_bias(&self, store: &mut ParamStore, values: &[f64]) {
        let id = self.bias.expect("layer has a bias");
        store.get_mut(id).data_mut().copy_from_slice(values);
    }

    pub fn forward(&self, s: &mut Scope, x: Var) -> Var {
        let w = self.param_weight(s);
        let y = s.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = s.param(b);
                s.add(y, b)
            }
            None => y,
        }
    }

    fn param_weight(&self, s: &mut Scope) -> Var {
        s.param(self.weight)
    }
}

/// Linear layers with SiLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub final_activation: bool,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dims: &[usize],
        final_activation: bool,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1], true))
            .collect();
        Self {
            layers,
            final_activation,
        }
    }

    pub fn forward(&self, s: &mut Scope, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(s, h);
            if i < last || self.final_activation {
                h = s.silu(h);
            }
        }
        h
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().unwrap()
    }

    /// Scales the last layer's weights, e.g. to start near a fixed output.
    pub fn shrink_last(&self, store: &mut ParamStore, factor: f64) {
        for v in store.get_mut(self.last().weight).data_mut() {
            *v *= factor;
        }
    }
}

/// Plain-`f64` reference evaluation of an [`Mlp`] on one input row.
pub fn mlp_reference(store: &ParamStore, mlp: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let last = mlp.layers.len() - 1;
    for (li, l) in mlp.layers.iter().enumerate() {
        h = linear_reference(store, l, &h);
        if li < last || mlp.final_activation {
            h.iter_mut().for_each(|v| *v = silu(*v));
        }
    }
    h
}

pub fn linear_reference(store: &ParamStore, l: &Linear, x: &[f64]) -> Vec<f64> {
    let w = store.get(l.weight);
    let mut out = vec![0.0; l.fan_out];
    for (o, out_v) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (i, xv) in x.iter().enumerate() {
            acc += xv * w.at2(i, o);
        }
        if let Some(b) = l.bias {
            acc += store.get(b).data()[o];
        }
        *out_v = acc;
    }
    out
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck_expr;
    use rand::SeedableRng;

    #[test]
    fn unused_parameters_get_zero_gradients() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Linear::new(&mut store, &mut rng, "a", 2, 2, true);
        let _b = Linear::new(&mut store, &mut rng, "b", 2, 2, true);
        let mut s = Scope::new(&store, true);
        let x = s.constant(Tensor::from_rows(&[[1.0, 2.0]]).unwrap());
        let y = a.forward(&mut s, x);
        let l = s.sum(y);
        let g = s.backward(l).unwrap();
        let grads = s.param_gradients(&g);
        assert_eq!(grads.len(), 4);
        assert_eq!(grads[1].data(), &[1.0, 1.0]);
        assert!(grads[2].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mlp_matches_reference() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&mut store, &mut rng, "m", &[3, 5, 2], false);
        let x = [0.3, -0.7, 1.1];
        let mut s = Scope::new(&store, false);
        let xv = s.constant(Tensor::from_rows(&[x]).unwrap());
        let y = mlp.forward(&mut s, xv);
        let want = mlp_reference(&store, &mlp, &x);
        for (a, b) in s.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn two_layer_mlp_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w1 = uniform(&mut rng, &[3, 4], 1.0);
        let b1 = uniform(&mut rng, &[4], 1.0);
        let w2 = uniform(&mut rng, &[4, 1], 1.0);
        let x = uniform(&mut rng, &[5, 3], 1.0);
        let rep = gradcheck_expr(
            &[w1, b1, w2, x],
            |t, v| {
                let h = t.matmul(v[3], v[0]);
                let h = t.add(h, v[1]);
                let h = t.tanh(h);
                let y = t.matmul(h, v[2]);
                let y = t.square(y);
                t.sum(y)
            },
            crate::autodiff::FD_STEP,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "{rep:?}");
    }

    #[test]
    fn flat_round_trip() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        Mlp::new(&mut store, &mut rng, "m", &[2, 3, 1], false);
        let flat = store.flatten();
        let mut other = store.clone();
        other.assign_flat(&vec![0.0; flat.len()]).unwrap();
        other.assign_flat(&flat).unwrap();
        assert_eq!(other, store);
        assert!(other.assign_flat(&[1.0]).is_err());
    }
}
