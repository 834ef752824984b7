//! Intramolecular encoder: a multi-channel E(n)-equivariant graph network.
//!
//! Coordinates are carried as `[N, C, 3]`: `C` copies of each atom's position
//! that are updated independently and then mixed by a learned `C × C` matrix,
//! which commutes with rotations because it never touches the spatial axis.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tensor, Var};
use crate::dataset::GeometricGraph;
use crate::nn::{Linear, Mlp, ParamId, ParamStore, Scope};

#[derive(Clone, Debug)]
pub struct EgnnLayer {
    /// `[h_i, h_j, d²_ij per channel, edge length] -> m_ij`
    pub phi_e: Mlp,
    /// `m_ij -> one coordinate weight per channel`
    pub phi_x: Mlp,
    /// `[h_i, Σ_j m_ij] -> h_i'`
    pub phi_h: Mlp,
    /// `[C, C]`, starts at the identity.
    pub mix: ParamId,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub embed: Linear,
    pub layers: Vec<EgnnLayer>,
    pub hidden: usize,
    pub channels: usize,
}

/// Edge structure of one molecule in tape-ready form.
pub struct EdgeIndex {
    pub targets: Arc<[usize]>,
    pub sources: Arc<[usize]>,
    /// `[E, 1]`
    pub lengths: Tensor,
    /// `[N, 1, 1]`, 1 / max(1, in-degree)
    pub inv_degree: Tensor,
}

impl EdgeIndex {
    pub fn new(g: &GeometricGraph) -> Self {
        let n = g.num_atoms();
        let mut deg = vec![0usize; n];
        for &(i, _) in &g.edges {
            deg[i] += 1;
        }
        Self {
            targets: g.edges.iter().map(|e| e.0).collect(),
            sources: g.edges.iter().map(|e| e.1).collect(),
            lengths: Tensor::new(vec![g.edges.len(), 1], g.edge_weights.clone()).expect("one weight per edge"),
            inv_degree: Tensor::new(
                vec![n, 1, 1],
                deg.iter().map(|&d| 1.0 / d.max(1) as f64).collect(),
            )
            .expect("one degree per atom"),
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

pub struct EncoderOutput {
    /// `[N, H]`
    pub h: Var,
    /// `[N, C, 3]`
    pub x: Var,
    /// `[N, 3]`, channel mean of `x`.
    pub x_denoise: Var,
}

impl EgnnLayer {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, hidden: usize, channels: usize) -> Self {
        let phi_e = Mlp::new(store, rng, &format!("{name}.phi_e"), &[2 * hidden + channels + 1, hidden, hidden], true);
        let phi_x = Mlp::new(store, rng, &format!("{name}.phi_x"), &[hidden, hidden, channels], false);
        // Small coordinate steps at initialization.
        phi_x.shrink_last(store, 0.1);
        let phi_h = Mlp::new(store, rng, &format!("{name}.phi_h"), &[2 * hidden, hidden, hidden], false);
        let mut eye = Tensor::zeros(&[channels, channels]);
        for c in 0..channels {
            eye.data_mut()[c * channels + c] = 1.0;
        }
        let mix = store.add(format!("{name}.mix"), eye);
        Self {
            phi_e,
            phi_x,
            phi_h,
            mix,
        }
    }

    pub fn forward(&self, s: &mut Scope, h: Var, x: Var, edges: &EdgeIndex) -> (Var, Var) {
        let n = s.shape(h)[0];
        let hidden = s.shape(h)[1];
        let channels = s.shape(x)[1];
        if edges.is_empty() {
            let zeros = s.constant(Tensor::zeros(&[n, hidden]));
            let inp = s.concat(&[h, zeros]);
            return (self.phi_h.forward(s, inp), x);
        }
        let e = edges.len();
        let hi = s.gather(h, edges.targets.clone());
        let hj = s.gather(h, edges.sources.clone());
        let xi = s.gather(x, edges.targets.clone());
        let xj = s.gather(x, edges.sources.clone());
        let diff = s.sub(xi, xj);
        let sq = s.square(diff);
        let d2 = s.sum_last(sq);
        let d2 = s.reshape(d2, &[e, channels]);
        let len = s.constant(edges.lengths.clone());
        let inp = s.concat(&[hi, hj, d2, len]);
        let m = self.phi_e.forward(s, inp);

        let gate = self.phi_x.forward(s, m);
        let gate = s.reshape(gate, &[e, channels, 1]);
        let upd = s.mul(diff, gate);
        let agg = s.segment_sum(upd, edges.targets.clone(), n);
        let inv_deg = s.constant(edges.inv_degree.clone());
        let agg = s.mul(agg, inv_deg);
        let agg = s.transpose(agg);
        let agg = s.reshape(agg, &[n * 3, channels]);
        let mix = s.param(self.mix);
        let mixed = s.matmul(agg, mix);
        let mixed = s.reshape(mixed, &[n, 3, channels]);
        let mixed = s.transpose(mixed);
        let x_new = s.add(x, mixed);

        let msum = s.segment_sum(m, edges.targets.clone(), n);
        let inp = s.concat(&[h, msum]);
        (self.phi_h.forward(s, inp), x_new)
    }
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
        layers: usize,
        channels: usize,
    ) -> Self {
        let embed = Linear::new(store, rng, &format!("{name}.embed"), in_dim, hidden, true);
        let layers = (0..layers)
            .map(|l| EgnnLayer::new(store, rng, &format!("{name}.layer{l}"), hidden, channels))
            .collect();
        Self {
            embed,
            layers,
            hidden,
            channels,
        }
    }

    /// `h0: [N, F]` node scalars, `x0: [N, 3]` input coordinates.
    pub fn forward(&self, s: &mut Scope, h0: Var, x0: Var, edges: &EdgeIndex) -> EncoderOutput {
        let n = s.shape(h0)[0];
        let mut h = self.embed.forward(s, h0);
        let x3 = s.reshape(x0, &[n, 1, 3]);
        let lift = s.constant(Tensor::zeros(&[1, self.channels, 3]));
        let mut x = s.add(x3, lift);
        for layer in &self.layers {
            (h, x) = layer.forward(s, h, x, edges);
        }
        let xt = s.transpose(x);
        let xs = s.sum_last(xt);
        let xs = s.reshape(xs, &[n, 3]);
        let x_denoise = s.scale(xs, 1.0 / self.channels as f64);
        EncoderOutput { h, x, x_denoise }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_geometric_graph, Atom, Role};
    use crate::geometry::{mat_vec, random_rotation};
    use rand::SeedableRng;

    fn setup(n_atoms: usize) -> (ParamStore, Encoder, GeometricGraph) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut rng, "enc", 4, 8, 2, 4);
        let atoms: Vec<Atom> = crate::synthetic::random_molecule_atoms(&mut rng, n_atoms)
            .into_iter()
            .map(|mut a| {
                a.type_index %= 3;
                a
            })
            .collect();
        let g = build_geometric_graph("m", &atoms, 0.5, Role::Solvent, 6.0).unwrap();
        (store, enc, g)
    }

    fn run(store: &ParamStore, enc: &Encoder, g: &GeometricGraph) -> (Tensor, Tensor, Tensor) {
        let mut s = Scope::new(store, false);
        let h0 = s.constant(g.node_scalars(3, false).unwrap());
        let x0 = s.constant(Tensor::from_rows(&g.coords).unwrap());
        let out = enc.forward(&mut s, h0, x0, &EdgeIndex::new(g));
        (
            s.value(out.h).clone(),
            s.value(out.x).clone(),
            s.value(out.x_denoise).clone(),
        )
    }

    #[test]
    fn rotation_equivariant() {
        let (store, enc, g) = setup(7);
        let (h, x, _) = run(&store, &enc, &g);
        let r = random_rotation(&mut ChaCha8Rng::seed_from_u64(9));
        let rot = g.with_coords(g.coords.iter().map(|p| mat_vec(&r, p)).collect());
        let (h2, x2, _) = run(&store, &enc, &rot);
        assert!(h.max_abs_diff(&h2) <= 1e-10 * h.max_abs().max(1.0));
        let want: Vec<f64> = x
            .data()
            .chunks(3)
            .flat_map(|p| mat_vec(&r, &[p[0], p[1], p[2]]))
            .collect();
        let err = x2.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn node_permutation_is_exact() {
        let (store, enc, g) = setup(9);
        let (h, x, xd) = run(&store, &enc, &g);
        let perm = [3, 0, 8, 1, 7, 2, 6, 4, 5];
        let (h2, x2, xd2) = run(&store, &enc, &g.permute_nodes(&perm));
        for (k, &p) in perm.iter().enumerate() {
            assert_eq!(h2.row(k), h.row(p));
            assert_eq!(x2.row(k), x.row(p));
            assert_eq!(xd2.row(k), xd.row(p));
        }
    }

    #[test]
    fn isolated_atoms_keep_coordinates() {
        let (store, enc, _) = setup(2);
        let atoms = [
            Atom { z: 6, type_index: 1, xyz: [0.0, 0.0, 0.0] },
            Atom { z: 8, type_index: 2, xyz: [9.0, 1.0, -2.0] },
        ];
        let g = build_geometric_graph("far", &atoms, 0.5, Role::Salt, 6.0).unwrap();
        assert!(g.edges.is_empty());
        let (_, _, xd) = run(&store, &enc, &g);
        assert_eq!(xd, Tensor::from_rows(&g.coords).unwrap());
    }
}
