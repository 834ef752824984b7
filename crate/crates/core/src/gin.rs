//! Intermolecular message passing across local frames.
//!
//! Every atom exchanges messages with every atom of every other molecule.
//! Equivariant messages are expressed in the source molecule's ambient
//! coordinates and carried into the target's by `Î = F_m R F_nᵀ`, where `F`
//! are the local frames and `R` is predicted from invariant pair features.
//! Because `R` only sees invariants, `Î` picks up exactly `R_m · R_nᵀ` when
//! the two molecules are rotated independently.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tensor, Var};
use crate::config::TransformVariant;
use crate::error::{Error, Result};
use crate::geometry::{transpose, Mat3};
use crate::nn::{Linear, Mlp, ParamStore, Scope};

/// Two-layer MLP on `[a_i, a_j, extra]` whose first layer is split into a
/// target projection, a source projection and an optional per-pair term.
/// Equal to applying one layer to the concatenation, without materializing
/// a `[pairs, 2·width]` input.
#[derive(Clone, Debug)]
pub struct PairMlp {
    pub target: Linear,
    pub source: Linear,
    pub extra: Option<Linear>,
    pub out: Linear,
}

impl PairMlp {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        atom_dim: usize,
        extra_dim: usize,
        hidden: usize,
        out_dim: usize,
    ) -> Self {
        // One fan-in for the whole first layer, as if it were a single matrix.
        let fan_in = 2 * atom_dim + extra_dim;
        let scale = |d: usize| (d as f64 / fan_in as f64).sqrt();
        Self {
            target: Linear::with_scale(store, rng, &format!("{name}.target"), atom_dim, hidden, true, scale(atom_dim)),
            source: Linear::with_scale(store, rng, &format!("{name}.source"), atom_dim, hidden, false, scale(atom_dim)),
            extra: (extra_dim > 0).then(|| {
                Linear::with_scale(store, rng, &format!("{name}.extra"), extra_dim, hidden, false, scale(extra_dim))
            }),
            out: Linear::new(store, rng, &format!("{name}.out"), hidden, out_dim, true),
        }
    }

    fn forward(&self, s: &mut Scope, atoms: Var, pairs: &PairIndex, extra: Option<Var>) -> Var {
        let a = self.target.forward(s, atoms);
        let b = self.source.forward(s, atoms);
        let a = s.gather(a, pairs.targets.clone());
        let b = s.gather(b, pairs.sources.clone());
        let mut pre = s.add(a, b);
        if let (Some(l), Some(x)) = (&self.extra, extra) {
            let e = l.forward(s, x);
            pre = s.add(pre, e);
        }
        let act = s.silu(pre);
        self.out.forward(s, act)
    }
}

/// All ordered atom pairs `(i, j)` with `i` and `j` in different molecules,
/// sorted by target then source.
#[derive(Clone, Debug)]
pub struct PairIndex {
    pub targets: Arc<[usize]>,
    pub sources: Arc<[usize]>,
    pub target_mol: Vec<usize>,
    pub source_mol: Vec<usize>,
    /// Molecule-pair id of each atom pair, `0..groups`.
    pub groups: Arc<[usize]>,
    pub num_groups: usize,
    /// `(target molecule, source molecule)` of each group.
    pub group_mols: Vec<(usize, usize)>,
    pub num_atoms: usize,
    /// `[N, 1]`, `1 / (N − N_m)` for each atom of molecule `m`.
    pub inv_partners: Tensor,
}

impl PairIndex {
    pub fn new(mol_of_atom: &[usize], atoms_per_mol: &[usize]) -> Self {
        let n = mol_of_atom.len();
        let m = atoms_per_mol.len();
        let mut group_id = vec![usize::MAX; m * m];
        let mut group_mols = Vec::new();
        let (mut targets, mut sources, mut target_mol, mut source_mol, mut groups) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for i in 0..n {
            for j in 0..n {
                let (mi, mj) = (mol_of_atom[i], mol_of_atom[j]);
                if mi == mj {
                    continue;
                }
                let key = mi * m + mj;
                if group_id[key] == usize::MAX {
                    group_id[key] = group_mols.len();
                    group_mols.push((mi, mj));
                }
                targets.push(i);
                sources.push(j);
                target_mol.push(mi);
                source_mol.push(mj);
                groups.push(group_id[key]);
            }
        }
        let inv = mol_of_atom
            .iter()
            .map(|&mi| {
                let partners = n - atoms_per_mol[mi];
                if partners == 0 {
                    0.0
                } else {
                    1.0 / partners as f64
                }
            })
            .collect();
        Self {
            targets: targets.into(),
            sources: sources.into(),
            target_mol,
            source_mol,
            groups: groups.into(),
            num_groups: group_mols.len(),
            group_mols,
            num_atoms: n,
            inv_partners: Tensor::new(vec![n, 1], inv).expect("one entry per atom"),
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct GinLayer {
    pub sigma_inv: PairMlp,
    pub sigma_rot: Mlp,
    pub sigma_t: Mlp,
    pub sigma_msg: PairMlp,
    pub sigma_x: Mlp,
    pub sigma_v: Mlp,
    pub sigma_h: Mlp,
    pub variant: TransformVariant,
}

#[derive(Clone, Debug)]
pub struct Gin {
    pub layers: Vec<GinLayer>,
    pub hidden: usize,
    pub channels: usize,
}

/// Per-pair quantities of one layer, kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct PairTrace {
    /// `[P, 3, 3]`
    pub ihat: Var,
    /// `[P, 1, 3]`
    pub tvec: Var,
    /// `[P, C, 3]`, message in the target frame.
    pub mvec: Var,
    /// `[P, H]`
    pub m: Var,
    /// `[P, 3, 3]` or `[G, 3, 3]` for graph-wise transforms.
    pub rot: Var,
}

/// Atom-level state carried through the layers.
#[derive(Clone, Copy, Debug)]
pub struct GinState {
    /// `[N, H]`
    pub h: Var,
    /// `[N, C, 3]`, unchanged by every layer.
    pub x: Var,
    /// `[N, C, 3]`
    pub v: Var,
}

fn rot_dim(v: TransformVariant) -> usize {
    match v {
        TransformVariant::Free | TransformVariant::Graphwise => 9,
        TransformVariant::Quaternion => 4,
        TransformVariant::Sixd => 6,
    }
}

fn rot_identity(v: TransformVariant) -> Vec<f64> {
    match v {
        TransformVariant::Free | TransformVariant::Graphwise => {
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]
        }
        TransformVariant::Quaternion => vec![1.0, 0.0, 0.0, 0.0],
        TransformVariant::Sixd => vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
    }
}

impl GinLayer {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        hidden: usize,
        channels: usize,
        variant: TransformVariant,
    ) -> Self {
        let atom_dim = hidden + 2 * channels;
        let sigma_inv = PairMlp::new(store, rng, &format!("{name}.inv"), atom_dim, 0, hidden, hidden);
        let sigma_rot = Mlp::new(store, rng, &format!("{name}.rot"), &[hidden, hidden, rot_dim(variant)], false);
        sigma_rot.shrink_last(store, 0.01);
        sigma_rot.last().set_bias(store, &rot_identity(variant));
        let sigma_t = Mlp::new(store, rng, &format!("{name}.t"), &[hidden, hidden, 3], false);
        sigma_t.shrink_last(store, 0.01);
        sigma_t.last().set_bias(store, &[0.0; 3]);
        let sigma_msg = PairMlp::new(store, rng, &format!("{name}.msg"), atom_dim, 1, hidden, hidden);
        let sigma_x = Mlp::new(store, rng, &format!("{name}.gx"), &[hidden, hidden, channels], false);
        let sigma_v = Mlp::new(store, rng, &format!("{name}.gv"), &[hidden, hidden, channels], false);
        let sigma_h = Mlp::new(store, rng, &format!("{name}.h"), &[2 * hidden, hidden, hidden], false);
        Self {
            sigma_inv,
            sigma_rot,
            sigma_t,
            sigma_msg,
            sigma_x,
            sigma_v,
            sigma_h,
            variant,
        }
    }

    /// `[h, ‖x‖ per channel, ‖v‖ per channel]`
    fn atom_invariants(s: &mut Scope, st: &GinState) -> Var {
        let n = s.shape(st.h)[0];
        let c = s.shape(st.x)[1];
        let xn = s.norm_last(st.x);
        let xn = s.reshape(xn, &[n, c]);
        let vn = s.norm_last(st.v);
        let vn = s.reshape(vn, &[n, c]);
        s.concat(&[st.h, xn, vn])
    }

    /// Raw σ_rot output to rotation-like `[rows, 3, 3]` matrices.
    fn rotation(&self, s: &mut Scope, raw: Var) -> Result<Var> {
        let rows = s.shape(raw)[0];
        match self.variant {
            TransformVariant::Free | TransformVariant::Graphwise => Ok(s.reshape(raw, &[rows, 3, 3])),
            TransformVariant::Quaternion => quaternion_rotation(s, raw),
            TransformVariant::Sixd => Ok(sixd_rotation(s, raw)),
        }
    }

    pub fn forward(
        &self,
        s: &mut Scope,
        st: GinState,
        pairs: &PairIndex,
        frames: &[Mat3],
    ) -> Result<(GinState, PairTrace)> {
        let p = pairs.len();
        let n = pairs.num_atoms;
        let c = s.shape(st.x)[1];
        let atoms = Self::atom_invariants(s, &st);

        let z = self.sigma_inv.forward(s, atoms, pairs, None);
        let (rot, t) = if self.variant == TransformVariant::Graphwise {
            let counts = group_inverse_counts(pairs);
            let zs = s.segment_sum(z, pairs.groups.clone(), pairs.num_groups);
            let inv = s.constant(counts);
            let zg = s.mul(zs, inv);
            let raw = self.sigma_rot.forward(s, zg);
            let rot = self.rotation(s, raw)?;
            let t = self.sigma_t.forward(s, zg);
            (rot, s.gather(t, pairs.groups.clone()))
        } else {
            let raw = self.sigma_rot.forward(s, z);
            (self.rotation(s, raw)?, self.sigma_t.forward(s, z))
        };
        let rot_pairs = if self.variant == TransformVariant::Graphwise {
            s.gather(rot, pairs.groups.clone())
        } else {
            rot
        };

        let (fm, fnt) = pair_frames(pairs, frames);
        let fm = s.constant(fm);
        let fnt = s.constant(fnt);
        let a = s.bmm(fm, rot_pairs);
        let ihat = s.bmm(a, fnt);
        let t3 = s.reshape(t, &[p, 3, 1]);
        let tvec = s.bmm(fm, t3);
        let tvec = s.reshape(tvec, &[p, 1, 3]);
        let tnorm = s.norm_last(t);

        let m = self.sigma_msg.forward(s, atoms, pairs, Some(tnorm));
        let gx = self.sigma_x.forward(s, m);
        let gx = s.reshape(gx, &[p, c, 1]);
        let gv = self.sigma_v.forward(s, m);
        let gv = s.reshape(gv, &[p, c, 1]);
        let xj = s.gather(st.x, pairs.sources.clone());
        let vj = s.gather(st.v, pairs.sources.clone());
        let ax = s.mul(gx, xj);
        let av = s.mul(gv, vj);
        let src = s.add(ax, av);
        let ihat_t = s.transpose(ihat);
        let moved = s.bmm(src, ihat_t);
        let mvec = s.add(moved, tvec);

        let inv = s.constant(pairs.inv_partners.clone());
        let mi = s.segment_sum(m, pairs.targets.clone(), n);
        let mi = s.mul(mi, inv);
        let inv3 = s.constant(pairs.inv_partners.reshape(&[n, 1, 1])?);
        let vi = s.segment_sum(mvec, pairs.targets.clone(), n);
        let vi = s.mul(vi, inv3);

        let hin = s.concat(&[st.h, mi]);
        let h = self.sigma_h.forward(s, hin);
        let v = s.add(st.v, vi);
        Ok((
            GinState { h, x: st.x, v },
            PairTrace {
                ihat,
                tvec,
                mvec,
                m,
                rot,
            },
        ))
    }
}

fn group_inverse_counts(pairs: &PairIndex) -> Tensor {
    let mut counts = vec![0usize; pairs.num_groups];
    for &g in pairs.groups.iter() {
        counts[g] += 1;
    }
    Tensor::new(
        vec![pairs.num_groups, 1],
        counts.iter().map(|&c| 1.0 / c as f64).collect(),
    )
    .expect("one count per group")
}

/// `F_m` and `F_nᵀ` for every pair, `[P, 3, 3]` each.
fn pair_frames(pairs: &PairIndex, frames: &[Mat3]) -> (Tensor, Tensor) {
    let p = pairs.len();
    let mut fm = Vec::with_capacity(p * 9);
    let mut fnt = Vec::with_capacity(p * 9);
    let frames_t: Vec<Mat3> = frames.iter().map(transpose).collect();
    for k in 0..p {
        fm.extend(frames[pairs.target_mol[k]].iter().flatten());
        fnt.extend(frames_t[pairs.source_mol[k]].iter().flatten());
    }
    (
        Tensor::new(vec![p, 3, 3], fm).expect("9 per pair"),
        Tensor::new(vec![p, 3, 3], fnt).expect("9 per pair"),
    )
}

pub const MIN_QUATERNION_NORM: f64 = 1e-12;

/// `[P, 4]` quaternions `(w, x, y, z)` to `[P, 3, 3]` rotation matrices.
pub fn quaternion_rotation(s: &mut Scope, raw: Var) -> Result<Var> {
    let p = s.shape(raw)[0];
    let norm = s.norm_last(raw);
    if let Some(&bad) = s.value(norm).data().iter().find(|&&v| !(v >= MIN_QUATERNION_NORM)) {
        return Err(Error::DegenerateRotation(bad));
    }
    let q = s.div(raw, norm);
    let [w, x, y, z] = [0, 1, 2, 3].map(|k| s.slice_last(q, k, 1));
    let prod = |a: Var, b: Var, s: &mut Scope| {
        let ab = s.mul(a, b);
        s.scale(ab, 2.0)
    };
    let (xx, yy, zz) = (prod(x, x, s), prod(y, y, s), prod(z, z, s));
    let (xy, xz, yz) = (prod(x, y, s), prod(x, z, s), prod(y, z, s));
    let (wx, wy, wz) = (prod(w, x, s), prod(w, y, s), prod(w, z, s));
    let one_minus = |a: Var, b: Var, s: &mut Scope| {
        let ab = s.add(a, b);
        let neg = s.scale(ab, -1.0);
        s.offset(neg, 1.0)
    };
    let r00 = one_minus(yy, zz, s);
    let r01 = s.sub(xy, wz);
    let r02 = s.add(xz, wy);
    let r10 = s.add(xy, wz);
    let r11 = one_minus(xx, zz, s);
    let r12 = s.sub(yz, wx);
    let r20 = s.sub(xz, wy);
    let r21 = s.add(yz, wx);
    let r22 = one_minus(xx, yy, s);
    let flat = s.concat(&[r00, r01, r02, r10, r11, r12, r20, r21, r22]);
    Ok(s.reshape(flat, &[p, 3, 3]))
}

fn cross_cols(s: &mut Scope, a: Var, b: Var) -> Var {
    let [a0, a1, a2] = [0, 1, 2].map(|k| s.slice_last(a, k, 1));
    let [b0, b1, b2] = [0, 1, 2].map(|k| s.slice_last(b, k, 1));
    let term = |p: Var, q: Var, r: Var, t: Var, s: &mut Scope| {
        let x = s.mul(p, q);
        let y = s.mul(r, t);
        s.sub(x, y)
    };
    let c0 = term(a1, b2, a2, b1, s);
    let c1 = term(a2, b0, a0, b2, s);
    let c2 = term(a0, b1, a1, b0, s);
    s.concat(&[c0, c1, c2])
}

/// `[P, 6]` to rotations whose first two columns are the Gram-Schmidt
/// orthonormalization of the two 3-vectors and whose third is their cross
/// product.
pub fn sixd_rotation(s: &mut Scope, raw: Var) -> Var {
    let p = s.shape(raw)[0];
    let a = s.slice_last(raw, 0, 3);
    let b = s.slice_last(raw, 3, 3);
    let na = s.norm_last(a);
    let e1 = s.div(a, na);
    let eb = s.mul(e1, b);
    let proj = s.sum_last(eb);
    let along = s.mul(e1, proj);
    let b2 = s.sub(b, along);
    let nb = s.norm_last(b2);
    let e2 = s.div(b2, nb);
    let e3 = cross_cols(s, e1, e2);
    // Rows of the concatenation are columns of R.
    let cols = s.concat(&[e1, e2, e3]);
    let cols = s.reshape(cols, &[p, 3, 3]);
    s.transpose(cols)
}

impl Gin {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        layers: usize,
        hidden: usize,
        channels: usize,
        variant: TransformVariant,
    ) -> Self {
        Self {
            layers: (0..layers)
                .map(|l| GinLayer::new(store, rng, &format!("{name}.layer{l}"), hidden, channels, variant))
                .collect(),
            hidden,
            channels,
        }
    }

    /// Runs every layer. With a single molecule there are no partners and
    /// the state passes through unchanged.
    pub fn forward(
        &self,
        s: &mut Scope,
        mut st: GinState,
        pairs: &PairIndex,
        frames: &[Mat3],
    ) -> Result<(GinState, Vec<PairTrace>)> {
        let mut traces = Vec::with_capacity(self.layers.len());
        if pairs.is_empty() {
            return Ok((st, traces));
        }
        for layer in &self.layers {
            let (next, trace) = layer.forward(s, st, pairs, frames)?;
            st = next;
            traces.push(trace);
        }
        Ok((st, traces))
    }
}
