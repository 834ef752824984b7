//! Double-loop evaluation of one interaction layer in plain `f64`.

use geomix::config::TransformVariant;
use geomix::geometry::{mat_mul, mat_vec, quaternion_to_matrix, transpose, Mat3};
use geomix::gin::{GinLayer, PairMlp};
use geomix::nn::{linear_reference, mlp_reference, silu, ParamStore};

pub struct OracleOut {
    /// `[N][H]`
    pub h: Vec<Vec<f64>>,
    /// `[N][C][3]`
    pub v: Vec<Vec<[f64; 3]>>,
}

/// First layer of a pair MLP as one matrix acting on `[a_i, a_j, extra]`.
fn pair_mlp(store: &ParamStore, pm: &PairMlp, ai: &[f64], aj: &[f64], extra: &[f64]) -> Vec<f64> {
    let mut input = ai.to_vec();
    input.extend_from_slice(aj);
    input.extend_from_slice(extra);
    let mut blocks = vec![&pm.target, &pm.source];
    if let Some(e) = &pm.extra {
        blocks.push(e);
    }
    let hidden = pm.target.fan_out;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for l in &blocks {
        let w = store.get(l.weight);
        for r in 0..l.fan_in {
            rows.push((0..hidden).map(|c| w.at2(r, c)).collect());
        }
    }
    assert_eq!(rows.len(), input.len());
    let bias = store.get(pm.target.bias.unwrap()).data();
    let mut pre = bias.to_vec();
    for (k, x) in input.iter().enumerate() {
        for c in 0..hidden {
            pre[c] += x * rows[k][c];
        }
    }
    let act: Vec<f64> = pre.into_iter().map(silu).collect();
    linear_reference(store, &pm.out, &act)
}

fn norm3(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn rotation(layer: &GinLayer, raw: &[f64]) -> Mat3 {
    match layer.variant {
        TransformVariant::Free | TransformVariant::Graphwise => {
            [[raw[0], raw[1], raw[2]], [raw[3], raw[4], raw[5]], [raw[6], raw[7], raw[8]]]
        }
        TransformVariant::Quaternion => {
            let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            quaternion_to_matrix([raw[0] / n, raw[1] / n, raw[2] / n, raw[3] / n])
        }
        TransformVariant::Sixd => unimplemented!("not covered by the oracle"),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn gin_layer_oracle(
    store: &ParamStore,
    layer: &GinLayer,
    mol_of_atom: &[usize],
    h: &[Vec<f64>],
    x: &[Vec<[f64; 3]>],
    v: &[Vec<[f64; 3]>],
    frames: &[Mat3],
) -> OracleOut {
    let n = h.len();
    let c = x[0].len();
    let atoms: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut a = h[i].clone();
            a.extend(x[i].iter().map(norm3));
            a.extend(v[i].iter().map(norm3));
            a
        })
        .collect();
    let z = |i: usize, j: usize| pair_mlp(store, &layer.sigma_inv, &atoms[i], &atoms[j], &[]);
    // Graph-wise transforms read the mean invariant of the molecule pair.
    let transform_input = |i: usize, j: usize| -> Vec<f64> {
        if layer.variant != TransformVariant::Graphwise {
            return z(i, j);
        }
        let (mi, mj) = (mol_of_atom[i], mol_of_atom[j]);
        let mut acc = vec![0.0; h[0].len()];
        let mut count = 0.0;
        for a in (0..n).filter(|&a| mol_of_atom[a] == mi) {
            for b in (0..n).filter(|&b| mol_of_atom[b] == mj) {
                for (s, zv) in acc.iter_mut().zip(z(a, b)) {
                    *s += zv;
                }
                count += 1.0;
            }
        }
        acc.iter().map(|s| s / count).collect()
    };

    let hidden = h[0].len();
    let mut h_out = Vec::with_capacity(n);
    let mut v_out = Vec::with_capacity(n);
    for i in 0..n {
        let mi = mol_of_atom[i];
        let partners: Vec<usize> = (0..n).filter(|&j| mol_of_atom[j] != mi).collect();
        let mut msum = vec![0.0; hidden];
        let mut vsum = vec![[0.0; 3]; c];
        for &j in &partners {
            let zin = transform_input(i, j);
            let r = rotation(layer, &mlp_reference(store, &layer.sigma_rot, &zin));
            let t = mlp_reference(store, &layer.sigma_t, &zin);
            let fm = frames[mi];
            let ihat = mat_mul(&mat_mul(&fm, &r), &transpose(&frames[mol_of_atom[j]]));
            let tvec = mat_vec(&fm, &[t[0], t[1], t[2]]);
            let tn = norm3(&[t[0], t[1], t[2]]);
            let m = pair_mlp(store, &layer.sigma_msg, &atoms[i], &atoms[j], &[tn]);
            let gx = mlp_reference(store, &layer.sigma_x, &m);
            let gv = mlp_reference(store, &layer.sigma_v, &m);
            for (s, mv) in msum.iter_mut().zip(&m) {
                *s += mv;
            }
            for ch in 0..c {
                let src = [0, 1, 2].map(|d| gx[ch] * x[j][ch][d] + gv[ch] * v[j][ch][d]);
                let moved = mat_vec(&ihat, &src);
                for d in 0..3 {
                    vsum[ch][d] += moved[d] + tvec[d];
                }
            }
        }
        let denom = partners.len() as f64;
        let mi_vec: Vec<f64> = msum.iter().map(|s| s / denom).collect();
        let mut hin = h[i].clone();
        hin.extend(mi_vec);
        h_out.push(mlp_reference(store, &layer.sigma_h, &hin));
        v_out.push((0..c).map(|ch| [0, 1, 2].map(|d| v[i][ch][d] + vsum[ch][d] / denom)).collect());
    }
    OracleOut { h: h_out, v: v_out }
}
