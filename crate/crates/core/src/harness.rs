//! Numeric certification of the model's symmetry contract: invariance of
//! the scalar output and covariance of atom vectors under per-molecule node
//! permutations, per-molecule rigid motions and molecule reordering, plus
//! covariance of the cross-frame transforms inside the interaction layers.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::Tensor;
use crate::dataset::{build_geometric_graph, Atom, GeometricGraph, MixtureSystem};
use crate::error::{Error, Result};
use crate::frames::{construct_frame_with_diagnostics, is_well_conditioned, FrameMode};
use crate::geometry::{det, mat_mul, mat_vec, random_rotation, transpose, Mat3, IDENTITY};
use crate::model::{atom_layout, Inputs, Model};
use crate::nn::Scope;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    NodePerm,
    Rotation,
    GraphPerm,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::NodePerm, Mode::Rotation, Mode::GraphPerm];

    /// Rotations tolerate round-off; permutations must be exact.
    pub fn default_tolerance(self) -> f64 {
        match self {
            Mode::Rotation => 1e-8,
            Mode::NodePerm | Mode::GraphPerm => 0.0,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::NodePerm => "node-perm",
            Mode::Rotation => "rotation",
            Mode::GraphPerm => "graph-perm",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "node-perm" => Ok(Mode::NodePerm),
            "rotation" => Ok(Mode::Rotation),
            "graph-perm" => Ok(Mode::GraphPerm),
            other => Err(Error::Config(format!("unknown verification mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub mode: String,
    pub trials: usize,
    pub max_abs_dev: f64,
    pub max_rel_dev: f64,
    pub excluded_systems: Vec<String>,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CovarianceReport {
    pub mode: String,
    pub trials: usize,
    pub skipped_improper: usize,
    pub max_abs_dev: f64,
    pub max_rel_dev: f64,
    pub excluded_systems: Vec<String>,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

fn within(dev: f64, tol: f64) -> bool {
    dev == 0.0 || dev < tol
}

/// Values read back from one forward pass.
struct Eval {
    y: f64,
    /// `[N, C, 3]`, empty for the baseline.
    v: Option<Tensor>,
    /// Per interaction layer: `ihat [P,3,3]`, `tvec [P,1,3]`, `mvec [P,C,3]`.
    traces: Vec<[Tensor; 3]>,
}

fn evaluate(model: &Model, sys: &MixtureSystem) -> Result<Eval> {
    let mut s = Scope::new(&model.params, false);
    let f = model.forward(&mut s, &Inputs { system: sys, coords: None }, None)?;
    s.check()?;
    Ok(Eval {
        y: model.denormalize(s.value(f.y_norm).data()[0]),
        v: f.v.map(|v| s.value(v).clone()),
        traces: f
            .traces
            .iter()
            .map(|t| [s.value(t.ihat).clone(), s.value(t.tvec).clone(), s.value(t.mvec).clone()])
            .collect(),
    })
}

/// Whether every molecule of `sys` has a frame that rotates with its atoms.
pub fn frames_well_conditioned(sys: &MixtureSystem) -> bool {
    sys.graphs
        .iter()
        .all(|g| is_well_conditioned(&construct_frame_with_diagnostics(&g.coords, FrameMode::Strict).1))
}

/// Rigid motion `x ↦ R x + t` of one molecule. The graph is rebuilt from
/// the moved atoms, so it is re-centered; the edge list is kept when a
/// cutoff comparison flips under round-off.
pub fn move_molecule(g: &GeometricGraph, r: &Mat3, t: [f64; 3], cutoff: f64) -> Result<GeometricGraph> {
    let atoms: Vec<Atom> = g
        .atoms()
        .into_iter()
        .map(|mut a| {
            let p = mat_vec(r, &a.xyz);
            a.xyz = [p[0] + t[0], p[1] + t[1], p[2] + t[2]];
            a
        })
        .collect();
    let mut moved = build_geometric_graph(g.name.clone(), &atoms, g.w, g.role, cutoff)?;
    if moved.edges != g.edges {
        moved.edges = g.edges.clone();
        moved.edge_weights = g.edge_weights.clone();
    }
    Ok(moved)
}

fn with_graphs(sys: &MixtureSystem, graphs: Vec<GeometricGraph>) -> MixtureSystem {
    MixtureSystem {
        graphs,
        ..sys.clone()
    }
}

/// Deviation accumulator: absolute, and relative to the reference scale.
#[derive(Clone, Copy, Default)]
struct Dev {
    abs: f64,
    rel: f64,
}

impl Dev {
    fn add(&mut self, abs: f64, scale: f64) {
        self.abs = self.abs.max(abs);
        self.rel = self.rel.max(if scale > 0.0 { abs / scale } else { abs });
    }

    fn merge(self, o: Dev) -> Dev {
        Dev {
            abs: self.abs.max(o.abs),
            rel: self.rel.max(o.rel),
        }
    }
}

/// Scalar output deviation, relative to `max(|y|, 1)`.
fn scalar_dev(a: f64, b: f64) -> Dev {
    let mut d = Dev::default();
    d.add((a - b).abs(), a.abs().max(1.0));
    d
}

/// Compares `v'[k] == R_k v[src(k)]` row-block by row-block.
fn vector_dev(reference: &Tensor, moved: &Tensor, map: impl Fn(usize) -> (usize, Option<Mat3>)) -> Dev {
    let c3 = reference.numel() / reference.shape()[0];
    let scale = reference.max_abs();
    let mut d = Dev::default();
    for k in 0..reference.shape()[0] {
        let (src, rot) = map(k);
        let a = &reference.data()[src * c3..(src + 1) * c3];
        let b = &moved.data()[k * c3..(k + 1) * c3];
        for (va, vb) in a.chunks(3).zip(b.chunks(3)) {
            let expect = match &rot {
                Some(r) => mat_vec(r, &[va[0], va[1], va[2]]),
                None => [va[0], va[1], va[2]],
            };
            for dd in 0..3 {
                d.add((expect[dd] - vb[dd]).abs(), scale);
            }
        }
    }
    d
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64 + 1);
    rng
}

fn random_translation(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [0, 1, 2].map(|_| rng.gen_range(-10.0..10.0))
}

fn run_trial(model: &Model, sys: &MixtureSystem, reference: &Eval, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Dev> {
    let (mol_of_atom, sizes) = atom_layout(&sys.graphs);
    let mut offsets = vec![0; sizes.len()];
    for k in 1..sizes.len() {
        offsets[k] = offsets[k - 1] + sizes[k - 1];
    }
    match mode {
        Mode::NodePerm => {
            let perms: Vec<Vec<usize>> = sizes
                .iter()
                .map(|&n| {
                    let mut p: Vec<usize> = (0..n).collect();
                    p.shuffle(rng);
                    p
                })
                .collect();
            let graphs = sys.graphs.iter().zip(&perms).map(|(g, p)| g.permute_nodes(p)).collect();
            let out = evaluate(model, &with_graphs(sys, graphs))?;
            let mut d = scalar_dev(reference.y, out.y);
            if let (Some(a), Some(b)) = (&reference.v, &out.v) {
                d = d.merge(vector_dev(a, b, |k| {
                    let m = mol_of_atom[k];
                    (offsets[m] + perms[m][k - offsets[m]], None)
                }));
            }
            Ok(d)
        }
        Mode::GraphPerm => {
            let mut sigma: Vec<usize> = (0..sizes.len()).collect();
            sigma.shuffle(rng);
            let graphs = sigma.iter().map(|&k| sys.graphs[k].clone()).collect();
            let out = evaluate(model, &with_graphs(sys, graphs))?;
            let mut d = scalar_dev(reference.y, out.y);
            if let (Some(a), Some(b)) = (&reference.v, &out.v) {
                let mut src = Vec::with_capacity(mol_of_atom.len());
                for &m in &sigma {
                    src.extend(offsets[m]..offsets[m] + sizes[m]);
                }
                d = d.merge(vector_dev(a, b, |k| (src[k], None)));
            }
            Ok(d)
        }
        Mode::Rotation => {
            let rots: Vec<Mat3> = sizes.iter().map(|_| random_rotation(rng)).collect();
            let graphs = sys
                .graphs
                .iter()
                .zip(&rots)
                .map(|(g, r)| move_molecule(g, r, random_translation(rng), model.config.cutoff))
                .collect::<Result<Vec<_>>>()?;
            let out = evaluate(model, &with_graphs(sys, graphs))?;
            let mut d = scalar_dev(reference.y, out.y);
            if let (Some(a), Some(b)) = (&reference.v, &out.v) {
                d = d.merge(vector_dev(a, b, |k| (k, Some(rots[mol_of_atom[k]]))));
            }
            Ok(d)
        }
    }
}

/// Certifies one symmetry on a set of systems. Trials are spread
/// round-robin over the eligible systems; in rotation mode systems with an
/// ill-conditioned strict frame are excluded and listed.
pub fn certify(model: &Model, systems: &[MixtureSystem], mode: Mode, trials: usize, tol: f64, seed: u64) -> Result<Report> {
    let mut excluded = Vec::new();
    let mut eligible = Vec::new();
    for s in systems {
        if mode == Mode::Rotation && !frames_well_conditioned(s) {
            excluded.push(s.id.clone());
        } else {
            eligible.push(s);
        }
    }
    let mut note = None;
    if mode == Mode::Rotation && model.config.frame_mode != FrameMode::Strict {
        note = Some(format!(
            "frame mode {:?} is not strictly rotation-equivariant; deviations are expected",
            model.config.frame_mode
        ));
    }
    if eligible.is_empty() || trials == 0 {
        return Ok(Report {
            mode: mode.to_string(),
            trials: 0,
            max_abs_dev: 0.0,
            max_rel_dev: 0.0,
            excluded_systems: excluded,
            pass: false,
            note: Some("no eligible systems or trials; nothing certified".into()),
        });
    }
    let references = eligible
        .par_iter()
        .map(|s| evaluate(model, s))
        .collect::<Result<Vec<_>>>()?;
    let devs = (0..trials)
        .into_par_iter()
        .map(|t| {
            let k = t % eligible.len();
            run_trial(model, eligible[k], &references[k], mode, &mut trial_rng(seed, t))
        })
        .collect::<Result<Vec<_>>>()?;
    let d = devs.into_iter().fold(Dev::default(), Dev::merge);
    Ok(Report {
        mode: mode.to_string(),
        trials,
        max_abs_dev: d.abs,
        max_rel_dev: d.rel,
        excluded_systems: excluded,
        pass: within(d.rel, tol),
        note,
    })
}

/// Certifies one symmetry on a single system.
pub fn check_set_se3(model: &Model, system: &MixtureSystem, mode: Mode, trials: usize, tol: f64) -> Result<Report> {
    certify(model, std::slice::from_ref(system), mode, trials, tol, 0)
}

/// Compares every interaction-layer trace after moving molecule `k` by
/// `rots[k]`: `Î ↦ R_m Î R_nᵀ`, `t⃗ ↦ R_m t⃗`, `m⃗ ↦ R_m m⃗` for a pair with
/// target molecule `m` and source molecule `n`. Returns `None` when any
/// rotation is improper, since the contract only covers SO(3).
pub fn transform_covariance_deviation(model: &Model, sys: &MixtureSystem, rots: &[Mat3]) -> Result<Option<(f64, f64)>> {
    if rots.len() != sys.graphs.len() {
        return Err(Error::Contract(format!(
            "{} rotations for {} molecules",
            rots.len(),
            sys.graphs.len()
        )));
    }
    if rots.iter().any(|r| det(r) < 0.0) {
        return Ok(None);
    }
    let reference = evaluate(model, sys)?;
    let graphs = sys
        .graphs
        .iter()
        .zip(rots)
        .map(|(g, r)| move_molecule(g, r, [0.0; 3], model.config.cutoff))
        .collect::<Result<Vec<_>>>()?;
    let moved = evaluate(model, &with_graphs(sys, graphs))?;
    Ok(Some(trace_deviation(sys, &reference, &moved, rots)))
}

fn trace_deviation(sys: &MixtureSystem, a: &Eval, b: &Eval, rots: &[Mat3]) -> (f64, f64) {
    let (mol_of_atom, sizes) = atom_layout(&sys.graphs);
    let pairs = crate::gin::PairIndex::new(&mol_of_atom, &sizes);
    let mut d = Dev::default();
    for (ta, tb) in a.traces.iter().zip(&b.traces) {
        let [ihat_a, tvec_a, mvec_a] = ta;
        let [ihat_b, tvec_b, mvec_b] = tb;
        let (si, st, sm) = (ihat_a.max_abs(), tvec_a.max_abs(), mvec_a.max_abs());
        let c = mvec_a.shape()[1];
        for p in 0..pairs.target_mol.len() {
            let rm = &rots[pairs.target_mol[p]];
            let rn = &rots[pairs.source_mol[p]];
            let ia = mat_at(ihat_a, p);
            let expect = mat_mul(&mat_mul(rm, &ia), &transpose(rn));
            let ib = mat_at(ihat_b, p);
            for r in 0..3 {
                for q in 0..3 {
                    d.add((expect[r][q] - ib[r][q]).abs(), si);
                }
            }
            let rows = |t: &Tensor, k: usize, n: usize| t.data()[(p * n + k) * 3..(p * n + k) * 3 + 3].to_vec();
            let cmp = |d: &mut Dev, ra: Vec<f64>, rb: Vec<f64>, scale: f64| {
                let e = mat_vec(rm, &[ra[0], ra[1], ra[2]]);
                for k in 0..3 {
                    d.add((e[k] - rb[k]).abs(), scale);
                }
            };
            cmp(&mut d, rows(tvec_a, 0, 1), rows(tvec_b, 0, 1), st);
            for k in 0..c {
                cmp(&mut d, rows(mvec_a, k, c), rows(mvec_b, k, c), sm);
            }
        }
    }
    (d.abs, d.rel)
}

fn mat_at(t: &Tensor, p: usize) -> Mat3 {
    let s = &t.data()[p * 9..p * 9 + 9];
    [[s[0], s[1], s[2]], [s[3], s[4], s[5]], [s[6], s[7], s[8]]]
}

/// Random-rotation version of [`transform_covariance_deviation`] over
/// `trials` independent draws, spread over the eligible systems.
pub fn check_transform_covariance(
    model: &Model,
    systems: &[MixtureSystem],
    trials: usize,
    tol: f64,
    seed: u64,
) -> Result<CovarianceReport> {
    check_transform_covariance_with(model, systems, trials, tol, |rng, m| {
        (0..m).map(|_| random_rotation(rng)).collect()
    }, seed)
}

/// Like [`check_transform_covariance`] with a caller-supplied rotation
/// sampler; improper draws are counted and skipped.
pub fn check_transform_covariance_with(
    model: &Model,
    systems: &[MixtureSystem],
    trials: usize,
    tol: f64,
    sample: impl Fn(&mut ChaCha8Rng, usize) -> Vec<Mat3> + Sync,
    seed: u64,
) -> Result<CovarianceReport> {
    let mut excluded = Vec::new();
    let mut eligible = Vec::new();
    for s in systems {
        if s.graphs.len() < 2 || !frames_well_conditioned(s) {
            excluded.push(s.id.clone());
        } else {
            eligible.push(s);
        }
    }
    let mut note = None;
    if model.config.gin_layers == 0 {
        note = Some("model has no interaction layers; nothing to compare".into());
    }
    if eligible.is_empty() || trials == 0 {
        return Ok(CovarianceReport {
            mode: "transform-covariance".into(),
            trials: 0,
            skipped_improper: 0,
            max_abs_dev: 0.0,
            max_rel_dev: 0.0,
            excluded_systems: excluded,
            pass: false,
            note: Some("no eligible systems or trials; nothing certified".into()),
        });
    }
    let results = (0..trials)
        .into_par_iter()
        .map(|t| {
            let sys = eligible[t % eligible.len()];
            let rots = sample(&mut trial_rng(seed, t), sys.graphs.len());
            transform_covariance_deviation(model, sys, &rots)
        })
        .collect::<Result<Vec<_>>>()?;
    let skipped = results.iter().filter(|r| r.is_none()).count();
    let d = results
        .into_iter()
        .flatten()
        .fold(Dev::default(), |acc, (abs, rel)| acc.merge(Dev { abs, rel }));
    let checked = trials - skipped;
    Ok(CovarianceReport {
        mode: "transform-covariance".into(),
        trials: checked,
        skipped_improper: skipped,
        max_abs_dev: d.abs,
        max_rel_dev: d.rel,
        excluded_systems: excluded,
        pass: checked > 0 && model.config.gin_layers > 0 && within(d.rel, tol),
        note,
    })
}

/// Identity rotations for `m` molecules.
pub fn identity_rotations(m: usize) -> Vec<Mat3> {
    vec![IDENTITY; m]
}
