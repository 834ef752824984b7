#![allow(dead_code)]

pub mod gin_oracle;

use geomix::autodiff::{finite_difference_gradcheck, GradcheckReport, FD_STEP};
use geomix::config::Config;
use geomix::dataset::{MixtureSystem, Normalizer};
use geomix::synthetic::random_system;
use geomix::Model;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Hidden width 8, every module present.
pub fn reduced_config() -> Config {
    Config {
        hidden_dim: 8,
        channels: 2,
        encoder_layers: 2,
        gin_layers: 2,
        attention_heads: 2,
        attention_layers: 1,
        head_layers: 2,
        gamma: 128.0,
        noise_sigma: 0.3,
        ..Config::default()
    }
}

pub fn two_molecule_system(seed: u64) -> MixtureSystem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_system(&mut rng, 2, 4..=5)
}

/// Analytic gradient and per-coordinate central differences of the full
/// training loss over every parameter, with the coordinate noise frozen.
pub struct FullLossCheck {
    pub loss: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl FullLossCheck {
    pub fn rel_err(&self, i: usize) -> f64 {
        (self.analytic[i] - self.numeric[i]).abs() / (self.analytic[i].abs() + 1e-8)
    }

    pub fn max_rel_err(&self) -> f64 {
        (0..self.analytic.len()).map(|i| self.rel_err(i)).fold(0.0, f64::max)
    }

    /// Smallest gradient a central difference can resolve: the loss' unit
    /// in the last place spread over the stencil width.
    pub fn resolution(&self) -> f64 {
        self.loss.abs() * f64::EPSILON / (2.0 * FD_STEP)
    }
}

pub fn full_loss_check(cfg: &Config, sys: &MixtureSystem, noise_seed: u64) -> FullLossCheck {
    let normalizer = Normalizer::fit(std::iter::once(sys), false);
    let model = Model::new(cfg, normalizer, vec![]).unwrap();
    let (sigma, gamma) = cfg.noise();
    let rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let (parts, grads) = model
        .loss_and_gradients(sys, Some((sigma, &mut rng.clone())), gamma)
        .unwrap();
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().iter().copied()).collect();
    let point = model.params.flatten();
    let mut probe = model.clone();
    let mut x = point.clone();
    let mut f = |x: &[f64]| {
        probe.params.assign_flat(x).unwrap();
        probe.loss_value(sys, Some((sigma, &mut rng.clone())), gamma).unwrap().total
    };
    let numeric = (0..point.len())
        .map(|i| {
            x[i] = point[i] + FD_STEP;
            let fp = f(&x);
            x[i] = point[i] - FD_STEP;
            let fm = f(&x);
            x[i] = point[i];
            (fp - fm) / (2.0 * FD_STEP)
        })
        .collect();
    FullLossCheck {
        loss: parts.total,
        analytic,
        numeric,
    }
}

/// Library gradcheck of the full loss; same stencil, single report.
pub fn gradcheck_full_loss(cfg: &Config, sys: &MixtureSystem, noise_seed: u64) -> GradcheckReport {
    let model = Model::new(cfg, Normalizer::fit(std::iter::once(sys), false), vec![]).unwrap();
    let (sigma, gamma) = cfg.noise();
    let rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let (_, grads) = model
        .loss_and_gradients(sys, Some((sigma, &mut rng.clone())), gamma)
        .unwrap();
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().iter().copied()).collect();
    let point = model.params.flatten();
    let mut probe = model.clone();
    finite_difference_gradcheck(
        |x| {
            probe.params.assign_flat(x)?;
            Ok(probe.loss_value(sys, Some((sigma, &mut rng.clone())), gamma)?.total)
        },
        &point,
        &analytic,
        FD_STEP,
    )
    .unwrap()
}

/// Closed-form eigenvalues of a symmetric 3×3 matrix from the roots of its
/// characteristic cubic (trigonometric form), descending.
pub fn cubic_eigenvalues(a: &[[f64; 3]; 3]) -> [f64; 3] {
    let p1 = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
    let q = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
    if p1 == 0.0 {
        let mut d = [a[0][0], a[1][1], a[2][2]];
        d.sort_by(|x, y| y.total_cmp(x));
        return d;
    }
    let p2 = (a[0][0] - q).powi(2) + (a[1][1] - q).powi(2) + (a[2][2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let mut b = *a;
    for (i, row) in b.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - if i == j { q } else { 0.0 }) / p;
        }
    }
    let det = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1]) - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
        + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
    let r = (det / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    [e1, 3.0 * q - e1 - e3, e3]
}

/// Anisotropic Gaussian cloud, centered.
pub fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let scale = [2.0, 1.2, 0.6];
    let pts: Vec<[f64; 3]> = (0..n)
        .map(|_| [0, 1, 2].map(|d| scale[d] * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let c = geomix::dataset::centroid(&pts);
    pts.iter().map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]]).collect()
}

/// Worst deviations over `count` random symmetric matrices and point clouds.
#[derive(Debug, Default)]
pub struct EigenStats {
    pub reconstruction: f64,
    pub eigenvalue: f64,
    pub det: f64,
    pub orthogonality: f64,
    pub equivariance: f64,
    pub equivariance_cases: usize,
}

pub fn eigen_frame_suite(count: usize, seed: u64) -> EigenStats {
    use geomix::frames::{construct_frame, construct_frame_with_diagnostics, eig_sym3, is_well_conditioned, FrameMode};
    use geomix::geometry::{det, frobenius_diff, mat_mul, orthogonality_error, random_rotation, rotate_points, transpose};
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut st = EigenStats::default();
    for _ in 0..count {
        let mut a = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in i..3 {
                let v = rng.gen_range(-1.0..1.0);
                a[i][j] = v;
                a[j][i] = v;
            }
        }
        let (vals, vecs) = eig_sym3(&a).unwrap();
        let lam = [[vals[0], 0.0, 0.0], [0.0, vals[1], 0.0], [0.0, 0.0, vals[2]]];
        let back = mat_mul(&mat_mul(&vecs, &lam), &transpose(&vecs));
        st.reconstruction = st.reconstruction.max(frobenius_diff(&back, &a));
        let oracle = cubic_eigenvalues(&a);
        for k in 0..3 {
            st.eigenvalue = st.eigenvalue.max((vals[k] - oracle[k]).abs());
        }

        let n = rng.gen_range(3..=15);
        let pts = random_cloud(&mut rng, n);
        for mode in [FrameMode::Strict, FrameMode::Standard, FrameMode::EntrySum] {
            let f = construct_frame(&pts, mode).basis;
            st.det = st.det.max((det(&f) - 1.0).abs());
            st.orthogonality = st.orthogonality.max(orthogonality_error(&f));
        }
        let (frame, diag) = construct_frame_with_diagnostics(&pts, FrameMode::Strict);
        if is_well_conditioned(&diag) {
            let r = random_rotation(&mut rng);
            let moved = construct_frame(&rotate_points(&r, &pts), FrameMode::Strict).basis;
            st.equivariance = st.equivariance.max(frobenius_diff(&moved, &mat_mul(&r, &frame.basis)));
            st.equivariance_cases += 1;
        }
    }
    // Degenerate clouds: collinear, planar-isotropic, single point.
    for pts in [
        vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [-2.0, 0.0, 0.0]],
        vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, -1.0, 0.0]],
        vec![[0.0, 0.0, 0.0]],
    ] {
        for mode in [FrameMode::Strict, FrameMode::Standard, FrameMode::EntrySum] {
            let f = construct_frame(&pts, mode).basis;
            st.det = st.det.max((det(&f) - 1.0).abs());
        }
    }
    st
}

/// Random 3-molecule systems: largest deviation between one interaction
/// layer and its double-loop oracle, over `h` and `v`.
pub fn aggregation_max_dev(systems: usize, seed: u64, variant: geomix::config::TransformVariant) -> f64 {
    use geomix::autodiff::Tensor;
    use geomix::geometry::random_rotation;
    use geomix::gin::{Gin, GinState, PairIndex};
    use geomix::nn::{ParamStore, Scope};
    use rand::Rng;
    use rand_distr::StandardNormal;

    let (hidden, c) = (6, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..systems {
        let mut store = ParamStore::new();
        let gin = Gin::new(&mut store, &mut rng, "gin", 1, hidden, c, variant);
        let sizes: Vec<usize> = (0..3).map(|_| rng.gen_range(1..=5)).collect();
        let mol_of_atom: Vec<usize> = sizes.iter().enumerate().flat_map(|(m, &k)| std::iter::repeat(m).take(k)).collect();
        let n = mol_of_atom.len();
        let mut g = || rng.sample::<f64, _>(StandardNormal);
        let h: Vec<Vec<f64>> = (0..n).map(|_| (0..hidden).map(|_| g()).collect()).collect();
        let x: Vec<Vec<[f64; 3]>> = (0..n).map(|_| (0..c).map(|_| [g(), g(), g()]).collect()).collect();
        let v: Vec<Vec<[f64; 3]>> = (0..n).map(|_| (0..c).map(|_| [g(), g(), g()]).collect()).collect();
        let frames: Vec<_> = (0..3).map(|_| random_rotation(&mut rng)).collect();

        let mut s = Scope::new(&store, false);
        let flat3 = |t: &Vec<Vec<[f64; 3]>>| t.iter().flatten().flatten().copied().collect::<Vec<f64>>();
        let hv = s.constant(Tensor::from_rows(&h).unwrap());
        let xv = s.constant(Tensor::new(vec![n, c, 3], flat3(&x)).unwrap());
        let vv = s.constant(Tensor::new(vec![n, c, 3], flat3(&v)).unwrap());
        let pairs = PairIndex::new(&mol_of_atom, &sizes);
        let (out, _) = gin.layers[0].forward(&mut s, GinState { h: hv, x: xv, v: vv }, &pairs, &frames).unwrap();
        let oracle = gin_oracle::gin_layer_oracle(&store, &gin.layers[0], &mol_of_atom, &h, &x, &v, &frames);
        let got_h = s.value(out.h).data().to_vec();
        let got_v = s.value(out.v).data().to_vec();
        let want_h: Vec<f64> = oracle.h.iter().flatten().copied().collect();
        let want_v: Vec<f64> = oracle.v.iter().flatten().flatten().copied().collect();
        for (a, b) in got_h.iter().zip(&want_h).chain(got_v.iter().zip(&want_v)) {
            worst = worst.max((a - b).abs());
        }
        assert_eq!(got_h.len(), want_h.len());
        assert_eq!(got_v.len(), want_v.len());
    }
    worst
}
