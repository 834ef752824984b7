mod common;

use geomix::config::TransformVariant;
use geomix::dataset::{
    parse_dataset, perturb_coordinates, radius_edges, write_dataset, build_geometric_graph, Atom, Role,
};
use geomix::synthetic::{generate_dataset, SyntheticSpec};
use geomix::training::pearson;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn eigen_and_frames_match_oracles() {
    let st = common::eigen_frame_suite(1000, 42);
    assert!(st.reconstruction < 1e-10, "{st:?}");
    assert!(st.eigenvalue < 1e-9, "{st:?}");
    assert!(st.det < 1e-10, "{st:?}");
    assert!(st.orthogonality < 1e-10, "{st:?}");
    assert!(st.equivariance < 1e-8, "{st:?}");
    assert!(st.equivariance_cases > 900, "{st:?}");
}

#[test]
fn cubic_oracle_on_known_spectrum() {
    let e = common::cubic_eigenvalues(&[[2.0, 1.0, 0.0], [1.0, 2.0, 0.0], [0.0, 0.0, 5.0]]);
    for (a, b) in e.iter().zip([5.0, 3.0, 1.0]) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn interaction_layer_matches_double_loop() {
    for variant in [TransformVariant::Free, TransformVariant::Graphwise, TransformVariant::Quaternion] {
        let dev = common::aggregation_max_dev(8, 3, variant);
        assert!(dev < 1e-12, "{variant:?}: {dev:e}");
    }
}

#[test]
fn pearson_matches_covariance_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let a: Vec<f64> = (0..100).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = a.iter().map(|v| 0.3 * v + rng.gen_range(-1.0..1.0)).collect();
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        let direct = cov / (va * vb).sqrt();
        assert!((pearson(&a, &b).unwrap() - direct).abs() < 1e-12);
    }
}

#[test]
fn perturbation_has_requested_spread() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let atoms: Vec<Atom> = (0..2000)
        .map(|_| Atom { z: 6, type_index: 1, xyz: [0, 1, 2].map(|_| rng.gen_range(-5.0..5.0)) })
        .collect();
    let g = build_geometric_graph("blob", &atoms, 1.0, Role::Solvent, 0.5).unwrap();
    let p = perturb_coordinates(&g, 0.3, 17).unwrap();
    let d: Vec<f64> = g.coords.iter().zip(&p.coords).flat_map(|(a, b)| (0..3).map(move |k| b[k] - a[k])).collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
    assert!((0.285..=0.315).contains(&std), "{std}");
    assert_eq!(p.edges, g.edges);
}

#[test]
fn radius_edges_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let n = rng.gen_range(1..30);
        let pts: Vec<[f64; 3]> = (0..n).map(|_| [0, 1, 2].map(|_| rng.gen_range(-4.0..4.0))).collect();
        let (edges, w) = radius_edges(&pts, 3.0);
        let mut want = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let d = (0..3).map(|k| (pts[i][k] - pts[j][k]).powi(2)).sum::<f64>().sqrt();
                if i != j && d < 3.0 {
                    want.push((i, j));
                }
            }
        }
        let mut got = edges.clone();
        got.sort();
        assert_eq!(got, want);
        for ((i, j), d) in edges.iter().zip(&w) {
            let e = (0..3).map(|k| (pts[*i][k] - pts[*j][k]).powi(2)).sum::<f64>().sqrt();
            assert!((d - e).abs() < 1e-15);
        }
    }
}

#[test]
fn dataset_round_trip() {
    let data = generate_dataset(&SyntheticSpec::small(12, 8));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    write_dataset(&path, &data).unwrap();
    let back = parse_dataset(&path).unwrap();
    assert_eq!(back.len(), data.len());
    for (a, b) in data.iter().zip(&back) {
        assert_eq!((a.id.as_str(), a.target, a.env), (b.id.as_str(), b.target, b.env));
        assert_eq!(a.graphs.len(), b.graphs.len());
        for (ga, gb) in a.graphs.iter().zip(&b.graphs) {
            assert_eq!((&ga.name, ga.role, ga.w, &ga.types, &ga.edges), (&gb.name, gb.role, gb.w, &gb.types, &gb.edges));
            for (p, q) in ga.coords.iter().zip(&gb.coords) {
                assert!((0..3).all(|k| (p[k] - q[k]).abs() < 1e-12));
            }
        }
    }
}
