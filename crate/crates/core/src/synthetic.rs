//! Seeded synthetic mixtures for tests, demos and the symmetry harness.
//!
//! Molecules come from a fixed library of random conformers; the target is a
//! smooth, Arrhenius-like function of temperature, salt concentration and
//! solvent composition, so it is learnable and invariant to every symmetry
//! the model respects.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::{
    build_geometric_graph, Atom, Environment, GeometricGraph, MixtureSystem, Role, DEFAULT_CUTOFF,
};
use crate::geometry::{random_rotation, rotate_points, Vec3};

/// `(atomic number, type index)` pairs used for synthetic atoms.
pub const ELEMENTS: [(u32, usize); 8] = [
    (1, 0),
    (6, 1),
    (8, 2),
    (9, 3),
    (3, 4),
    (15, 5),
    (7, 6),
    (16, 7),
];

pub const ELEMENT_SYMBOLS: [&str; 8] = ["H", "C", "O", "F", "Li", "P", "N", "S"];

struct Template {
    name: &'static str,
    role: Role,
    atoms: usize,
    /// Solvent fluidity or salt dissociation factor.
    factor: f64,
}

const TEMPLATES: [Template; 9] = [
    Template { name: "EC", role: Role::Solvent, atoms: 10, factor: 0.6 },
    Template { name: "PC", role: Role::Solvent, atoms: 13, factor: 0.4 },
    Template { name: "DMC", role: Role::Solvent, atoms: 12, factor: 1.4 },
    Template { name: "EMC", role: Role::Solvent, atoms: 9, factor: 1.1 },
    Template { name: "DEC", role: Role::Solvent, atoms: 8, factor: 0.9 },
    Template { name: "FEC", role: Role::Solvent, atoms: 6, factor: 0.5 },
    Template { name: "LiPF6", role: Role::Salt, atoms: 8, factor: 1.0 },
    Template { name: "LiTFSI", role: Role::Salt, atoms: 7, factor: 0.8 },
    Template { name: "LiFSI", role: Role::Salt, atoms: 5, factor: 1.2 },
];

/// Random anisotropic point cloud with random elements.
pub fn random_molecule_atoms<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<Atom> {
    let scale = [
        rng.gen_range(1.4..2.2),
        rng.gen_range(0.8..1.3),
        rng.gen_range(0.3..0.7),
    ];
    (0..n)
        .map(|_| {
            let (z, type_index) = ELEMENTS[rng.gen_range(0..ELEMENTS.len())];
            let xyz = std::array::from_fn(|d| scale[d] * rng.sample::<f64, _>(StandardNormal));
            Atom { z, type_index, xyz }
        })
        .collect()
}

fn template_atoms(k: usize) -> Vec<Atom> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9 + k as u64);
    random_molecule_atoms(&mut rng, TEMPLATES[k].atoms)
}

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub systems: usize,
    pub seed: u64,
    pub max_solvents: usize,
    /// Give every molecule instance an independent random orientation.
    pub rotate_conformers: bool,
}

impl SyntheticSpec {
    pub fn small(systems: usize, seed: u64) -> Self {
        Self {
            systems,
            seed,
            max_solvents: 3,
            rotate_conformers: true,
        }
    }
}

/// Splits 1 into `n` proportions, each safely inside (0, 1).
fn proportions<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut w: Vec<f64> = raw.iter().map(|r| r / total).collect();
    let head: f64 = w[..n - 1].iter().sum();
    w[n - 1] = 1.0 - head;
    w
}

fn target(temperature: f64, molal: f64, salt_factor: f64, fluidity: f64) -> f64 {
    let arrhenius = (-400.0 / (temperature - 150.0)).exp();
    120.0 * salt_factor * molal * fluidity * arrhenius / (1.0 + 0.5 * molal * molal)
}

pub fn generate_dataset(spec: &SyntheticSpec) -> Vec<MixtureSystem> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let library: Vec<Vec<Atom>> = (0..TEMPLATES.len()).map(template_atoms).collect();
    let salts: Vec<usize> = (0..TEMPLATES.len()).filter(|&k| TEMPLATES[k].role == Role::Salt).collect();
    let solvents: Vec<usize> =
        (0..TEMPLATES.len()).filter(|&k| TEMPLATES[k].role == Role::Solvent).collect();
    (0..spec.systems)
        .map(|i| {
            let salt = *salts.choose(&mut rng).unwrap();
            let n_solv = rng.gen_range(1..=spec.max_solvents.max(1));
            let chosen: Vec<usize> = solvents.choose_multiple(&mut rng, n_solv).copied().collect();
            let temperature = rng.gen_range(260.0..345.0);
            let molal = rng.gen_range(0.2..2.2);
            let salt_w = molal / (molal + 12.0);
            let mut solv_w = proportions(&mut rng, n_solv);
            for w in &mut solv_w {
                *w *= 1.0 - salt_w;
            }
            let fluidity: f64 = chosen
                .iter()
                .zip(&solv_w)
                .map(|(&k, w)| TEMPLATES[k].factor * w)
                .sum::<f64>()
                / (1.0 - salt_w);
            let members: Vec<(usize, f64)> = std::iter::once((salt, salt_w))
                .chain(chosen.iter().copied().zip(solv_w.iter().copied()))
                .collect();
            // Close the proportions exactly.
            let head: f64 = members[..members.len() - 1].iter().map(|m| m.1).sum();
            let graphs = members
                .iter()
                .enumerate()
                .map(|(j, &(k, w))| {
                    let w = if j + 1 == members.len() { 1.0 - head } else { w };
                    let mut atoms = library[k].clone();
                    if spec.rotate_conformers {
                        let r = random_rotation(&mut rng);
                        let pts: Vec<Vec3> = atoms.iter().map(|a| a.xyz).collect();
                        for (a, p) in atoms.iter_mut().zip(rotate_points(&r, &pts)) {
                            a.xyz = p;
                        }
                    }
                    let t = &TEMPLATES[k];
                    build_geometric_graph(t.name, &atoms, w, t.role, DEFAULT_CUTOFF)
                        .expect("templates are non-empty")
                })
                .collect();
            MixtureSystem {
                id: format!("syn-{:05}", i),
                graphs,
                env: Environment {
                    temperature_k: temperature,
                    conc_molal: Some(molal),
                    conc_molar: None,
                },
                target: target(temperature, molal, TEMPLATES[salt].factor, fluidity),
            }
        })
        .collect()
}

/// A random system of `molecules` random molecules, the first one a salt.
pub fn random_system<R: Rng + ?Sized>(
    rng: &mut R,
    molecules: usize,
    atoms: std::ops::RangeInclusive<usize>,
) -> MixtureSystem {
    let w = proportions(rng, molecules);
    let graphs: Vec<GeometricGraph> = (0..molecules)
        .map(|m| {
            let n = rng.gen_range(atoms.clone());
            let role = if m == 0 { Role::Salt } else { Role::Solvent };
            build_geometric_graph(format!("mol{m}"), &random_molecule_atoms(rng, n), w[m], role, DEFAULT_CUTOFF)
                .expect("non-empty")
        })
        .collect();
    MixtureSystem {
        id: format!("rand-{}", rng.gen::<u32>()),
        graphs,
        env: Environment {
            temperature_k: rng.gen_range(260.0..345.0),
            conc_molal: Some(rng.gen_range(0.2..2.0)),
            conc_molar: None,
        },
        target: rng.gen_range(0.5..15.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::validate_record;

    #[test]
    fn generated_records_validate() {
        for s in generate_dataset(&SyntheticSpec::small(50, 11)) {
            validate_record(&s.to_record()).unwrap();
            assert!(s.target > 0.0 && s.target.is_finite());
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(
            generate_dataset(&SyntheticSpec::small(5, 4)),
            generate_dataset(&SyntheticSpec::small(5, 4))
        );
    }

    #[test]
    fn random_systems_validate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for m in 2..=5 {
            validate_record(&random_system(&mut rng, m, 3..=15).to_record()).unwrap();
        }
    }
}
