use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ExactSum, Tensor};
use crate::error::{Error, Result};
use crate::geometry::Vec3;

pub const DEFAULT_CUTOFF: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Salt,
    Solvent,
}

/// One atom as given in the input file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub z: u32,
    #[serde(rename = "type")]
    pub type_index: usize,
    pub xyz: Vec3,
}

/// One molecule: atoms with centered coordinates and the directed
/// within-cutoff edge list.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometricGraph {
    pub name: String,
    pub role: Role,
    /// Mixture proportion, in (0, 1).
    pub w: f64,
    pub atomic_numbers: Vec<u32>,
    pub types: Vec<usize>,
    /// Centered coordinates, Å.
    pub coords: Vec<Vec3>,
    /// Mean removed during centering; `coords + origin` are the input values.
    pub origin: Vec3,
    /// Directed `(target, source)` pairs, both directions present.
    pub edges: Vec<(usize, usize)>,
    /// Euclidean length of each edge.
    pub edge_weights: Vec<f64>,
}

/// Correctly rounded per-axis mean.
pub fn centroid(points: &[Vec3]) -> Vec3 {
    let n = points.len().max(1) as f64;
    let mut out = [0.0; 3];
    let mut acc = ExactSum::new();
    for (d, o) in out.iter_mut().enumerate() {
        acc.clear();
        for p in points {
            acc.add(p[d]);
        }
        *o = acc.value() / n;
    }
    out
}

fn distance(a: &Vec3, b: &Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Directed edges between every pair closer than `cutoff`.
pub fn radius_edges(coords: &[Vec3], cutoff: f64) -> (Vec<(usize, usize)>, Vec<f64>) {
    let mut edges = Vec::new();
    let mut weights = Vec::new();
    for i in 0..coords.len() {
        for j in i + 1..coords.len() {
            let d = distance(&coords[i], &coords[j]);
            if d < cutoff {
                edges.push((i, j));
                edges.push((j, i));
                weights.push(d);
                weights.push(d);
            }
        }
    }
    (edges, weights)
}

/// Centers the atoms and connects every pair closer than `cutoff`.
pub fn build_geometric_graph(
    name: impl Into<String>,
    atoms: &[Atom],
    w: f64,
    role: Role,
    cutoff: f64,
) -> Result<GeometricGraph> {
    if atoms.is_empty() {
        return Err(Error::Contract("molecule has no atoms".into()));
    }
    if atoms.iter().any(|a| a.xyz.iter().any(|v| !v.is_finite())) {
        return Err(Error::Contract("non-finite atom coordinate".into()));
    }
    let raw: Vec<Vec3> = atoms.iter().map(|a| a.xyz).collect();
    let origin = centroid(&raw);
    let coords: Vec<Vec3> = raw
        .iter()
        .map(|p| [p[0] - origin[0], p[1] - origin[1], p[2] - origin[2]])
        .collect();
    let (edges, edge_weights) = radius_edges(&coords, cutoff);
    Ok(GeometricGraph {
        name: name.into(),
        role,
        w,
        atomic_numbers: atoms.iter().map(|a| a.z).collect(),
        types: atoms.iter().map(|a| a.type_index).collect(),
        coords,
        origin,
        edges,
        edge_weights,
    })
}

impl GeometricGraph {
    pub fn num_atoms(&self) -> usize {
        self.coords.len()
    }

    /// Atoms with their original (uncentered) coordinates.
    pub fn atoms(&self) -> Vec<Atom> {
        (0..self.num_atoms())
            .map(|i| Atom {
                z: self.atomic_numbers[i],
                type_index: self.types[i],
                xyz: [
                    self.coords[i][0] + self.origin[0],
                    self.coords[i][1] + self.origin[1],
                    self.coords[i][2] + self.origin[2],
                ],
            })
            .collect()
    }

    /// Per-atom scalar features `[z, one-hot(type), w]`; the proportion
    /// column is dropped when `with_proportion` is false.
    pub fn node_scalars(&self, num_types: usize, with_proportion: bool) -> Result<Tensor> {
        let width = 1 + num_types + usize::from(with_proportion);
        let mut data = Vec::with_capacity(self.num_atoms() * width);
        for (z, &t) in self.atomic_numbers.iter().zip(&self.types) {
            if t >= num_types {
                return Err(Error::validation(
                    "atoms.type",
                    format!("type index {t} not below num_atom_types {num_types} in `{}`", self.name),
                ));
            }
            data.push(f64::from(*z));
            data.extend((0..num_types).map(|k| if k == t { 1.0 } else { 0.0 }));
            if with_proportion {
                data.push(self.w);
            }
        }
        Tensor::new(vec![self.num_atoms(), width], data)
    }

    /// Same molecule with atoms reordered: new atom `k` is old atom `perm[k]`.
    pub fn permute_nodes(&self, perm: &[usize]) -> GeometricGraph {
        let mut inv = vec![0; perm.len()];
        for (k, &p) in perm.iter().enumerate() {
            inv[p] = k;
        }
        GeometricGraph {
            name: self.name.clone(),
            role: self.role,
            w: self.w,
            atomic_numbers: perm.iter().map(|&p| self.atomic_numbers[p]).collect(),
            types: perm.iter().map(|&p| self.types[p]).collect(),
            coords: perm.iter().map(|&p| self.coords[p]).collect(),
            origin: self.origin,
            edges: self.edges.iter().map(|&(i, j)| (inv[i], inv[j])).collect(),
            edge_weights: self.edge_weights.clone(),
        }
    }

    /// Same topology with new coordinates.
    pub fn with_coords(&self, coords: Vec<Vec3>) -> GeometricGraph {
        assert_eq!(coords.len(), self.num_atoms());
        GeometricGraph {
            coords,
            ..self.clone()
        }
    }
}

/// Adds i.i.d. N(0, σ²) noise to every coordinate. Edges and centering are
/// kept from the clean graph.
pub fn perturb_coordinates(graph: &GeometricGraph, sigma: f64, seed: u64) -> Result<GeometricGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perturb_with(graph, sigma, &mut rng)
}

pub fn perturb_with(
    graph: &GeometricGraph,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<GeometricGraph> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Contract(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(graph.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let coords = graph
        .coords
        .iter()
        .map(|p| {
            let mut q = *p;
            for v in q.iter_mut() {
                *v += normal.sample(rng);
            }
            q
        })
        .collect();
    Ok(graph.with_coords(coords))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn atoms(xyz: &[Vec3]) -> Vec<Atom> {
        xyz.iter()
            .map(|&p| Atom {
                z: 6,
                type_index: 1,
                xyz: p,
            })
            .collect()
    }

    #[test]
    fn edge_below_cutoff() {
        let g = build_geometric_graph("a", &atoms(&[[0.0; 3], [5.0, 0.0, 0.0]]), 0.5, Role::Solvent, 6.0)
            .unwrap();
        assert_eq!(g.edges, vec![(0, 1), (1, 0)]);
        assert_eq!(g.edge_weights, vec![5.0, 5.0]);
    }

    #[test]
    fn no_edge_beyond_cutoff() {
        let g = build_geometric_graph("a", &atoms(&[[0.0; 3], [7.0, 0.0, 0.0]]), 0.5, Role::Solvent, 6.0)
            .unwrap();
        assert!(g.edges.is_empty());
    }

    #[test]
    fn centering() {
        let g = build_geometric_graph("a", &atoms(&[[0.0; 3], [2.0, 0.0, 0.0]]), 0.5, Role::Salt, 6.0)
            .unwrap();
        assert_eq!(g.coords, vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert_eq!(g.atoms()[1].xyz, [2.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_molecule_rejected() {
        assert!(matches!(
            build_geometric_graph("a", &[], 0.5, Role::Salt, 6.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn node_scalars_layout() {
        let g = build_geometric_graph("a", &atoms(&[[0.0; 3]]), 0.25, Role::Salt, 6.0).unwrap();
        let h = g.node_scalars(4, true).unwrap();
        assert_eq!(h.shape(), &[1, 6]);
        assert_eq!(h.data(), &[6.0, 0.0, 1.0, 0.0, 0.0, 0.25]);
        assert_eq!(g.node_scalars(4, false).unwrap().shape(), &[1, 5]);
        assert!(g.node_scalars(1, true).is_err());
    }

    #[test]
    fn zero_sigma_is_bit_identical() {
        let g = build_geometric_graph("a", &atoms(&[[-0.0, 1.0, 2.0], [3.0, 1.0, 0.5]]), 0.5, Role::Salt, 6.0)
            .unwrap();
        assert_eq!(perturb_coordinates(&g, 0.0, 9).unwrap(), g);
        assert_eq!(
            perturb_coordinates(&g, 0.3, 9).unwrap(),
            perturb_coordinates(&g, 0.3, 9).unwrap()
        );
        assert!(perturb_coordinates(&g, -1.0, 9).is_err());
    }
}
