//! Canonical mixture dataset: parsing, graph construction, splits and
//! normalization statistics.

mod graph;
mod io;
mod normalize;
mod split;

pub use graph::{
    build_geometric_graph, centroid, perturb_coordinates, perturb_with, radius_edges, Atom,
    GeometricGraph, Role, DEFAULT_CUTOFF,
};
pub use io::{
    file_sha256, parse_dataset, parse_dataset_with_cutoff, validate_record, write_dataset,
    DatasetMeta, Environment, MixtureSystem, MoleculeRecord, SystemRecord, ENV_DIM,
};
pub use normalize::Normalizer;
pub use split::{make_split, Split, SplitMode, SplitSpec};
