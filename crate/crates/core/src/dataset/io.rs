use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::graph::{build_geometric_graph, Atom, GeometricGraph, Role, DEFAULT_CUTOFF};
use crate::error::{Error, Result};

/// One line of the canonical JSON-lines file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemRecord {
    pub id: String,
    #[serde(rename = "temperature_K")]
    pub temperature_k: f64,
    pub conc_molal: Option<f64>,
    pub conc_molar: Option<f64>,
    #[serde(rename = "conductivity_mS_cm")]
    pub conductivity: f64,
    pub molecules: Vec<MoleculeRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoleculeRecord {
    pub role: Role,
    pub name: String,
    pub w: f64,
    pub atoms: Vec<Atom>,
}

/// Temperature and salt concentration. Missing concentrations are 0 with
/// their presence flag cleared.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Environment {
    pub temperature_k: f64,
    pub conc_molal: Option<f64>,
    pub conc_molar: Option<f64>,
}

pub const ENV_DIM: usize = 5;

impl Environment {
    /// `[T, molal, has_molal, molar, has_molar]`
    pub fn to_vector(&self) -> [f64; ENV_DIM] {
        let flag = |v: Option<f64>| (v.unwrap_or(0.0), if v.is_some() { 1.0 } else { 0.0 });
        let (ml, fl) = flag(self.conc_molal);
        let (mr, fr) = flag(self.conc_molar);
        [self.temperature_k, ml, fl, mr, fr]
    }
}

/// A validated mixture: molecules, conditions and target conductivity.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSystem {
    pub id: String,
    pub graphs: Vec<GeometricGraph>,
    pub env: Environment,
    /// mS/cm
    pub target: f64,
}

impl MixtureSystem {
    pub fn num_atoms(&self) -> usize {
        self.graphs.iter().map(GeometricGraph::num_atoms).sum()
    }

    pub fn from_record(rec: &SystemRecord, cutoff: f64) -> Result<Self> {
        validate_record(rec)?;
        let graphs = rec
            .molecules
            .iter()
            .enumerate()
            .map(|(k, m)| {
                build_geometric_graph(&m.name, &m.atoms, m.w, m.role, cutoff).map_err(|e| match e {
                    Error::Contract(msg) => Error::validation(format!("molecules[{k}].atoms"), msg),
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            id: rec.id.clone(),
            graphs,
            env: Environment {
                temperature_k: rec.temperature_k,
                conc_molal: rec.conc_molal,
                conc_molar: rec.conc_molar,
            },
            target: rec.conductivity,
        })
    }

    pub fn to_record(&self) -> SystemRecord {
        SystemRecord {
            id: self.id.clone(),
            temperature_k: self.env.temperature_k,
            conc_molal: self.env.conc_molal,
            conc_molar: self.env.conc_molar,
            conductivity: self.target,
            molecules: self
                .graphs
                .iter()
                .map(|g| MoleculeRecord {
                    role: g.role,
                    name: g.name.clone(),
                    w: g.w,
                    atoms: g.atoms(),
                })
                .collect(),
        }
    }
}

fn finite(field: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::validation(field, format!("not finite: {v}")))
    }
}

pub fn validate_record(rec: &SystemRecord) -> Result<()> {
    finite("temperature_K", rec.temperature_k)?;
    if rec.temperature_k <= 0.0 {
        return Err(Error::validation("temperature_K", "must be positive"));
    }
    finite("conductivity_mS_cm", rec.conductivity)?;
    for (field, v) in [("conc_molal", rec.conc_molal), ("conc_molar", rec.conc_molar)] {
        if let Some(v) = v {
            finite(field, v)?;
            if v < 0.0 {
                return Err(Error::validation(field, "must be non-negative"));
            }
        }
    }
    if rec.molecules.is_empty() {
        return Err(Error::validation("molecules", "empty"));
    }
    let mut sum = 0.0;
    for (k, m) in rec.molecules.iter().enumerate() {
        let field = format!("molecules[{k}].w");
        finite(&field, m.w)?;
        if !(m.w > 0.0 && m.w < 1.0) {
            return Err(Error::validation(field, format!("proportion {} outside (0, 1)", m.w)));
        }
        sum += m.w;
        if m.atoms.is_empty() {
            return Err(Error::validation(format!("molecules[{k}].atoms"), "no atoms"));
        }
        for (a, atom) in m.atoms.iter().enumerate() {
            for v in atom.xyz {
                finite(&format!("molecules[{k}].atoms[{a}].xyz"), v)?;
            }
        }
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::validation("molecules.w", format!("proportions sum to {sum}, expected 1")));
    }
    for role in [Role::Salt, Role::Solvent] {
        if !rec.molecules.iter().any(|m| m.role == role) {
            return Err(Error::validation(
                "molecules.role",
                format!("no {} molecule", if role == Role::Salt { "salt" } else { "solvent" }),
            ));
        }
    }
    Ok(())
}

/// Reads and validates a canonical JSON-lines file. Blank lines are skipped.
pub fn parse_dataset(path: &Path) -> Result<Vec<MixtureSystem>> {
    parse_dataset_with_cutoff(path, DEFAULT_CUTOFF)
}

pub fn parse_dataset_with_cutoff(path: &Path, cutoff: f64) -> Result<Vec<MixtureSystem>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: SystemRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let sys = MixtureSystem::from_record(&rec, cutoff).map_err(|e| match e {
            Error::Validation { field, message } => Error::Validation {
                field,
                message: format!("{message} (line {}, id `{}`)", i + 1, rec.id),
            },
            other => other,
        })?;
        out.push(sys);
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, systems: &[MixtureSystem]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in systems {
        let line = serde_json::to_string(&s.to_record()).expect("records serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Sidecar describing the atom-type vocabulary.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    /// Type index (as a decimal string) to element symbol.
    pub type_symbols: BTreeMap<String, String>,
}

impl DatasetMeta {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("meta serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn num_types(&self) -> usize {
        self.type_symbols
            .keys()
            .filter_map(|k| k.parse::<usize>().ok())
            .map(|k| k + 1)
            .max()
            .unwrap_or(0)
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    const LINE: &str = r#"{"id":"s1","temperature_K":298.15,"conc_molal":1.0,"conc_molar":null,"conductivity_mS_cm":8.5,"molecules":[{"role":"salt","name":"LiPF6","w":0.1,"atoms":[{"z":3,"type":0,"xyz":[0,0,0]}]},{"role":"solvent","name":"EC","w":0.9,"atoms":[{"z":6,"type":1,"xyz":[0,0,0]},{"z":8,"type":2,"xyz":[1.2,0,0]}]}]}"#;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn parses_canonical_line() {
        let f = write_tmp(&format!("{LINE}\n\n"));
        let ds = parse_dataset(f.path()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds[0].graphs[1].edges.len(), 2);
        assert_eq!(ds[0].env.to_vector(), [298.15, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn bad_proportions_name_the_field() {
        let f = write_tmp(&LINE.replace("\"w\":0.9", "\"w\":0.8"));
        match parse_dataset(f.path()) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "molecules.w"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_line() {
        let f = write_tmp(&format!("{LINE}\n{{oops\n"));
        match parse_dataset(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_solvent_rejected() {
        let rec: SystemRecord = serde_json::from_str(LINE).unwrap();
        let mut r = rec.clone();
        r.molecules[1].role = Role::Salt;
        assert!(validate_record(&r).is_err());
        let mut r = rec;
        r.molecules[0].w = 0.0;
        r.molecules[1].w = 1.0;
        assert!(validate_record(&r).is_err());
    }

    #[test]
    fn meta_num_types() {
        let m: DatasetMeta = serde_json::from_str(r#"{"type_symbols":{"0":"H","3":"O"}}"#).unwrap();
        assert_eq!(m.num_types(), 4);
    }
}
