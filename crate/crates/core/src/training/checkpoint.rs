use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::dataset::Normalizer;
use crate::error::{Error, Result};
use crate::model::{Model, Network};
use crate::nn::ParamStore;

const FORMAT: &str = "geomix-checkpoint";
const VERSION: u32 = 1;

/// Everything needed to rebuild a trained model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: Config,
    pub normalizer: Normalizer,
    /// Molecule names of the baseline's input vector; empty otherwise.
    pub vocabulary: Vec<String>,
    pub best_epoch: Option<usize>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn from_model(model: &Model, best_epoch: Option<usize>) -> Self {
        let vocabulary = match &model.network {
            Network::ProportionMlp { vocabulary, .. } => vocabulary.clone(),
            Network::Geomix { .. } => Vec::new(),
        };
        Self {
            format: FORMAT.into(),
            version: VERSION,
            config: model.config.clone(),
            normalizer: model.normalizer.clone(),
            vocabulary,
            best_epoch,
            params: model.params.clone(),
        }
    }

    pub fn into_model(self) -> Result<Model> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format `{}` version {}",
                self.format, self.version
            )));
        }
        let mut model = Model::new(&self.config, self.normalizer, self.vocabulary)?;
        model.params.load_from(&self.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

pub fn load_model(path: &Path) -> Result<Model> {
    Checkpoint::load(path)?.into_model()
}
