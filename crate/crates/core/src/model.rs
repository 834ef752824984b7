//! Full mixture model: per-role encoders, local frames, the interaction
//! network and the set readout, plus the proportion-MLP baseline.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tensor, Var};
use crate::config::{Architecture, Config, ProportionMode};
use crate::dataset::{perturb_with, GeometricGraph, MixtureSystem, Normalizer, Role, ENV_DIM};
use crate::encoder::{EdgeIndex, Encoder};
use crate::error::{Error, Result};
use crate::frames::construct_frame;
use crate::geometry::{Mat3, Vec3};
use crate::gin::{Gin, GinState, PairIndex, PairTrace};
use crate::nn::{Mlp, ParamStore, Scope};
use crate::readout::{Readout, ReadoutSettings};

#[derive(Clone, Debug)]
pub enum Network {
    Geomix {
        solvent: Encoder,
        salt: Encoder,
        gin: Option<Gin>,
        readout: Readout,
    },
    ProportionMlp {
        vocabulary: Vec<String>,
        mlp: Mlp,
    },
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: Config,
    pub params: ParamStore,
    pub normalizer: Normalizer,
    pub network: Network,
}

/// Tape handles produced by one forward pass.
pub struct Forward {
    /// `[1, 1]`, normalized target units.
    pub y_norm: Var,
    /// Per molecule `[N_m, 3]` denoised coordinates (empty for the baseline).
    pub denoise: Vec<Var>,
    /// `[N, H]` final atom scalars.
    pub h: Option<Var>,
    /// `[N, C, 3]` final atom vectors.
    pub v: Option<Var>,
    /// `[N, C, 3]` encoder coordinates.
    pub x: Option<Var>,
    pub traces: Vec<PairTrace>,
    pub frames: Vec<Mat3>,
}

/// Loss components of one system.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub mse: f64,
    pub denoise: f64,
}

/// Frames, encoder inputs and the noise applied, if any.
pub struct Inputs<'a> {
    pub system: &'a MixtureSystem,
    /// Coordinates fed to the encoders; `None` uses the clean ones.
    pub coords: Option<Vec<Vec<Vec3>>>,
}

impl Model {
    /// Fresh parameters, seeded by `config.seed`. `vocabulary` is used by
    /// the baseline only.
    pub fn new(config: &Config, normalizer: Normalizer, vocabulary: Vec<String>) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let h = config.hidden_dim;
        let network = match config.architecture {
            Architecture::Geomix => {
                let feat = 1 + config.num_atom_types + usize::from(config.proportion == ProportionMode::Embed);
                let mk = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str| {
                    Encoder::new(store, rng, name, feat, h, config.encoder_layers, config.channels)
                };
                let solvent = mk(&mut store, &mut rng, "solvent");
                let salt = mk(&mut store, &mut rng, "salt");
                let gin = (config.gin_layers > 0).then(|| {
                    Gin::new(&mut store, &mut rng, "gin", config.gin_layers, h, config.channels, config.transform)
                });
                let readout = Readout::new(
                    &mut store,
                    &mut rng,
                    "readout",
                    &ReadoutSettings {
                        mode: config.readout,
                        hidden: h,
                        env_dim: ENV_DIM,
                        heads: config.attention_heads,
                        layers: config.attention_layers,
                        capacity: config.slot_capacity,
                        temperature: config.attention_temperature,
                        dropout: config.attention_dropout,
                        head_layers: config.head_layers,
                    },
                );
                Network::Geomix {
                    solvent,
                    salt,
                    gin,
                    readout,
                }
            }
            Architecture::ProportionMlp => {
                if vocabulary.is_empty() {
                    return Err(Error::Config("baseline needs a non-empty molecule vocabulary".into()));
                }
                let mut dims = vec![vocabulary.len() + ENV_DIM];
                dims.extend(std::iter::repeat(h).take(config.head_layers - 1));
                dims.push(1);
                let mlp = Mlp::new(&mut store, &mut rng, "baseline", &dims, false);
                Network::ProportionMlp { vocabulary, mlp }
            }
        };
        Ok(Self {
            config: config.clone(),
            params: store,
            normalizer,
            network,
        })
    }

    /// Sorted unique molecule names.
    pub fn vocabulary_of<'a, I: IntoIterator<Item = &'a MixtureSystem>>(systems: I) -> Vec<String> {
        let mut names: Vec<String> = systems
            .into_iter()
            .flat_map(|s| s.graphs.iter().map(|g| g.name.clone()))
            .collect();
        names.sort();
        names.dedup();
        names
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn forward(
        &self,
        s: &mut Scope,
        inputs: &Inputs,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward> {
        let sys = inputs.system;
        let env = s.constant(Tensor::new(vec![1, ENV_DIM], self.normalizer.env(sys).to_vec())?);
        match &self.network {
            Network::ProportionMlp { vocabulary, mlp } => {
                let mut p = vec![0.0; vocabulary.len()];
                for g in &sys.graphs {
                    if let Ok(k) = vocabulary.binary_search(&g.name) {
                        p[k] += g.w;
                    }
                }
                let pv = s.constant(Tensor::new(vec![1, p.len()], p)?);
                let x = s.concat(&[pv, env]);
                let y = mlp.forward(s, x);
                Ok(Forward {
                    y_norm: y,
                    denoise: Vec::new(),
                    h: None,
                    v: None,
                    x: None,
                    traces: Vec::new(),
                    frames: Vec::new(),
                })
            }
            Network::Geomix {
                solvent,
                salt,
                gin,
                readout,
            } => self.forward_geomix(s, inputs, env, solvent, salt, gin.as_ref(), readout, dropout_rng),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward_geomix(
        &self,
        s: &mut Scope,
        inputs: &Inputs,
        env: Var,
        solvent: &Encoder,
        salt: &Encoder,
        gin: Option<&Gin>,
        readout: &Readout,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward> {
        let cfg = &self.config;
        let sys = inputs.system;
        let m = sys.graphs.len();
        if m > cfg.slot_capacity {
            return Err(Error::Capacity {
                molecules: m,
                capacity: cfg.slot_capacity,
            });
        }
        let embed_w = cfg.proportion == ProportionMode::Embed;
        let mut hs = Vec::with_capacity(m);
        let mut xs = Vec::with_capacity(m);
        let mut denoise = Vec::with_capacity(m);
        let mut frames = Vec::with_capacity(m);
        for (k, g) in sys.graphs.iter().enumerate() {
            let coords = inputs.coords.as_ref().map_or(&g.coords, |c| &c[k]);
            frames.push(construct_frame(coords, cfg.frame_mode).basis);
            let h0 = s.constant(g.node_scalars(cfg.num_atom_types, embed_w)?);
            let x0 = s.constant(Tensor::from_rows(coords)?);
            let enc = match g.role {
                Role::Salt => salt,
                Role::Solvent => solvent,
            };
            let out = enc.forward(s, h0, x0, &EdgeIndex::new(g));
            hs.push(out.h);
            xs.push(out.x);
            denoise.push(out.x_denoise);
        }
        let (mol_of_atom, sizes) = atom_layout(&sys.graphs);
        let n = mol_of_atom.len();
        let h = if m == 1 { hs[0] } else { concat_rows(s, &hs) };
        let x = if m == 1 { xs[0] } else { concat_rows(s, &xs) };
        let v = s.constant(Tensor::zeros(&[n, cfg.channels, 3]));
        let mut st = GinState { h, x, v };
        let mut traces = Vec::new();
        if let Some(gin) = gin {
            let pairs = PairIndex::new(&mol_of_atom, &sizes);
            (st, traces) = gin.forward(s, st, &pairs, &frames)?;
        }

        let ids: Arc<[usize]> = mol_of_atom.into();
        let sums = s.segment_sum(st.h, ids, m);
        let mut scale: Vec<f64> = sizes.iter().map(|&c| 1.0 / c as f64).collect();
        if !embed_w {
            for (sc, g) in scale.iter_mut().zip(&sys.graphs) {
                *sc *= g.w;
            }
        }
        let scale = s.constant(Tensor::new(vec![m, 1], scale)?);
        let mols = s.mul(sums, scale);
        let pooled = readout.pool(s, mols, dropout_rng)?;
        let y = readout.predict(s, pooled, env);
        Ok(Forward {
            y_norm: y,
            denoise,
            h: Some(st.h),
            v: Some(st.v),
            x: Some(st.x),
            traces,
            frames,
        })
    }

    /// Normalized model output to conductivity, mS/cm.
    pub fn denormalize(&self, y_norm: f64) -> f64 {
        let z = y_norm * self.normalizer.target_std + self.normalizer.target_mean;
        if self.normalizer.log_target {
            z.exp()
        } else {
            z
        }
    }

    /// Target in the space the model regresses.
    fn regression_target(&self, kappa: f64) -> f64 {
        if self.normalizer.log_target {
            kappa.max(1e-12).ln()
        } else {
            kappa
        }
    }

    /// Prediction on clean coordinates, mS/cm.
    pub fn predict(&self, sys: &MixtureSystem) -> Result<f64> {
        self.predict_with_coords(sys, None)
    }

    pub fn predict_with_coords(&self, sys: &MixtureSystem, coords: Option<Vec<Vec<Vec3>>>) -> Result<f64> {
        let mut s = Scope::new(&self.params, false);
        let f = self.forward(&mut s, &Inputs { system: sys, coords }, None)?;
        s.check().map_err(|e| e.with_context(format!("system `{}`", sys.id)))?;
        Ok(self.denormalize(s.value(f.y_norm).data()[0]))
    }

    /// Builds the training loss on `s`:
    /// `(y − κ)² + γ · Σ_m ‖X_m^denoise − X_m‖_F`.
    ///
    /// With `noise = Some((σ, rng))` the encoders see coordinates perturbed
    /// by N(0, σ²) and are asked to recover the clean ones.
    pub fn loss(
        &self,
        s: &mut Scope,
        sys: &MixtureSystem,
        noise: Option<(f64, &mut ChaCha8Rng)>,
        gamma: f64,
    ) -> Result<(Var, Var, Var)> {
        let coords = match noise {
            Some((sigma, rng)) if sigma > 0.0 => Some(
                sys.graphs
                    .iter()
                    .map(|g| perturb_with(g, sigma, rng).map(|p| p.coords))
                    .collect::<Result<Vec<_>>>()?,
            ),
            _ => None,
        };
        let mut drop_rng = (self.config.attention_dropout > 0.0)
            .then(|| ChaCha8Rng::seed_from_u64(self.config.seed ^ hash_id(&sys.id)));
        let f = self.forward(s, &Inputs { system: sys, coords }, drop_rng.as_mut())?;
        // Prediction in regression units: y = y_norm · std + mean.
        let y = s.scale(f.y_norm, self.normalizer.target_std);
        let y = s.offset(y, self.normalizer.target_mean);
        let target = s.constant(Tensor::scalar(self.regression_target(sys.target)).reshape(&[1, 1])?);
        let err = s.sub(y, target);
        let sq = s.square(err);
        let mse = s.sum(sq);
        let mut terms = Vec::with_capacity(f.denoise.len());
        for (d, g) in f.denoise.iter().zip(&sys.graphs) {
            let clean = s.constant(Tensor::from_rows(&g.coords)?);
            let diff = s.sub(*d, clean);
            let sq = s.square(diff);
            let ss = s.sum(sq);
            terms.push(s.sqrt(ss));
        }
        let denoise = match terms.as_slice() {
            [] => s.constant(Tensor::scalar(0.0)),
            [t] => *t,
            _ => {
                let cat = s.concat(&terms);
                s.sum(cat)
            }
        };
        let weighted = s.scale(denoise, gamma);
        let total = s.add(mse, weighted);
        Ok((total, mse, denoise))
    }

    /// Loss value and gradient for every parameter, in store order.
    pub fn loss_and_gradients(
        &self,
        sys: &MixtureSystem,
        noise: Option<(f64, &mut ChaCha8Rng)>,
        gamma: f64,
    ) -> Result<(LossParts, Vec<Tensor>)> {
        let mut s = Scope::new(&self.params, true);
        let (total, mse, den) = self.loss(&mut s, sys, noise, gamma)?;
        let grads = s
            .backward(total)
            .map_err(|e| e.with_context(format!("system `{}`", sys.id)))?;
        let parts = LossParts {
            total: s.value(total).data()[0],
            mse: s.value(mse).data()[0],
            denoise: s.value(den).data()[0],
        };
        Ok((parts, s.param_gradients(&grads)))
    }

    /// Loss value only.
    pub fn loss_value(
        &self,
        sys: &MixtureSystem,
        noise: Option<(f64, &mut ChaCha8Rng)>,
        gamma: f64,
    ) -> Result<LossParts> {
        let mut s = Scope::new(&self.params, false);
        let (total, mse, den) = self.loss(&mut s, sys, noise, gamma)?;
        s.check().map_err(|e| e.with_context(format!("system `{}`", sys.id)))?;
        Ok(LossParts {
            total: s.value(total).data()[0],
            mse: s.value(mse).data()[0],
            denoise: s.value(den).data()[0],
        })
    }
}

fn hash_id(id: &str) -> u64 {
    // FNV-1a; only needs to be stable.
    id.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

/// Molecule index of every atom (molecules in list order) and atom counts.
pub fn atom_layout(graphs: &[GeometricGraph]) -> (Vec<usize>, Vec<usize>) {
    let sizes: Vec<usize> = graphs.iter().map(GeometricGraph::num_atoms).collect();
    let mol_of_atom = sizes
        .iter()
        .enumerate()
        .flat_map(|(k, &n)| std::iter::repeat(k).take(n))
        .collect();
    (mol_of_atom, sizes)
}

/// Stacks per-molecule `[N_m, ...]` tensors along the first axis.
fn concat_rows(s: &mut Scope, parts: &[Var]) -> Var {
    let total: usize = parts.iter().map(|&p| s.shape(p)[0]).sum();
    let mut out: Option<Var> = None;
    let mut offset = 0;
    for &p in parts {
        let n = s.shape(p)[0];
        let ids: Arc<[usize]> = (offset..offset + n).collect();
        let placed = s.segment_sum(p, ids, total);
        out = Some(match out {
            None => placed,
            Some(acc) => s.add(acc, placed),
        });
        offset += n;
    }
    out.expect("at least one part")
}
