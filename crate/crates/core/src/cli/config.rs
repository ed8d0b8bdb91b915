//! Run configuration: per-dataset defaults, TOML overlay, CLI overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{CosSimConfig, CosSimSchedule, RbiVaeConfig};
use crate::datagen::{DatasetKind, SpritesSpec, SynthSpec};
use crate::error::{Error, Result};
use crate::nets::{ConvSpec, EmbedSpec, EmbedderArch};
use crate::probe::TraversalSpec;
use crate::retrieval::ScoreMode;
use crate::rivae::{LatentSource, LossWeights, RivaeConfig, Schedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Rivae,
    Rbivae,
    BivaeOnV,
    CossimLvm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::Rivae,
        ModelKind::Rbivae,
        ModelKind::BivaeOnV,
        ModelKind::CossimLvm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Rivae => "rivae",
            ModelKind::Rbivae => "rbivae",
            ModelKind::BivaeOnV => "bivae_on_v",
            ModelKind::CossimLvm => "cossim_lvm",
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            ModelKind::Rivae => 1,
            ModelKind::Rbivae => 2,
            ModelKind::BivaeOnV => 3,
            ModelKind::CossimLvm => 4,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown model `{s}` (rivae | rbivae | bivae_on_v | cossim_lvm)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub ambient_dim: usize,
    pub generator_hidden: usize,
    pub shared_dim: usize,
    pub private_dim: usize,
    pub sprite_positions: usize,
    pub sprite_scales: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub idx_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub v_dim: usize,
    pub z_dim: usize,
    pub hidden: Vec<usize>,
    pub slope: f64,
    pub eta: f64,
    pub c_init: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    /// warm-start RIVAE / RBi-VAE embedders from a Cos-Sim-LVM run
    pub enabled: bool,
    pub embed_epochs: usize,
    pub bottleneck_epochs: usize,
    pub learning_rate: f64,
    pub margin: f64,
    pub hidden: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RbiConfig {
    pub gamma: f64,
    pub hidden: Vec<usize>,
    pub disc_hidden: usize,
    pub disc_layers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub db_size: usize,
    pub trials: usize,
    pub mode: ScoreMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub n_points: usize,
    pub k_std: f64,
    pub n_refs: usize,
    pub alpha: f64,
    pub db_size: usize,
    /// factor columns correlated against; empty means all
    pub factor_columns: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathConfig {
    pub out_dir: PathBuf,
    /// dataset container; defaults to `<out_dir>/<dataset>-<seed>.rivd`
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub data_file: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub checkpoint: Option<PathBuf>,
}

/// The effective configuration of one command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    pub model: ModelKind,
    pub seed: u64,
    pub data: DataConfig,
    pub model_net: ModelConfig,
    pub loss: LossWeights,
    pub schedule: Schedule,
    pub pretrain: PretrainConfig,
    pub rbivae: RbiConfig,
    pub eval: EvalConfig,
    pub probe: ProbeConfig,
    pub paths: PathConfig,
}

impl RunConfig {
    /// Built-in settings for `dataset`.
    pub fn defaults(dataset: DatasetKind, model: ModelKind) -> Self {
        let (v_dim, z_dim, lr, joint_start, decay, db_size) = match dataset {
            DatasetKind::Synth => (3, 2, 0.005, 100, vec![200, 1000], 1000),
            DatasetKind::Sprites => (10, 3, 0.001, 100, vec![200, 1000], 1000),
            DatasetKind::SplitMnist => (50, 10, 1e-4, 5, vec![20, 50], 2000),
        };
        let synth = SynthSpec::default();
        let sprites = SpritesSpec::default();
        Self {
            dataset,
            model,
            seed: 0,
            data: DataConfig {
                n_train: synth.n_train,
                n_test: synth.n_test,
                ambient_dim: synth.ambient_dim,
                generator_hidden: synth.hidden,
                shared_dim: synth.shared_dim,
                private_dim: synth.private_dim,
                sprite_positions: sprites.positions,
                sprite_scales: sprites.scales,
                idx_dir: None,
            },
            model_net: ModelConfig {
                v_dim,
                z_dim,
                hidden: vec![10, 10],
                slope: 0.2,
                eta: 1e-3,
                c_init: 0.01,
            },
            loss: LossWeights::default(),
            schedule: Schedule {
                batch_size: 64,
                epochs: 2000,
                joint_start,
                learning_rate: lr,
                decay_epochs: decay,
                decay_factor: 0.5,
            },
            pretrain: PretrainConfig {
                enabled: true,
                embed_epochs: 30,
                bottleneck_epochs: 30,
                learning_rate: lr,
                margin: 0.3,
                hidden: vec![10, 10],
            },
            rbivae: RbiConfig {
                gamma: 10.0,
                hidden: vec![10],
                disc_hidden: 300,
                disc_layers: 6,
            },
            eval: EvalConfig {
                db_size,
                trials: 10,
                mode: ScoreMode::Sample,
            },
            probe: ProbeConfig {
                n_points: 100,
                k_std: 10.0,
                n_refs: 20,
                alpha: 10.0,
                db_size,
                factor_columns: if dataset == DatasetKind::Synth {
                    vec![0, 1]
                } else {
                    Vec::new()
                },
            },
            paths: PathConfig {
                out_dir: PathBuf::from("out"),
                data_file: None,
                checkpoint: None,
            },
        }
    }

    /// Defaults for the dataset/model named in `overlay` (or `synth`/`rivae`),
    /// with every key present in `overlay` replacing the default.
    pub fn from_toml_overlay(
        overlay: &str,
        dataset: Option<DatasetKind>,
        model: Option<ModelKind>,
    ) -> Result<Self> {
        let file: toml::Table =
            toml::from_str(overlay).map_err(|e| Error::Config(format!("config file: {e}")))?;
        let pick = |key: &str| file.get(key).and_then(|v| v.as_str()).map(str::to_owned);
        let dataset = match (dataset, pick("dataset")) {
            (Some(d), _) => d,
            (None, Some(s)) => s.parse()?,
            (None, None) => DatasetKind::Synth,
        };
        let model = match (model, pick("model")) {
            (Some(m), _) => m,
            (None, Some(s)) => s.parse()?,
            (None, None) => ModelKind::Rivae,
        };
        let base = toml::Table::try_from(Self::defaults(dataset, model))
            .map_err(|e| Error::Config(format!("serialising defaults: {e}")))?;
        let mut merged = toml::Value::Table(base);
        merge(&mut merged, toml::Value::Table(file));
        let mut cfg: RunConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("config file: {e}")))?;
        (cfg.dataset, cfg.model) = (dataset, model);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(
        path: &Path,
        dataset: Option<DatasetKind>,
        model: Option<ModelKind>,
    ) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_overlay(&text, dataset, model)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.loss.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.model_net.v_dim == 0 || self.model_net.z_dim == 0 {
            return bad("model_net.v_dim and model_net.z_dim must be positive");
        }
        if self.eval.trials == 0 || self.eval.db_size == 0 {
            return bad("eval.trials and eval.db_size must be positive");
        }
        if self.probe.n_points < 2 || self.probe.n_refs == 0 || self.probe.alpha <= 0.0 {
            return bad("probe needs n_points ≥ 2, n_refs ≥ 1 and alpha > 0");
        }
        if self.pretrain.learning_rate <= 0.0 {
            return bad("pretrain.learning_rate must be positive");
        }
        Ok(())
    }

    pub fn data_file(&self) -> PathBuf {
        self.paths.data_file.clone().unwrap_or_else(|| {
            let name = match self.dataset {
                DatasetKind::Synth => format!("synth-{}.rivd", self.seed),
                other => format!("{other}.rivd"),
            };
            self.paths.out_dir.join(name)
        })
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            shared_dim: self.data.shared_dim,
            private_dim: self.data.private_dim,
            ambient_dim: self.data.ambient_dim,
            hidden: self.data.generator_hidden,
            n_train: self.data.n_train,
            n_test: self.data.n_test,
            seed: self.seed,
        }
    }

    pub fn sprites_spec(&self) -> SpritesSpec {
        SpritesSpec {
            positions: self.data.sprite_positions,
            scales: self.data.sprite_scales,
            ..SpritesSpec::default()
        }
    }

    pub fn embed_spec(&self, x1_dim: usize, x2_dim: usize) -> EmbedSpec {
        let arch = match self.dataset {
            DatasetKind::Synth => EmbedderArch::Synth,
            DatasetKind::Sprites => EmbedderArch::Sprites,
            DatasetKind::SplitMnist => EmbedderArch::SplitMnist,
        };
        EmbedSpec {
            arch,
            x1_dim,
            x2_dim,
            v_dim: self.model_net.v_dim,
            conv: ConvSpec::default(),
        }
    }

    pub fn rivae_config(&self) -> RivaeConfig {
        let m = &self.model_net;
        RivaeConfig {
            hidden: m.hidden.clone(),
            slope: m.slope,
            eta: m.eta,
            c_init: m.c_init,
            ..RivaeConfig::new(m.v_dim, m.z_dim)
        }
    }

    pub fn rbivae_config(&self) -> RbiVaeConfig {
        let m = &self.model_net;
        let base = if self.model == ModelKind::BivaeOnV {
            RbiVaeConfig::bivae_on_v(m.v_dim, m.z_dim)
        } else {
            RbiVaeConfig::new(m.v_dim, m.z_dim)
        };
        RbiVaeConfig {
            hidden: self.rbivae.hidden.clone(),
            slope: m.slope,
            gamma: self.rbivae.gamma,
            disc_hidden: self.rbivae.disc_hidden,
            disc_layers: self.rbivae.disc_layers,
            c_init: m.c_init,
            ..base
        }
    }

    pub fn cossim_config(&self) -> CosSimConfig {
        CosSimConfig {
            hidden: self.pretrain.hidden.clone(),
            slope: self.model_net.slope,
            margin: self.pretrain.margin,
            ..CosSimConfig::new(self.model_net.v_dim, self.model_net.z_dim)
        }
    }

    pub fn cossim_schedule(&self) -> CosSimSchedule {
        CosSimSchedule {
            batch_size: self.schedule.batch_size,
            embed_epochs: self.pretrain.embed_epochs,
            bottleneck_epochs: self.pretrain.bottleneck_epochs,
            learning_rate: self.pretrain.learning_rate,
        }
    }

    pub fn traversal_spec(&self) -> TraversalSpec {
        TraversalSpec {
            n_points: self.probe.n_points,
            k_std: self.probe.k_std,
            n_refs: self.probe.n_refs,
        }
    }

    /// Disables the embedder regulariser.
    pub fn without_reg(mut self) -> Self {
        self.loss.lambda_reg = 0.0;
        self
    }

    /// Best Synth recipe found by tuning: retrieval hinge on prior latents
    /// and learning rate 0.001. The defaults (posterior latents, 0.005) let the
    /// prior collapse on Synth.
    pub fn synth_calibrated(mut self) -> Self {
        self.loss.retr_latent = LatentSource::Prior;
        self.schedule.learning_rate = 0.001;
        self
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_dataset_defaults() {
        let s = RunConfig::defaults(DatasetKind::Synth, ModelKind::Rivae);
        assert_eq!(
            (
                s.schedule.learning_rate,
                s.schedule.joint_start,
                s.schedule.batch_size
            ),
            (0.005, 100, 64)
        );
        assert_eq!(
            (s.model_net.v_dim, s.model_net.z_dim, s.schedule.epochs),
            (3, 2, 2000)
        );
        assert_eq!(s.loss.lambda_reg, 0.1);
        let sp = RunConfig::defaults(DatasetKind::Sprites, ModelKind::Rivae);
        assert_eq!(
            (
                sp.model_net.v_dim,
                sp.model_net.z_dim,
                sp.schedule.learning_rate
            ),
            (10, 3, 0.001)
        );
        let m = RunConfig::defaults(DatasetKind::SplitMnist, ModelKind::Rivae);
        assert_eq!(
            (m.model_net.v_dim, m.model_net.z_dim, m.eval.db_size),
            (50, 10, 2000)
        );
        assert_eq!(
            (
                m.schedule.joint_start,
                m.schedule.decay_epochs.clone(),
                m.schedule.learning_rate
            ),
            (5, vec![20, 50], 1e-4)
        );
        assert_eq!(s.rbivae.gamma, 10.0);
    }

    #[test]
    fn overlay_and_precedence() {
        let text = "dataset = \"sprites\"\nseed = 4\n[schedule]\nepochs = 7\n";
        let c = RunConfig::from_toml_overlay(text, None, None).unwrap();
        assert_eq!(
            (c.dataset, c.seed, c.schedule.epochs),
            (DatasetKind::Sprites, 4, 7)
        );
        // untouched keys keep the sprites defaults
        assert_eq!(c.schedule.learning_rate, 0.001);
        let c = RunConfig::from_toml_overlay(text, Some(DatasetKind::Synth), None).unwrap();
        assert_eq!(
            (c.dataset, c.schedule.learning_rate, c.schedule.epochs),
            (DatasetKind::Synth, 0.005, 7)
        );
    }

    #[test]
    fn round_trip_and_rejections() {
        let c = RunConfig::defaults(DatasetKind::SplitMnist, ModelKind::Rbivae);
        let back = RunConfig::from_toml_overlay(&c.to_toml(), None, None).unwrap();
        assert_eq!(back, c);
        for bad in [
            "[schedule]\nbogus = 1\n",
            "model = \"vae\"\n",
            "[schedule]\nlearning_rate = -1.0\n",
            "seed = \"x\"\n",
        ] {
            assert!(
                matches!(
                    RunConfig::from_toml_overlay(bad, None, None),
                    Err(Error::Config(_))
                ),
                "{bad}"
            );
        }
    }
}
