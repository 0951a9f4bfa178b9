use serde::{Deserialize, Serialize};

use crate::data::{CorpusConfig, TEXT_SLOTS};
use crate::diffusion::{NoiseSchedule, SamplerConfig};
use crate::error::{ensure, Error, Result};
use crate::model::UnetConfig;
use crate::numcore::checkpoint::sha256_hex;
use crate::numcore::Activation;
use crate::perception::{LossConfig, PoseNetConfig, PoseTrainConfig};
use crate::pgi::AdapterConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Seeds adapter initialisation, batch order, noise draws and sampling.
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Seed of the synthetic corpus, shared by every run seed.
    pub seed: u64,
    pub image: usize,
    pub train_samples: usize,
    /// Samples held out for pose-network validation.
    pub heldout_samples: usize,
    /// Poses used for alignment evaluation.
    pub test_samples: usize,
    pub two_figure_prob: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            seed: 0,
            image: 32,
            train_samples: 2000,
            heldout_samples: 500,
            test_samples: 64,
            two_figure_prob: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub stem: usize,
    pub channels: [usize; 4],
    pub temb: usize,
    pub k: usize,
    /// Levels, finest first, that run a graph integrator; 0 bypasses all.
    pub pgi_levels: usize,
    pub activation: Activation,
}

impl Default for ModelSection {
    fn default() -> Self {
        let u = UnetConfig::default();
        Self {
            stem: u.stem,
            channels: u.channels,
            temb: u.temb,
            k: 9,
            pgi_levels: 4,
            activation: Activation::Gelu,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSection {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub ddim_steps: usize,
    pub guidance: f32,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            ddim_steps: 50,
            guidance: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseSection {
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    /// Seed of the base model, shared by every run seed.
    pub seed: u64,
}

impl Default for BaseSection {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            batch: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PosenetSection {
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    pub target_pck: f64,
    /// Seed of the training-loss network.
    pub seed: u64,
    /// Seed of the separately trained evaluation network.
    pub eval_seed: u64,
}

impl Default for PosenetSection {
    fn default() -> Self {
        Self {
            epochs: 40,
            lr: 2e-3,
            batch: 16,
            target_pck: 0.9,
            seed: 1,
            eval_seed: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSection {
    pub lr: f32,
    pub epochs: usize,
    pub batch: usize,
    pub text_drop: f64,
    pub pose_loss_last_epochs: usize,
    pub alpha: f32,
    /// Training samples drawn per epoch; 0 uses the whole corpus.
    pub samples_per_epoch: usize,
    /// The pose term is evaluated only at timesteps up to this one.
    pub lp_max_t: usize,
}

impl Default for AdapterSection {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            epochs: 20,
            batch: 6,
            text_drop: 0.5,
            pose_loss_last_epochs: 5,
            alpha: 0.01,
            samples_per_epoch: 0,
            lp_max_t: 500,
        }
    }
}

/// Every tunable of a run. Parsed from TOML with unknown keys rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub diffusion: DiffusionSection,
    pub base: BaseSection,
    pub posenet: PosenetSection,
    pub adapter: AdapterSection,
}

/// Search order for keys given without a section.
pub const SECTIONS: [&str; 7] = ["run", "model", "diffusion", "adapter", "data", "base", "posenet"];

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::contract(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    fn table(&self) -> toml::Table {
        toml::Table::try_from(self).expect("config serialises")
    }

    /// Fully qualified `section.key` for `key`, which may omit the section.
    pub fn resolve_key(&self, key: &str) -> Result<(String, String)> {
        let table = self.table();
        let section_has = |s: &str, k: &str| table.get(s).and_then(|v| v.as_table()).is_some_and(|t| t.contains_key(k));
        if let Some((s, k)) = key.split_once('.') {
            ensure!(section_has(s, k), "unknown config key {key}");
            return Ok((s.to_string(), k.to_string()));
        }
        SECTIONS
            .iter()
            .find(|s| section_has(s, key))
            .map(|s| (s.to_string(), key.to_string()))
            .ok_or_else(|| Error::contract(format!("unknown config key {key}")))
    }

    /// Sets one key from its textual value, parsed as a TOML value when
    /// possible and as a string otherwise. Cross-field checks are left to
    /// [`RunConfig::validate`], so overrides may be applied in any order.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, k) = self.resolve_key(key)?;
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let mut table = self.table();
        let sec = table
            .get_mut(&section)
            .and_then(|v| v.as_table_mut())
            .expect("resolved section");
        // integers are accepted where floats are expected
        let parsed = match (sec.get(&k), parsed) {
            (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (_, v) => v,
        };
        sec.insert(k, parsed);
        let cfg: Self = table
            .try_into()
            .map_err(|e| Error::contract(format!("config key {key} = {value}: {e}")))?;
        *self = cfg;
        Ok(())
    }

    /// Keys whose values differ from `other`, as `section.key`.
    pub fn diff(&self, other: &Self) -> Vec<String> {
        let (a, b) = (self.table(), other.table());
        let mut out = Vec::new();
        for s in SECTIONS {
            let (ta, tb) = (a[s].as_table().unwrap(), b[s].as_table().unwrap());
            for (k, v) in ta {
                if tb.get(k) != Some(v) {
                    out.push(format!("{s}.{k}"));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus()?;
        self.unet().validate()?;
        self.adapter_config()?;
        self.schedule()?;
        ensure!(
            self.diffusion.ddim_steps >= 1 && self.diffusion.ddim_steps <= self.diffusion.train_steps,
            "ddim_steps must be in 1..={}",
            self.diffusion.train_steps
        );
        self.loss()?;
        ensure!(self.adapter.lr >= 0.0 && self.base.lr >= 0.0 && self.posenet.lr >= 0.0, "learning rates must be nonnegative");
        ensure!(
            self.adapter.batch >= 1 && self.base.batch >= 1 && self.posenet.batch >= 1,
            "batch sizes must be at least 1"
        );
        ensure!((0.0..=1.0).contains(&self.adapter.text_drop), "text_drop must lie in [0, 1]");
        ensure!(
            self.data.train_samples >= 1 && self.data.heldout_samples >= 1 && self.data.test_samples >= 1,
            "sample counts must be at least 1"
        );
        ensure!(
            self.posenet.seed != self.posenet.eval_seed,
            "the evaluation pose network needs its own seed"
        );
        Ok(())
    }

    pub fn corpus(&self) -> Result<CorpusConfig> {
        let c = CorpusConfig {
            image: self.data.image,
            two_figure_prob: self.data.two_figure_prob,
            ..CorpusConfig::default()
        };
        c.validate()?;
        Ok(c)
    }

    pub fn unet(&self) -> UnetConfig {
        UnetConfig {
            image: self.data.image,
            stem: self.model.stem,
            channels: self.model.channels,
            temb: self.model.temb,
        }
    }

    pub fn adapter_config(&self) -> Result<AdapterConfig> {
        ensure!(self.model.pgi_levels <= 4, "pgi_levels must be in 0..=4, got {}", self.model.pgi_levels);
        ensure!(self.model.k >= 1, "k must be at least 1");
        Ok(AdapterConfig {
            graph_stages: self.model.pgi_levels,
            k: self.model.k,
            activation: self.model.activation,
            text_slots: TEXT_SLOTS,
        })
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let d = &self.diffusion;
        ensure!(
            d.train_steps >= 1 && d.beta_start > 0.0 && d.beta_start <= d.beta_end && d.beta_end < 1.0,
            "invalid noise schedule {d:?}"
        );
        NoiseSchedule::linear(d.train_steps, d.beta_start, d.beta_end)
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.diffusion.ddim_steps,
            eta: 0.0,
            seed: self.run.seed,
            guidance: self.diffusion.guidance,
        }
    }

    pub fn loss(&self) -> Result<LossConfig> {
        LossConfig::last_epochs(self.adapter.alpha, self.adapter.epochs, self.adapter.pose_loss_last_epochs)
    }

    pub fn posenet_net(&self) -> PoseNetConfig {
        PoseNetConfig::default()
    }

    pub fn posenet_train(&self, seed: u64) -> PoseTrainConfig {
        PoseTrainConfig {
            epochs: self.posenet.epochs,
            lr: self.posenet.lr,
            batch: self.posenet.batch,
            seed,
            target_pck: self.posenet.target_pck,
            radius: 0.1,
        }
    }
}
