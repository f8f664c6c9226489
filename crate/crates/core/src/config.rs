//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored; unknown keys are errors. Every
//! key except `seed` has a default. [`ExperimentConfig::render`] writes the
//! fully-resolved configuration back out in the same format, and its SHA-256
//! is the config digest stamped into run manifests.
//!
//! | key | default |
//! |---|---|
//! | `seed` | required |
//! | `dataset` | `synthetic` (`synthetic`, `movielens`, `dump`) |
//! | `dataset.path` | — (MovieLens directory or dump file) |
//! | `dataset.max_users` | all |
//! | `synthetic.num_users`, `.samples_per_user` | 200, 100 |
//! | `synthetic.clusters`, `.cluster_weights` | `linear,factorized`, `1,1` |
//! | `synthetic.segments_per_cluster`, `.item_fields`, `.values_per_field` | 2, 4, 10 |
//! | `synthetic.signal_scale`, `.noise` | 2.0, 1.0 |
//! | `split.train_frac`, `.support_frac` | 0.8, 0.75 |
//! | `split.holdout_frac` | 0 (meta-test users = meta-train users) |
//! | `models` | `lr,fm,ffm,deepfm` |
//! | `model.latent_dim`, `.hidden`, `.keep_prob` | 10, `256,256,256`, 0.9 |
//! | `model.ignored_fields` | none (field names or indices) |
//! | `selector.embed_dim`, `.hidden`, `.ignored_fields` | 16, `200,200,200`, none |
//! | `pretrain.epochs`, `.batch_size`, `.lr` | 1, 1000, 0.001 |
//! | `pretrain.include_query` | false (bases see only support rows) |
//! | `ftrl.alpha`, `.beta`, `.l1`, `.l2` | 0.1, 1, 1e-5, 1e-5 |
//! | `meta.m`, `.episodes` | 10, 300 |
//! | `meta.alpha_init`, `.beta`, `.alpha_max`, `.alpha_learned` | 0.001, alpha_init/10, 1.0, true |
//! | `meta.mode`, `.variant`, `.outer`, `.finetune_steps` | `exact`, `both`, `sgd`, 1 |
//! | `level.hidden`, `.epochs`, `.batch_size`, `.lr` | `400,400,400`, 10, 1000, 0.001 |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::baselines::LevelSelectorConfig;
use crate::data::{ClusterFamily, SyntheticSpec, DEFAULT_SUPPORT_FRAC, DEFAULT_TRAIN_FRAC};
use crate::meta::{MetaConfig, Variant};
use crate::models::{ModelKind, PretrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    MovieLens { dir: PathBuf, max_users: Option<usize> },
    Dump { path: PathBuf, max_users: Option<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetSource,
    pub train_frac: f64,
    pub support_frac: f64,
    pub holdout_frac: f64,
    pub models: Vec<ModelKind>,
    pub latent_dim: usize,
    pub deep_hidden: Vec<usize>,
    pub keep_prob: f64,
    pub model_ignored_fields: Vec<String>,
    pub selector_embed_dim: usize,
    pub selector_hidden: Vec<usize>,
    pub selector_ignored_fields: Vec<String>,
    pub pretrain: PretrainConfig,
    /// Pretrain bases on support ∪ query instead of support only.
    pub pretrain_include_query: bool,
    pub meta: MetaConfig,
    /// `None` runs both variants.
    pub variant: Option<Variant>,
    pub level: LevelSelectorConfig,
}

impl ExperimentConfig {
    pub fn with_seed(seed: u64) -> Self {
        ExperimentConfig {
            seed,
            dataset: DatasetSource::Synthetic(SyntheticSpec {
                seed,
                ..SyntheticSpec::default()
            }),
            train_frac: DEFAULT_TRAIN_FRAC,
            support_frac: DEFAULT_SUPPORT_FRAC,
            holdout_frac: 0.0,
            models: vec![ModelKind::Lr, ModelKind::Fm, ModelKind::Ffm, ModelKind::DeepFm],
            latent_dim: 10,
            deep_hidden: vec![256, 256, 256],
            keep_prob: 0.9,
            model_ignored_fields: Vec::new(),
            selector_embed_dim: 16,
            selector_hidden: vec![200, 200, 200],
            selector_ignored_fields: Vec::new(),
            pretrain: PretrainConfig::default(),
            pretrain_include_query: false,
            meta: MetaConfig::default(),
            variant: None,
            level: LevelSelectorConfig::default(),
        }
    }

    /// Override the experiment seed; a synthetic dataset follows it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        if let DatasetSource::Synthetic(spec) = &mut self.dataset {
            spec.seed = seed;
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::parse(&text).map_err(|e| match e {
            Error::Parse { line, msg, .. } => Error::Parse {
                path: path.display().to_string(),
                line,
                msg,
            },
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: "<config>".into(),
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            if map
                .insert(k.trim().to_string(), (i + 1, v.trim().to_string()))
                .is_some()
            {
                return Err(Error::Parse {
                    path: "<config>".into(),
                    line: i + 1,
                    msg: format!("duplicate key {}", k.trim()),
                });
            }
        }
        let mut kv = Kv { map };
        let seed: u64 = kv
            .take("seed")?
            .ok_or_else(|| Error::Config("seed is mandatory".into()))?;
        let mut cfg = Self::with_seed(seed);
        cfg.apply(&mut kv)?;
        if let Some((k, (line, _))) = kv.map.iter().next() {
            return Err(Error::Parse {
                path: "<config>".into(),
                line: *line,
                msg: format!("unknown key {k}"),
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, kv: &mut Kv) -> Result<()> {
        let max_users: Option<usize> = kv.take("dataset.max_users")?;
        let path: Option<String> = kv.take("dataset.path")?;
        let kind: String = kv.take("dataset")?.unwrap_or_else(|| "synthetic".into());
        let mut syn = SyntheticSpec {
            seed: self.seed,
            ..SyntheticSpec::default()
        };
        kv.set("synthetic.num_users", &mut syn.num_users)?;
        kv.set("synthetic.samples_per_user", &mut syn.samples_per_user)?;
        if let Some(c) = kv.take_list::<ClusterFamily>("synthetic.clusters")? {
            syn.clusters = c;
        }
        if let Some(w) = kv.take_list::<f64>("synthetic.cluster_weights")? {
            syn.cluster_weights = w;
        } else if syn.cluster_weights.len() != syn.clusters.len() {
            syn.cluster_weights = vec![1.0; syn.clusters.len()];
        }
        kv.set("synthetic.segments_per_cluster", &mut syn.segments_per_cluster)?;
        kv.set("synthetic.item_fields", &mut syn.item_fields)?;
        kv.set("synthetic.values_per_field", &mut syn.values_per_field)?;
        kv.set("synthetic.signal_scale", &mut syn.signal_scale)?;
        kv.set("synthetic.noise", &mut syn.noise)?;
        self.dataset = match kind.as_str() {
            "synthetic" => DatasetSource::Synthetic(syn),
            "movielens" => DatasetSource::MovieLens {
                dir: path
                    .ok_or_else(|| Error::Config("dataset.path is required for movielens".into()))?
                    .into(),
                max_users,
            },
            "dump" => DatasetSource::Dump {
                path: path
                    .ok_or_else(|| Error::Config("dataset.path is required for dump".into()))?
                    .into(),
                max_users,
            },
            other => return Err(Error::Config(format!("unknown dataset {other:?}"))),
        };

        kv.set("split.train_frac", &mut self.train_frac)?;
        kv.set("split.support_frac", &mut self.support_frac)?;
        kv.set("split.holdout_frac", &mut self.holdout_frac)?;

        if let Some(m) = kv.take_list::<ModelKind>("models")? {
            self.models = m;
        }
        kv.set("model.latent_dim", &mut self.latent_dim)?;
        kv.set_list("model.hidden", &mut self.deep_hidden)?;
        kv.set("model.keep_prob", &mut self.keep_prob)?;
        kv.set_list("model.ignored_fields", &mut self.model_ignored_fields)?;
        kv.set("selector.embed_dim", &mut self.selector_embed_dim)?;
        kv.set_list("selector.hidden", &mut self.selector_hidden)?;
        kv.set_list("selector.ignored_fields", &mut self.selector_ignored_fields)?;

        kv.set("pretrain.epochs", &mut self.pretrain.epochs)?;
        kv.set("pretrain.batch_size", &mut self.pretrain.batch_size)?;
        kv.set("pretrain.lr", &mut self.pretrain.adam.lr)?;
        kv.set("pretrain.include_query", &mut self.pretrain_include_query)?;
        kv.set("ftrl.alpha", &mut self.pretrain.ftrl.alpha)?;
        kv.set("ftrl.beta", &mut self.pretrain.ftrl.beta)?;
        kv.set("ftrl.l1", &mut self.pretrain.ftrl.l1)?;
        kv.set("ftrl.l2", &mut self.pretrain.ftrl.l2)?;

        let m = &mut self.meta;
        kv.set("meta.m", &mut m.m)?;
        kv.set("meta.episodes", &mut m.episodes)?;
        kv.set("meta.alpha_init", &mut m.alpha_init)?;
        if let Some(b) = kv.take::<f64>("meta.beta")? {
            m.beta = Some(b);
        }
        kv.set("meta.alpha_max", &mut m.alpha_max)?;
        kv.set("meta.alpha_learned", &mut m.alpha_learned)?;
        kv.set("meta.mode", &mut m.mode)?;
        kv.set("meta.outer", &mut m.outer)?;
        kv.set("meta.finetune_steps", &mut m.finetune_steps)?;
        if let Some(v) = kv.take::<String>("meta.variant")? {
            self.variant = match v.as_str() {
                "both" => None,
                other => Some(other.parse()?),
            };
        }

        kv.set_list("level.hidden", &mut self.level.hidden_sizes)?;
        kv.set("level.epochs", &mut self.level.epochs)?;
        kv.set("level.batch_size", &mut self.level.batch_size)?;
        kv.set("level.lr", &mut self.level.adam.lr)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let frac = |name: &str, v: f64, lo_open: bool| -> Result<()> {
            let ok = if lo_open {
                v > 0.0 && v < 1.0
            } else {
                (0.0..1.0).contains(&v)
            };
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} out of range")))
            }
        };
        frac("split.train_frac", self.train_frac, true)?;
        frac("split.support_frac", self.support_frac, true)?;
        frac("split.holdout_frac", self.holdout_frac, false)?;
        if self.models.is_empty() {
            return Err(Error::Config("at least one base model is required".into()));
        }
        self.meta.validate()?;
        if self.pretrain.batch_size == 0 || self.level.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        match &self.dataset {
            DatasetSource::Synthetic(s) => s.validate()?,
            DatasetSource::MovieLens { dir, .. } => {
                for f in ["ratings.dat", "users.dat", "movies.dat"] {
                    let p = dir.join(f);
                    if !p.is_file() {
                        return Err(Error::Config(format!("missing MovieLens file {}", p.display())));
                    }
                }
            }
            DatasetSource::Dump { path, .. } => {
                if !path.is_file() {
                    return Err(Error::Config(format!("dump {} does not exist", path.display())));
                }
            }
        }
        Ok(())
    }

    /// Fully-resolved configuration in the input format, keys sorted.
    pub fn render(&self) -> String {
        let list = |xs: &[usize]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut kv: BTreeMap<&str, String> = BTreeMap::new();
        kv.insert("seed", self.seed.to_string());
        match &self.dataset {
            DatasetSource::Synthetic(s) => {
                kv.insert("dataset", "synthetic".into());
                kv.insert("synthetic.num_users", s.num_users.to_string());
                kv.insert("synthetic.samples_per_user", s.samples_per_user.to_string());
                kv.insert(
                    "synthetic.clusters",
                    s.clusters.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
                );
                kv.insert(
                    "synthetic.cluster_weights",
                    s.cluster_weights
                        .iter()
                        .map(|w| w.to_string())
                        .collect::<Vec<_>>()
                        .join(","),
                );
                kv.insert("synthetic.segments_per_cluster", s.segments_per_cluster.to_string());
                kv.insert("synthetic.item_fields", s.item_fields.to_string());
                kv.insert("synthetic.values_per_field", s.values_per_field.to_string());
                kv.insert("synthetic.signal_scale", s.signal_scale.to_string());
                kv.insert("synthetic.noise", s.noise.to_string());
            }
            DatasetSource::MovieLens { dir, max_users } | DatasetSource::Dump { path: dir, max_users } => {
                let kind = if matches!(self.dataset, DatasetSource::MovieLens { .. }) {
                    "movielens"
                } else {
                    "dump"
                };
                kv.insert("dataset", kind.into());
                kv.insert("dataset.path", dir.display().to_string());
                if let Some(m) = max_users {
                    kv.insert("dataset.max_users", m.to_string());
                }
            }
        }
        kv.insert("split.train_frac", self.train_frac.to_string());
        kv.insert("split.support_frac", self.support_frac.to_string());
        kv.insert("split.holdout_frac", self.holdout_frac.to_string());
        kv.insert(
            "models",
            self.models
                .iter()
                .map(|m| m.name().to_ascii_lowercase())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv.insert("model.latent_dim", self.latent_dim.to_string());
        kv.insert("model.hidden", list(&self.deep_hidden));
        kv.insert("model.keep_prob", self.keep_prob.to_string());
        kv.insert("model.ignored_fields", self.model_ignored_fields.join(","));
        kv.insert("selector.embed_dim", self.selector_embed_dim.to_string());
        kv.insert("selector.hidden", list(&self.selector_hidden));
        kv.insert("selector.ignored_fields", self.selector_ignored_fields.join(","));
        kv.insert("pretrain.epochs", self.pretrain.epochs.to_string());
        kv.insert("pretrain.batch_size", self.pretrain.batch_size.to_string());
        kv.insert("pretrain.lr", self.pretrain.adam.lr.to_string());
        kv.insert("pretrain.include_query", self.pretrain_include_query.to_string());
        kv.insert("ftrl.alpha", self.pretrain.ftrl.alpha.to_string());
        kv.insert("ftrl.beta", self.pretrain.ftrl.beta.to_string());
        kv.insert("ftrl.l1", self.pretrain.ftrl.l1.to_string());
        kv.insert("ftrl.l2", self.pretrain.ftrl.l2.to_string());
        let m = &self.meta;
        kv.insert("meta.m", m.m.to_string());
        kv.insert("meta.episodes", m.episodes.to_string());
        kv.insert("meta.alpha_init", m.alpha_init.to_string());
        kv.insert("meta.beta", m.beta().to_string());
        kv.insert("meta.alpha_max", m.alpha_max.to_string());
        kv.insert("meta.alpha_learned", m.alpha_learned.to_string());
        kv.insert("meta.mode", m.mode.to_string());
        kv.insert("meta.outer", m.outer.to_string());
        kv.insert("meta.finetune_steps", m.finetune_steps.to_string());
        kv.insert("meta.variant", self.variant.map_or("both".into(), |v| v.to_string()));
        kv.insert("level.hidden", list(&self.level.hidden_sizes));
        kv.insert("level.epochs", self.level.epochs.to_string());
        kv.insert("level.batch_size", self.level.batch_size.to_string());
        kv.insert("level.lr", self.level.adam.lr.to_string());
        let mut out = String::new();
        for (k, v) in kv {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn digest_hex(&self) -> String {
        Sha256::digest(self.render().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Variants to train, in a fixed order.
    pub fn variants(&self) -> Vec<Variant> {
        match self.variant {
            Some(v) => vec![v],
            None => vec![Variant::Simplified, Variant::Full],
        }
    }
}

struct Kv {
    map: BTreeMap<String, (usize, String)>,
}

impl Kv {
    fn bad(line: usize, key: &str, v: &str) -> Error {
        Error::Parse {
            path: "<config>".into(),
            line,
            msg: format!("invalid value {v:?} for {key}"),
        }
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|_| Self::bad(line, key, &v)),
        }
    }

    fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .map(|t| t.parse().map_err(|_| Self::bad(line, key, &v)))
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn set_list<T: FromStr>(&mut self, key: &str, slot: &mut Vec<T>) -> Result<()> {
        if let Some(v) = self.take_list(key)? {
            *slot = v;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta::MetaMode;

    #[test]
    fn seed_is_mandatory() {
        assert!(matches!(
            ExperimentConfig::parse("dataset = synthetic\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = ExperimentConfig::parse("seed = 1\n\nbogus = 3\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn render_roundtrips() {
        let cfg = ExperimentConfig::parse(
            "seed = 7 # comment\nmodels = lr, fm\nmeta.variant = simplified\nmodel.ignored_fields = user_id,segment\nmeta.mode = first-order\nsynthetic.cluster_weights = 3,2\n",
        )
        .unwrap();
        assert_eq!(cfg.models, vec![ModelKind::Lr, ModelKind::Fm]);
        assert_eq!(cfg.variant, Some(Variant::Simplified));
        assert_eq!(cfg.meta.mode, MetaMode::FirstOrder);
        let again = ExperimentConfig::parse(&cfg.render()).unwrap();
        assert_eq!(again.render(), cfg.render());
        assert_eq!(again.digest_hex(), cfg.digest_hex());
    }

    #[test]
    fn missing_paths_fail_validation() {
        let err = ExperimentConfig::parse("seed = 1\ndataset = dump\ndataset.path = /nonexistent/x.tsv\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
