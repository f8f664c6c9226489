//! End-to-end experiment stages shared by the CLI and the acceptance tests.
//!
//! Artifacts in the output directory, all stamped with the seed `S`:
//!
//! | stage | files |
//! |---|---|
//! | ingest | `dataset-sS.tsv`, `exclusions-sS.csv`, `stats-sS.txt`, `clusters-sS.csv` (synthetic) |
//! | pretrain | `bases-sS.ckpt`, `pretrain_log-sS.csv` |
//! | meta-train | `meta-{full,simplified}-sS.ckpt`, `train_log-{variant}-sS.csv` |
//! | evaluate | `report-sS.csv`, `per_user_loss-sS.csv`, `proportions-sS.csv`, `meta_features-sS.csv`, `lambda-{variant}-sS.csv`, `manifest-sS.txt` |

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::baselines::{
    meta_feature_rows, meta_features_csv, perfect_selector, train_level_selector, Granularity, MetaFeatureRow,
    PredictionTable,
};
use crate::checkpoint::{descriptor_map, read_checkpoint, write_checkpoint, Checkpoint, NamedBank};
use crate::config::{DatasetSource, ExperimentConfig};
use crate::data::{
    generate_synthetic, load_movielens, read_dump, split_users, write_dump, ClusterFamily, Dataset, DatasetStats,
    Exclusion, Sample, UserDataset, UserId,
};
use crate::eval::{
    best_model_proportions, mean_and_variance, per_user_loss_csv, report_csv, EvalRecord, MethodLosses, Proportions,
    ReportRow, Scope,
};
use crate::meta::{
    meta_test_all, meta_train, EpisodeLog, MetaMode, MetaState, OuterOptimizer, Variant, TRAIN_LOG_HEADER,
};
use crate::models::{pretrain, Model, ModelKind, ModelSpec, ParamBank, ParamSegment, PretrainLog};
use crate::numkit::{DenseVec, Rng};
use crate::selector::{Ensemble, Selector, SelectorSpec};
use crate::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

// Independent random streams derived from the experiment seed.
const STREAM_HOLDOUT: u64 = 1;
const STREAM_MODEL_INIT: u64 = 2;
const STREAM_PRETRAIN: u64 = 3;
const STREAM_SELECTOR_INIT: u64 = 4;
const STREAM_META: u64 = 5;
const STREAM_LEVEL: u64 = 7;

/// A pipeline failure tagged with the stage that produced it.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub error: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {} failed: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, StageError>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, StageError> {
        self.map_err(|error| StageError { stage, error })
    }
}

pub fn artifact(out: &Path, stem: &str, seed: u64, ext: &str) -> PathBuf {
    out.join(format!("{stem}-s{seed}.{ext}"))
}

pub fn meta_ckpt_path(out: &Path, variant: Variant, seed: u64) -> PathBuf {
    artifact(out, &format!("meta-{variant}"), seed, "ckpt")
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Loaded, split and partitioned data plus the model layouts it implies.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub dataset: Dataset,
    pub users: Vec<UserDataset>,
    pub exclusions: Vec<Exclusion>,
    /// Indices into `users`.
    pub train_users: Vec<usize>,
    pub test_users: Vec<usize>,
    /// Synthetic only: generating cluster family of each user.
    pub clusters: Option<BTreeMap<UserId, ClusterFamily>>,
    pub items: Option<usize>,
    pub models: Vec<Model>,
    pub selector: Selector,
}

fn truncate_users(mut ds: Dataset, max_users: Option<usize>) -> Dataset {
    if let Some(m) = max_users {
        ds.users.truncate(m);
    }
    ds
}

fn resolve_fields(names: &[String], ds: &Dataset) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| {
            ds.space
                .field_names()
                .iter()
                .position(|f| f == n)
                .or_else(|| n.parse().ok().filter(|&i: &usize| i < ds.space.num_fields()))
                .ok_or_else(|| Error::Config(format!("unknown field {n:?}")))
        })
        .collect()
}

impl Prepared {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (dataset, clusters, items) = match &config.dataset {
            DatasetSource::Synthetic(spec) => {
                let data = generate_synthetic(spec)?;
                let fam = data
                    .dataset
                    .users
                    .iter()
                    .map(|u| (u.user_id, data.truth.family(data.cluster_of(u.user_id))))
                    .collect();
                (data.dataset, Some(fam), None)
            }
            DatasetSource::MovieLens { dir, max_users } => {
                let (ds, stats) =
                    load_movielens(dir.join("ratings.dat"), dir.join("users.dat"), dir.join("movies.dat"))?;
                (truncate_users(ds, *max_users), None, Some(stats.distinct_items))
            }
            DatasetSource::Dump { path, max_users } => (truncate_users(read_dump(path)?, *max_users), None, None),
        };
        let (users, exclusions) = split_users(&dataset, config.train_frac, config.support_frac);
        if users.is_empty() {
            return Err(Error::Empty("admitted users"));
        }
        let all: Vec<usize> = (0..users.len()).collect();
        let (train_users, test_users) = if config.holdout_frac > 0.0 && users.len() >= 2 {
            let n_hold = ((config.holdout_frac * users.len() as f64).round() as usize).clamp(1, users.len() - 1);
            let mut rng = Rng::new(config.seed).fork(STREAM_HOLDOUT);
            let mut held = rng.choose_distinct(users.len(), n_hold);
            held.sort_unstable();
            let train = all.iter().copied().filter(|i| held.binary_search(i).is_err()).collect();
            (train, held)
        } else {
            (all.clone(), all)
        };
        let nf = dataset.space.num_fields();
        let model_ignored = resolve_fields(&config.model_ignored_fields, &dataset)?;
        let models = config
            .models
            .iter()
            .map(|&k| {
                let spec = ModelSpec {
                    kind: k,
                    latent_dim: config.latent_dim,
                    num_fields: nf,
                    hidden_sizes: config.deep_hidden.clone(),
                    keep_prob: config.keep_prob,
                    ignored_fields: model_ignored.clone(),
                };
                Model::new(spec, &dataset.space)
            })
            .collect::<Result<Vec<_>>>()?;
        let selector = Selector::new(
            SelectorSpec {
                embed_dim: config.selector_embed_dim,
                hidden_sizes: config.selector_hidden.clone(),
                k: models.len(),
                num_fields: nf,
                ignored_fields: resolve_fields(&config.selector_ignored_fields, &dataset)?,
            },
            &dataset.space,
        )?;
        Ok(Prepared {
            config: config.clone(),
            dataset,
            users,
            exclusions,
            train_users,
            test_users,
            clusters,
            items,
            models,
            selector,
        })
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    fn rng(&self, stream: u64) -> Rng {
        Rng::new(self.config.seed).fork(stream)
    }

    pub fn disjoint(&self) -> bool {
        self.config.holdout_frac > 0.0 && self.train_users != self.test_users
    }

    pub fn meta_train_users(&self) -> Vec<UserDataset> {
        self.train_users.iter().map(|&i| self.users[i].clone()).collect()
    }

    pub fn meta_test_users(&self) -> Vec<UserDataset> {
        self.test_users.iter().map(|&i| self.users[i].clone()).collect()
    }

    pub fn model_names(&self) -> Vec<String> {
        self.models.iter().map(|m| m.kind().name().to_string()).collect()
    }

    pub fn model_index(&self, kind: ModelKind) -> Option<usize> {
        self.models.iter().position(|m| m.kind() == kind)
    }

    pub fn ensemble(&self) -> Result<Ensemble> {
        Ensemble::new(self.models.clone(), self.selector.clone())
    }

    pub fn digest(&self) -> [u8; 32] {
        self.dataset.space.digest()
    }

    pub fn initial_selector(&self) -> ParamBank {
        self.selector.init_params(&mut self.rng(STREAM_SELECTOR_INIT))
    }
}

// ---------------------------------------------------------------- ingest

pub struct IngestOutput {
    pub dump_path: PathBuf,
    pub dump_sha256: String,
    pub stats: DatasetStats,
}

pub fn ingest(p: &Prepared, out: &Path) -> Result<IngestOutput> {
    let seed = p.seed();
    let mut dump = Vec::new();
    write_dump(&p.dataset, &mut dump).map_err(|e| Error::io(out, e))?;
    let dump_path = artifact(out, "dataset", seed, "tsv");
    write_file(&dump_path, &dump)?;
    let mut excl = String::from("user_id,num_samples,reason\n");
    for e in &p.exclusions {
        let _ = writeln!(excl, "{},{},{}", e.user_id, e.num_samples, e.reason);
    }
    write_file(&artifact(out, "exclusions", seed, "csv"), excl)?;
    let stats = DatasetStats::of(&p.dataset, p.items);
    let mut stats_txt = stats.render();
    let _ = writeln!(
        stats_txt,
        "admitted_users={}\nexcluded_users={}",
        p.users.len(),
        p.exclusions.len()
    );
    write_file(&artifact(out, "stats", seed, "txt"), stats_txt)?;
    if let Some(c) = &p.clusters {
        let mut csv = String::from("user_id,family\n");
        for (u, f) in c {
            let _ = writeln!(csv, "{u},{f}");
        }
        write_file(&artifact(out, "clusters", seed, "csv"), csv)?;
    }
    Ok(IngestOutput {
        dump_path,
        dump_sha256: hex(&Sha256::digest(&dump)),
        stats,
    })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// -------------------------------------------------------------- pretrain

/// Initialise and pretrain every base model on the support portions of the
/// meta-training users, or their whole train portions with
/// `pretrain.include_query`.
pub fn pretrain_bases(p: &Prepared) -> Result<(Vec<ParamBank>, Vec<PretrainLog>)> {
    let mut init = p.rng(STREAM_MODEL_INIT);
    let mut banks: Vec<ParamBank> = p.models.iter().map(|m| m.init_params(&mut init)).collect();
    let include_query = p.config.pretrain_include_query;
    let samples: Vec<&Sample> = p
        .train_users
        .iter()
        .map(|&i| &p.users[i])
        .flat_map(|u| if include_query { u.train() } else { u.support() })
        .collect();
    let logs = pretrain(
        &p.models,
        &mut banks,
        &samples,
        &p.config.pretrain,
        &p.rng(STREAM_PRETRAIN),
    )?;
    Ok((banks, logs))
}

pub fn save_bases(p: &Prepared, banks: &[ParamBank], path: &Path) -> Result<()> {
    let ckpt = Checkpoint {
        digest: p.digest(),
        banks: p
            .models
            .iter()
            .zip(banks)
            .map(|(m, b)| NamedBank {
                descriptor: m.spec().to_string(),
                bank: b.clone(),
            })
            .collect(),
    };
    write_checkpoint(path, &ckpt)
}

fn ckpt_err(path: &Path, msg: String) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    }
}

fn check_model_banks(p: &Prepared, banks: &[&NamedBank], path: &Path) -> Result<Vec<ParamBank>> {
    if banks.len() != p.models.len() {
        return Err(ckpt_err(
            path,
            format!("{} model banks, config has {}", banks.len(), p.models.len()),
        ));
    }
    p.models
        .iter()
        .zip(banks)
        .map(|(m, nb)| {
            let spec: ModelSpec = nb.descriptor.parse()?;
            if &spec != m.spec() {
                return Err(ckpt_err(
                    path,
                    format!("model {} does not match config ({})", nb.descriptor, m.spec()),
                ));
            }
            if nb.bank.segments != m.segments() {
                return Err(ckpt_err(path, format!("{} segment table mismatch", m.kind())));
            }
            Ok(nb.bank.clone())
        })
        .collect()
}

fn model_banks(ckpt: &Checkpoint) -> Vec<&NamedBank> {
    ckpt.banks
        .iter()
        .filter(|b| {
            descriptor_map(&b.descriptor)
                .ok()
                .and_then(|m| m.get("kind").cloned())
                .is_some_and(|k| k.parse::<ModelKind>().is_ok())
        })
        .collect()
}

pub fn load_bases(p: &Prepared, path: &Path) -> Result<Vec<ParamBank>> {
    let ckpt = read_checkpoint(path, Some(&p.digest()))?;
    check_model_banks(p, &model_banks(&ckpt), path)
}

pub fn pretrain_log_csv(logs: &[PretrainLog]) -> String {
    let mut out = String::from("model,epoch,mean_loss\n");
    for l in logs {
        let _ = writeln!(out, "{},{},{:.10}", l.model, l.epoch, l.mean_loss);
    }
    out
}

// ------------------------------------------------------------ meta-train

pub fn new_meta_state(p: &Prepared, bases: &[ParamBank], variant: Variant) -> Result<MetaState> {
    let cfg = crate::meta::MetaConfig {
        variant,
        ..p.config.meta.clone()
    };
    MetaState::new(p.ensemble()?, bases, &p.initial_selector(), &cfg)
}

pub fn train_meta(
    p: &Prepared,
    bases: &[ParamBank],
    variant: Variant,
    threads: usize,
) -> Result<(MetaState, Vec<EpisodeLog>)> {
    let mut state = new_meta_state(p, bases, variant)?;
    let stream = STREAM_META + matches!(variant, Variant::Full) as u64;
    let mut rng = p.rng(stream);
    let users = p.meta_train_users();
    let m = p.config.meta.m.min(users.iter().filter(|u| u.is_admitted()).count());
    let logs = meta_train(&mut state, &users, m, p.config.meta.episodes, &mut rng, threads)?;
    Ok((state, logs))
}

pub fn train_log_csv(logs: &[EpisodeLog]) -> String {
    let mut out = String::from(TRAIN_LOG_HEADER);
    out.push('\n');
    for l in logs {
        out.push_str(&l.csv_row());
        out.push('\n');
    }
    out
}

fn single_bank(values: Vec<f64>, name: &str) -> Result<ParamBank> {
    let len = values.len();
    ParamBank::new(
        DenseVec::new(values)?,
        vec![ParamSegment {
            name: name.into(),
            offset: 0,
            len,
            shape: vec![len],
        }],
    )
}

pub fn save_meta(p: &Prepared, state: &MetaState, path: &Path) -> Result<()> {
    let (thetas, phi) = state.ensemble.split(&state.params)?;
    let mut banks: Vec<NamedBank> = p
        .models
        .iter()
        .zip(thetas)
        .map(|(m, b)| NamedBank {
            descriptor: m.spec().to_string(),
            bank: b,
        })
        .collect();
    banks.push(NamedBank {
        descriptor: p.selector.spec().descriptor(),
        bank: phi,
    });
    banks.push(NamedBank {
        descriptor: "kind=alpha".into(),
        bank: single_bank(state.alpha.clone(), "alpha")?,
    });
    banks.push(NamedBank {
        descriptor: format!(
            "kind=meta variant={} mode={} outer={} beta={} alpha_max={} alpha_learned={} finetune_steps={}",
            state.variant,
            state.mode,
            state.outer,
            state.beta,
            state.alpha_max,
            state.alpha_learned,
            state.finetune_steps
        ),
        bank: ParamBank::new(DenseVec::new(vec![])?, vec![])?,
    });
    write_checkpoint(
        path,
        &Checkpoint {
            digest: p.digest(),
            banks,
        },
    )
}

pub fn load_meta(p: &Prepared, path: &Path) -> Result<MetaState> {
    let ckpt = read_checkpoint(path, Some(&p.digest()))?;
    let thetas = check_model_banks(p, &model_banks(&ckpt), path)?;
    let sel = ckpt.find("selector");
    let [sel] = sel.as_slice() else {
        return Err(ckpt_err(path, "expected one selector bank".into()));
    };
    let spec: SelectorSpec = sel.descriptor.parse()?;
    if &spec != p.selector.spec() {
        return Err(ckpt_err(path, "selector does not match config".into()));
    }
    let alpha = ckpt.find("alpha");
    let [alpha] = alpha.as_slice() else {
        return Err(ckpt_err(path, "expected one alpha bank".into()));
    };
    let meta = ckpt.find("meta");
    let [meta] = meta.as_slice() else {
        return Err(ckpt_err(path, "expected one meta descriptor".into()));
    };
    let kv = descriptor_map(&meta.descriptor)?;
    let field = |k: &str| {
        kv.get(k)
            .cloned()
            .ok_or_else(|| ckpt_err(path, format!("meta descriptor lacks {k}")))
    };
    let bad = |k: &str| ckpt_err(path, format!("bad meta {k}"));
    let ensemble = p.ensemble()?;
    let params = ensemble.join(&thetas, &sel.bank)?;
    if alpha.bank.len() != params.len() {
        return Err(ckpt_err(path, "alpha length mismatch".into()));
    }
    Ok(MetaState {
        ensemble,
        params,
        alpha: alpha.bank.values().to_vec(),
        beta: field("beta")?.parse().map_err(|_| bad("beta"))?,
        alpha_max: field("alpha_max")?.parse().map_err(|_| bad("alpha_max"))?,
        alpha_learned: field("alpha_learned")?.parse().map_err(|_| bad("alpha_learned"))?,
        mode: field("mode")?.parse::<MetaMode>()?,
        variant: field("variant")?.parse::<Variant>()?,
        outer: field("outer")?.parse::<OuterOptimizer>()?,
        finetune_steps: field("finetune_steps")?.parse().map_err(|_| bad("finetune_steps"))?,
    })
}

// -------------------------------------------------------------- evaluate

pub const METHOD_SAMPLE_ORACLE: &str = "Perfect Sample-level Selector";
pub const METHOD_USER_ORACLE: &str = "Perfect User-level Selector";
pub const METHOD_SAMPLE_LEVEL: &str = "Sample-level Selector";
pub const METHOD_USER_LEVEL: &str = "User-level Selector";
pub const METHOD_META_FULL: &str = "MetaSelector";
pub const METHOD_META_SIMPLIFIED: &str = "MetaSelector-simplified";
pub const METHOD_META_POOLED: &str = "MetaSelector-simplified-pooled";

pub fn method_name(variant: Variant) -> &'static str {
    match variant {
        Variant::Full => METHOD_META_FULL,
        Variant::Simplified => METHOD_META_SIMPLIFIED,
    }
}

/// Predictions of one method on the evaluation set, aligned with
/// [`Evaluation::labels`].
#[derive(Debug, Clone, PartialEq)]
pub struct MethodResult {
    pub name: String,
    pub single: bool,
    pub probs: Vec<f64>,
    pub record: EvalRecord,
}

/// A user id with that user's mean test-time λ.
pub type UserLambda = (UserId, Vec<f64>);

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub labels: Vec<u8>,
    pub user_ids: Vec<UserId>,
    pub methods: Vec<MethodResult>,
    pub proportions: Proportions,
    pub model_names: Vec<String>,
    /// Rows the level selectors were trained on.
    pub meta_features: Vec<MetaFeatureRow>,
    /// Mean test-time λ per evaluated user, per trained variant.
    pub lambdas: Vec<(Variant, Vec<UserLambda>)>,
}

impl Evaluation {
    pub fn method(&self, name: &str) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.name == name)
    }

    pub fn best_single(&self) -> Option<&MethodResult> {
        self.methods
            .iter()
            .filter(|m| m.single)
            .min_by(|a, b| a.record.mean_logloss.total_cmp(&b.record.mean_logloss))
    }

    pub fn best_single_auc(&self) -> Option<f64> {
        self.methods
            .iter()
            .filter(|m| m.single)
            .filter_map(|m| m.record.auc)
            .reduce(f64::max)
    }

    /// Per-user mean log-loss of a method, users ascending.
    pub fn per_user_losses(&self, method: &MethodResult) -> Vec<(UserId, f64)> {
        let mut acc: BTreeMap<UserId, (f64, usize)> = BTreeMap::new();
        for ((&u, &p), &y) in self.user_ids.iter().zip(&method.probs).zip(&self.labels) {
            let e = acc.entry(u).or_default();
            e.0 += crate::numkit::logloss_unchecked(crate::numkit::clamp_prob(p), y);
            e.1 += 1;
        }
        acc.into_iter().map(|(u, (s, n))| (u, s / n as f64)).collect()
    }

    pub fn per_user_variance(&self, method: &MethodResult) -> f64 {
        let xs: Vec<f64> = self.per_user_losses(method).into_iter().map(|(_, l)| l).collect();
        mean_and_variance(&xs).1
    }

    pub fn report_rows(&self) -> Vec<ReportRow> {
        self.methods
            .iter()
            .map(|m| ReportRow {
                method: m.name.clone(),
                auc: m.record.auc,
                logloss: m.record.mean_logloss,
                single: m.single,
            })
            .collect()
    }

    pub fn report_csv(&self) -> Result<String> {
        report_csv(&self.report_rows())
    }

    pub fn per_user_loss_csv(&self) -> String {
        let methods: Vec<MethodLosses> = self
            .methods
            .iter()
            .map(|m| MethodLosses {
                method: m.name.clone(),
                losses: self.per_user_losses(m),
            })
            .collect();
        per_user_loss_csv(&methods)
    }
}

fn prediction_table(
    p: &Prepared,
    bases: &[ParamBank],
    users: &[UserDataset],
    part: fn(&UserDataset) -> &[Sample],
) -> Result<PredictionTable> {
    let mut table = PredictionTable {
        probs: vec![Vec::new(); p.models.len()],
        labels: Vec::new(),
        user_ids: Vec::new(),
    };
    for u in users {
        for x in part(u) {
            for (k, (m, b)) in p.models.iter().zip(bases).enumerate() {
                table.probs[k].push(m.predict(b.values(), x)?);
            }
            table.labels.push(x.label);
            table.user_ids.push(u.user_id);
        }
    }
    Ok(table)
}

fn method(name: &str, single: bool, probs: Vec<f64>, labels: &[u8]) -> Result<MethodResult> {
    let record = EvalRecord::compute(Scope::Global, &probs, labels)?;
    Ok(MethodResult {
        name: name.to_string(),
        single,
        probs,
        record,
    })
}

/// Evaluate the single models, both oracles, both trained level selectors
/// and every supplied meta-trained state on the test portions of the
/// meta-test users.
pub fn evaluate(p: &Prepared, bases: &[ParamBank], metas: &[MetaState], threads: usize) -> Result<Evaluation> {
    let test_users = p.meta_test_users();
    let table = prediction_table(p, bases, &test_users, UserDataset::test)?;
    if table.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let labels = table.labels.clone();
    let names = p.model_names();
    let mut methods = Vec::new();
    for (k, name) in names.iter().enumerate() {
        methods.push(method(name, true, table.probs[k].clone(), &labels)?);
    }
    for (name, g) in [
        (METHOD_SAMPLE_ORACLE, Granularity::Sample),
        (METHOD_USER_ORACLE, Granularity::User),
    ] {
        methods.push(method(name, false, perfect_selector(g, &table)?.probs, &labels)?);
    }

    let train_table = prediction_table(p, bases, &p.meta_train_users(), UserDataset::query)?;
    let train_rows = meta_feature_rows(&train_table)?;
    let test_rows = meta_feature_rows(&table)?;
    for (i, (name, g)) in [
        (METHOD_SAMPLE_LEVEL, Granularity::Sample),
        (METHOD_USER_LEVEL, Granularity::User),
    ]
    .into_iter()
    .enumerate()
    {
        let mut rng = p.rng(STREAM_LEVEL + i as u64);
        let sel = train_level_selector(g, &train_rows, &p.config.level, &mut rng)?;
        methods.push(method(name, false, sel.predict(&test_rows), &labels)?);
    }

    let mut lambdas = Vec::new();
    for state in metas {
        let preds = meta_test_all(state, &test_users, threads)?;
        let probs: Vec<f64> = preds.iter().flat_map(|u| u.probs.iter().copied()).collect();
        methods.push(method(method_name(state.variant), false, probs, &labels)?);
        if state.variant == Variant::Simplified {
            let pooled: Vec<f64> = preds
                .iter()
                .flat_map(|u| u.pooled_probs.clone().unwrap_or_else(|| u.probs.clone()))
                .collect();
            methods.push(method(METHOD_META_POOLED, false, pooled, &labels)?);
        }
        lambdas.push((
            state.variant,
            preds.into_iter().map(|u| (u.user_id, u.mean_lambda)).collect(),
        ));
    }

    let per_user: Vec<Vec<f64>> = table.per_user_model_losses().into_iter().map(|(_, l)| l).collect();
    let proportions = best_model_proportions(&per_user, p.models.len())?;
    Ok(Evaluation {
        labels,
        user_ids: table.user_ids,
        methods,
        proportions,
        model_names: names,
        meta_features: train_rows,
        lambdas,
    })
}

pub fn manifest(p: &Prepared, variants: &[Variant]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "version = {VERSION}");
    let _ = writeln!(out, "seed = {}", p.seed());
    let _ = writeln!(out, "config_sha256 = {}", p.config.digest_hex());
    let _ = writeln!(out, "feature_space_sha256 = {}", p.dataset.space.digest_hex());
    let _ = writeln!(
        out,
        "user_partition = {}",
        if p.disjoint() { "disjoint" } else { "overlapping" }
    );
    let _ = writeln!(out, "meta_train_users = {}", p.train_users.len());
    let _ = writeln!(out, "meta_test_users = {}", p.test_users.len());
    let _ = writeln!(out, "excluded_users = {}", p.exclusions.len());
    let _ = writeln!(
        out,
        "variants = {}",
        variants.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    );
    out.push_str("\n# resolved config\n");
    out.push_str(&p.config.render());
    out
}

/// Mean test-time selector weights per user.
pub fn lambda_csv(names: &[String], lambdas: &[(UserId, Vec<f64>)]) -> String {
    let mut out = String::from("user_id");
    for n in names {
        let _ = write!(out, ",{n}");
    }
    out.push('\n');
    for (u, l) in lambdas {
        let _ = write!(out, "{u}");
        for x in l {
            let _ = write!(out, ",{x:.6}");
        }
        out.push('\n');
    }
    out
}

pub fn write_evaluation(p: &Prepared, ev: &Evaluation, variants: &[Variant], out: &Path) -> Result<String> {
    let seed = p.seed();
    let report = ev.report_csv()?;
    write_file(&artifact(out, "report", seed, "csv"), &report)?;
    write_file(&artifact(out, "per_user_loss", seed, "csv"), ev.per_user_loss_csv())?;
    write_file(
        &artifact(out, "proportions", seed, "csv"),
        ev.proportions.csv(&ev.model_names),
    )?;
    write_file(
        &artifact(out, "meta_features", seed, "csv"),
        meta_features_csv(&ev.meta_features),
    )?;
    for (v, lambdas) in &ev.lambdas {
        write_file(
            &artifact(out, &format!("lambda-{v}"), seed, "csv"),
            lambda_csv(&ev.model_names, lambdas),
        )?;
    }
    write_file(&artifact(out, "manifest", seed, "txt"), manifest(p, variants))?;
    Ok(report)
}

// ------------------------------------------------------------------- run

/// Everything `run` produced, for callers that want more than the files.
pub struct RunOutput {
    pub prepared: Prepared,
    pub bases: Vec<ParamBank>,
    pub metas: Vec<MetaState>,
    pub evaluation: Evaluation,
    pub report: String,
}

fn create_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

pub fn stage_pretrain(p: &Prepared, out: &Path) -> Result<Vec<ParamBank>> {
    let (bases, logs) = pretrain_bases(p)?;
    write_file(&artifact(out, "pretrain_log", p.seed(), "csv"), pretrain_log_csv(&logs))?;
    save_bases(p, &bases, &artifact(out, "bases", p.seed(), "ckpt"))?;
    Ok(bases)
}

pub fn stage_meta_train(p: &Prepared, bases: &[ParamBank], out: &Path, threads: usize) -> Result<Vec<MetaState>> {
    let mut metas = Vec::new();
    for v in p.config.variants() {
        let (state, logs) = train_meta(p, bases, v, threads)?;
        write_file(
            &artifact(out, &format!("train_log-{v}"), p.seed(), "csv"),
            train_log_csv(&logs),
        )?;
        save_meta(p, &state, &meta_ckpt_path(out, v, p.seed()))?;
        metas.push(state);
    }
    Ok(metas)
}

/// The full experiment: ingest, pretrain, meta-train, evaluate, report.
/// Artifacts of completed stages stay on disk when a later stage fails.
pub fn run(config: &ExperimentConfig, out: &Path, threads: usize) -> std::result::Result<RunOutput, StageError> {
    create_dir(out).stage("setup")?;
    let p = Prepared::new(config).stage("ingest")?;
    ingest(&p, out).stage("ingest")?;
    let bases = stage_pretrain(&p, out).stage("pretrain")?;
    let metas = stage_meta_train(&p, &bases, out, threads).stage("meta-train")?;
    let evaluation = evaluate(&p, &bases, &metas, threads).stage("evaluate")?;
    let report = write_evaluation(&p, &evaluation, &config.variants(), out).stage("report")?;
    Ok(RunOutput {
        prepared: p,
        bases,
        metas,
        evaluation,
        report,
    })
}
