//! Competing selectors: perfect (oracle) sample- and user-level selectors and
//! MLP classifiers trained on base-model predictions.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::data::UserId;
use crate::dense::Mlp;
use crate::eval::{argmin, EvalRecord, Scope};
use crate::models::{Adam, AdamConfig};
use crate::numkit::{clamp_prob, logloss_unchecked, softmax_into, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Granularity {
    Sample,
    User,
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample" => Ok(Granularity::Sample),
            "user" => Ok(Granularity::User),
            other => Err(Error::Config(format!("unknown granularity {other:?}"))),
        }
    }
}

/// Predictions of all K models on a common evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTable {
    /// `probs[k][i]`: model `k` on sample `i`.
    pub probs: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    pub user_ids: Vec<UserId>,
}

impl PredictionTable {
    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.probs.is_empty() {
            return Err(Error::Empty("model predictions"));
        }
        if self.user_ids.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                found: self.user_ids.len(),
            });
        }
        for p in &self.probs {
            if p.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "missing predictions: {} of {n} samples covered",
                    p.len()
                )));
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Sample indices of each user, users ascending.
    pub fn by_user(&self) -> BTreeMap<UserId, Vec<usize>> {
        let mut m: BTreeMap<UserId, Vec<usize>> = BTreeMap::new();
        for (i, &u) in self.user_ids.iter().enumerate() {
            m.entry(u).or_default().push(i);
        }
        m
    }

    fn loss(&self, k: usize, i: usize) -> f64 {
        logloss_unchecked(clamp_prob(self.probs[k][i]), self.labels[i])
    }

    /// Per-user mean loss of each model: `(user, [loss_k])`.
    pub fn per_user_model_losses(&self) -> Vec<(UserId, Vec<f64>)> {
        self.by_user()
            .into_iter()
            .map(|(u, idx)| {
                let losses = (0..self.k())
                    .map(|k| idx.iter().map(|&i| self.loss(k, i)).sum::<f64>() / idx.len() as f64)
                    .collect();
                (u, losses)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleAssignment {
    pub granularity: Granularity,
    /// Sample index or user id → chosen model.
    pub choice: BTreeMap<u64, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub assignment: OracleAssignment,
    pub probs: Vec<f64>,
    pub record: EvalRecord,
}

/// Pick, per sample or per user, the model with the lowest log-loss (ties to
/// the lowest index) and evaluate its predictions.
pub fn perfect_selector(granularity: Granularity, table: &PredictionTable) -> Result<OracleResult> {
    table.validate()?;
    let n = table.len();
    let mut per_sample = vec![0usize; n];
    let mut choice = BTreeMap::new();
    match granularity {
        Granularity::Sample => {
            for (i, c) in per_sample.iter_mut().enumerate() {
                let losses: Vec<f64> = (0..table.k()).map(|k| table.loss(k, i)).collect();
                *c = argmin(&losses);
                choice.insert(i as u64, *c);
            }
        }
        Granularity::User => {
            let by_user = table.by_user();
            for (u, losses) in table.per_user_model_losses() {
                let best = argmin(&losses);
                choice.insert(u as u64, best);
                for &i in &by_user[&u] {
                    per_sample[i] = best;
                }
            }
        }
    }
    let probs: Vec<f64> = per_sample.iter().enumerate().map(|(i, &k)| table.probs[k][i]).collect();
    let record = EvalRecord::compute(Scope::Global, &probs, &table.labels)?;
    Ok(OracleResult {
        assignment: OracleAssignment { granularity, choice },
        probs,
        record,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaFeatureRow {
    pub user_id: UserId,
    pub sample_id: usize,
    pub probs: Vec<f64>,
    pub label: u8,
    /// Index of the model with the lowest log-loss on this row.
    pub class: usize,
}

impl MetaFeatureRow {
    pub fn new(user_id: UserId, sample_id: usize, probs: Vec<f64>, label: u8) -> Self {
        let losses: Vec<f64> = probs.iter().map(|&p| logloss_unchecked(clamp_prob(p), label)).collect();
        let class = argmin(&losses);
        MetaFeatureRow {
            user_id,
            sample_id,
            probs,
            label,
            class,
        }
    }
}

pub fn meta_feature_rows(table: &PredictionTable) -> Result<Vec<MetaFeatureRow>> {
    table.validate()?;
    Ok((0..table.len())
        .map(|i| {
            let probs = (0..table.k()).map(|k| table.probs[k][i]).collect();
            MetaFeatureRow::new(table.user_ids[i], i, probs, table.labels[i])
        })
        .collect())
}

pub fn meta_features_csv(rows: &[MetaFeatureRow]) -> String {
    let k = rows.first().map_or(0, |r| r.probs.len());
    let mut out = String::from("user_id,sample_id");
    for j in 1..=k {
        let _ = write!(out, ",p{j}");
    }
    out.push_str(",label,class\n");
    for r in rows {
        let _ = write!(out, "{},{}", r.user_id, r.sample_id);
        for p in &r.probs {
            let _ = write!(out, ",{p:.8}");
        }
        let _ = writeln!(out, ",{},{}", r.label, r.class);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelSelectorConfig {
    pub hidden_sizes: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for LevelSelectorConfig {
    fn default() -> Self {
        LevelSelectorConfig {
            hidden_sizes: vec![400, 400, 400],
            epochs: 10,
            batch_size: 1000,
            adam: AdamConfig::default(),
        }
    }
}

/// Classifier from the K base predictions to a distribution over models.
#[derive(Debug, Clone)]
pub struct LevelSelector {
    pub granularity: Granularity,
    mlp: Mlp,
    params: Vec<f64>,
}

impl LevelSelector {
    pub fn distribution(&self, probs: &[f64]) -> Vec<f64> {
        let cache = self.mlp.forward(&self.params, probs, None);
        let mut out = vec![0.0; self.mlp.output_dim()];
        softmax_into(cache.output(), &mut out);
        out
    }

    /// Final predictions: each row's base predictions weighted by the
    /// predicted distribution — per row for sample granularity, the mean over
    /// the user's rows for user granularity.
    pub fn predict(&self, rows: &[MetaFeatureRow]) -> Vec<f64> {
        let dists: Vec<Vec<f64>> = rows.iter().map(|r| self.distribution(&r.probs)).collect();
        let weights: Vec<Vec<f64>> = match self.granularity {
            Granularity::Sample => dists,
            Granularity::User => {
                let mut sums: BTreeMap<UserId, (Vec<f64>, usize)> = BTreeMap::new();
                for (r, d) in rows.iter().zip(&dists) {
                    let e = sums.entry(r.user_id).or_insert_with(|| (vec![0.0; d.len()], 0));
                    e.0.iter_mut().zip(d).for_each(|(s, x)| *s += x);
                    e.1 += 1;
                }
                rows.iter()
                    .map(|r| {
                        let (s, n) = &sums[&r.user_id];
                        s.iter().map(|x| x / *n as f64).collect()
                    })
                    .collect()
            }
        };
        rows.iter()
            .zip(&weights)
            .map(|(r, w)| clamp_prob(crate::numkit::dot(w, &r.probs)))
            .collect()
    }
}

/// Training targets: the row's own best model, or its user's best model by
/// mean log-loss over the user's rows.
pub fn level_targets(granularity: Granularity, rows: &[MetaFeatureRow]) -> Vec<usize> {
    match granularity {
        Granularity::Sample => rows.iter().map(|r| r.class).collect(),
        Granularity::User => {
            let k = rows.first().map_or(0, |r| r.probs.len());
            let mut sums: BTreeMap<UserId, Vec<f64>> = BTreeMap::new();
            for r in rows {
                let s = sums.entry(r.user_id).or_insert_with(|| vec![0.0; k]);
                for (acc, &p) in s.iter_mut().zip(&r.probs) {
                    *acc += logloss_unchecked(clamp_prob(p), r.label);
                }
            }
            let best: BTreeMap<UserId, usize> = sums.into_iter().map(|(u, s)| (u, argmin(&s))).collect();
            rows.iter().map(|r| best[&r.user_id]).collect()
        }
    }
}

/// Train the classifier with softmax cross-entropy and Adam.
pub fn train_level_selector(
    granularity: Granularity,
    rows: &[MetaFeatureRow],
    config: &LevelSelectorConfig,
    rng: &mut Rng,
) -> Result<LevelSelector> {
    if rows.is_empty() {
        return Err(Error::Empty("meta-feature rows"));
    }
    let k = rows[0].probs.len();
    if rows.iter().any(|r| r.probs.len() != k) {
        return Err(Error::InvalidArgument("meta-feature rows disagree on K".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let targets = level_targets(granularity, rows);
    for c in 0..k {
        if !targets.contains(&c) {
            log::warn!("{granularity:?}-level selector: class {c} absent from training labels");
        }
    }
    let mut sizes = vec![k];
    sizes.extend(&config.hidden_sizes);
    sizes.push(k);
    let mlp = Mlp::new(sizes);
    let mut params = vec![0.0; mlp.param_count()];
    mlp.init(&mut params, rng, false);
    let mut opt = Adam::new(config.adam, params.len());
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut dist = vec![0.0; k];
    let mut d_logit = vec![0.0; k];
    for _ in 0..config.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            let mut grad = vec![0.0; params.len()];
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let cache = mlp.forward(&params, &rows[i].probs, None);
                softmax_into(cache.output(), &mut dist);
                // softmax cross-entropy: dL/dz = q - onehot(target)
                for (j, (dl, &q)) in d_logit.iter_mut().zip(&dist).enumerate() {
                    *dl = scale * (q - if j == targets[i] { 1.0 } else { 0.0 });
                }
                mlp.backward(&params, &cache, &d_logit, &mut grad, None);
            }
            opt.step(&mut params, &grad)?;
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged(format!("{granularity:?}-level selector training")));
        }
    }
    Ok(LevelSelector {
        granularity,
        mlp,
        params,
    })
}
