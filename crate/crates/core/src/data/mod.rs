//! Fielded sparse samples, per-user chronological splits, and the dataset
//! sources: MovieLens-1m ingestion, a synthetic heterogeneous-user generator,
//! and the canonical text dump.

mod dump;
mod movielens;
mod synthetic;

use sha2::{Digest, Sha256};

pub use dump::{read_dump, write_dump};
pub use movielens::{load_movielens, IngestStats};
pub use synthetic::{generate_synthetic, ClusterFamily, GroundTruth, SyntheticData, SyntheticSpec};

use crate::{Error, Result};

pub type UserId = u32;

/// Smallest user history admitted to training; every split part is then nonempty.
pub const MIN_USER_SAMPLES: usize = 8;
pub const DEFAULT_TRAIN_FRAC: f64 = 0.8;
pub const DEFAULT_SUPPORT_FRAC: f64 = 0.75;

/// Layout of the one-hot feature dimension: each field owns a contiguous
/// bucket range, in field order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSpace {
    field_names: Vec<String>,
    buckets: Vec<usize>,
    offsets: Vec<usize>,
}

impl FeatureSpace {
    pub fn new(fields: Vec<(String, usize)>) -> Result<Self> {
        if fields.is_empty() {
            return Err(Error::Empty("feature space fields"));
        }
        let mut offsets = Vec::with_capacity(fields.len() + 1);
        let mut acc = 0usize;
        let mut names = Vec::with_capacity(fields.len());
        let mut buckets = Vec::with_capacity(fields.len());
        for (name, size) in fields {
            offsets.push(acc);
            acc += size;
            names.push(name);
            buckets.push(size);
        }
        offsets.push(acc);
        if acc == 0 {
            return Err(Error::Empty("feature space buckets"));
        }
        Ok(FeatureSpace {
            field_names: names,
            buckets,
            offsets,
        })
    }

    pub fn num_fields(&self) -> usize {
        self.buckets.len()
    }

    pub fn num_features(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn field_names(&self) -> &[String] {
        &self.field_names
    }

    pub fn hash_buckets_per_field(&self) -> &[usize] {
        &self.buckets
    }

    pub fn offset(&self, field: usize) -> usize {
        self.offsets[field]
    }

    /// Global index of `bucket` within `field`.
    pub fn index(&self, field: usize, bucket: usize) -> usize {
        debug_assert!(bucket < self.buckets[field]);
        self.offsets[field] + bucket
    }

    /// Field owning a global index, if it is in range.
    pub fn field_of(&self, index: usize) -> Option<usize> {
        if index >= self.num_features() {
            return None;
        }
        // first offset strictly greater than index, minus one; skips empty fields
        let pos = self.offsets.partition_point(|&o| o <= index);
        Some(pos - 1)
    }

    /// Stable digest of the layout (field count and bucket sizes). Checkpoints
    /// record it so parameters are never loaded against a different encoding.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.num_fields() as u64).to_le_bytes());
        for b in &self.buckets {
            h.update((*b as u64).to_le_bytes());
        }
        h.finalize().into()
    }

    pub fn digest_hex(&self) -> String {
        self.digest().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One active feature: field id, global index, and value weight. Multi-valued
/// fields carry weight `1/n` on each of their `n` values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feature {
    pub field: u16,
    pub index: u32,
    pub value: f32,
}

impl Feature {
    pub fn new(field: usize, index: usize, value: f64) -> Self {
        Feature {
            field: field as u16,
            index: index as u32,
            value: value as f32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub user: UserId,
    pub features: Vec<Feature>,
    pub label: u8,
    pub timestamp: Option<i64>,
}

impl Sample {
    pub fn new(user: UserId, label: u8, features: Vec<Feature>) -> Result<Self> {
        if label > 1 {
            return Err(Error::InvalidLabel(label as i64));
        }
        Ok(Sample {
            user,
            features,
            label,
            timestamp: None,
        })
    }

    /// Builds the feature list for a set of per-field bucket lists, applying
    /// mean pooling (`1/n`) to multi-valued fields. Empty lists are skipped.
    pub fn pooled(space: &FeatureSpace, per_field: &[(usize, Vec<usize>)]) -> Vec<Feature> {
        let mut out = Vec::new();
        for (field, buckets) in per_field {
            if buckets.is_empty() {
                continue;
            }
            let w = 1.0 / buckets.len() as f64;
            for &b in buckets {
                out.push(Feature::new(*field, space.index(*field, b), w));
            }
        }
        out
    }

    pub fn validate(&self, space: &FeatureSpace) -> Result<()> {
        for f in &self.features {
            let field = f.field as usize;
            if field >= space.num_fields() {
                return Err(Error::FieldOutOfRange {
                    field,
                    num_fields: space.num_fields(),
                });
            }
            let index = f.index as usize;
            if space.field_of(index) != Some(field) {
                return Err(Error::IndexOutOfRange {
                    index,
                    num_features: space.num_features(),
                });
            }
        }
        Ok(())
    }
}

/// Chronologically ordered samples of one user prior to splitting.
#[derive(Debug, Clone, PartialEq)]
pub struct UserSamples {
    pub user_id: UserId,
    pub samples: Vec<Sample>,
}

/// A full dataset: the feature layout plus every user's chronological history.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub space: FeatureSpace,
    pub users: Vec<UserSamples>,
}

impl Dataset {
    pub fn num_samples(&self) -> usize {
        self.users.iter().map(|u| u.samples.len()).sum()
    }
}

/// One user's samples with chronological split points:
/// `support = [0, s)`, `query = [s, t)`, `train = [0, t)`, `test = [t, n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UserDataset {
    pub user_id: UserId,
    samples: Vec<Sample>,
    support_end: usize,
    train_end: usize,
}

impl UserDataset {
    /// Assemble from explicit parts; used by tests and by callers that bring
    /// their own splits.
    pub fn from_parts(user_id: UserId, support: Vec<Sample>, query: Vec<Sample>, test: Vec<Sample>) -> Self {
        let support_end = support.len();
        let train_end = support_end + query.len();
        let mut samples = support;
        samples.extend(query);
        samples.extend(test);
        UserDataset {
            user_id,
            samples,
            support_end,
            train_end,
        }
    }

    pub fn train(&self) -> &[Sample] {
        &self.samples[..self.train_end]
    }

    pub fn test(&self) -> &[Sample] {
        &self.samples[self.train_end..]
    }

    pub fn support(&self) -> &[Sample] {
        &self.samples[..self.support_end]
    }

    pub fn query(&self) -> &[Sample] {
        &self.samples[self.support_end..self.train_end]
    }

    pub fn all(&self) -> &[Sample] {
        &self.samples
    }

    /// Admitted to meta-training: nonempty support and query.
    pub fn is_admitted(&self) -> bool {
        !self.support().is_empty() && !self.query().is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exclusion {
    pub user_id: UserId,
    pub num_samples: usize,
    pub reason: String,
}

/// Split sizes `(support, query, test)` for a user with `n` samples.
///
/// Both boundaries use `floor`, then each part is forced nonempty.
pub fn split_sizes(n: usize, train_frac: f64, support_frac: f64) -> Option<(usize, usize, usize)> {
    if n < MIN_USER_SAMPLES {
        return None;
    }
    let train = ((n as f64 * train_frac).floor() as usize).clamp(2, n - 1);
    let support = ((train as f64 * support_frac).floor() as usize).clamp(1, train - 1);
    Some((support, train - support, n - train))
}

/// Chronological split of one user's history: earliest `train_frac` goes to
/// train, the rest to test; within train the earliest `support_frac` is the
/// support set and the remainder the query set.
pub fn split_user(
    user: UserSamples,
    train_frac: f64,
    support_frac: f64,
) -> std::result::Result<UserDataset, Exclusion> {
    let n = user.samples.len();
    match split_sizes(n, train_frac, support_frac) {
        Some((support, query, _)) => Ok(UserDataset {
            user_id: user.user_id,
            samples: user.samples,
            support_end: support,
            train_end: support + query,
        }),
        None => Err(Exclusion {
            user_id: user.user_id,
            num_samples: n,
            reason: format!("fewer than {MIN_USER_SAMPLES} samples"),
        }),
    }
}

/// Split every user, collecting the exclusion report alongside.
pub fn split_users(dataset: &Dataset, train_frac: f64, support_frac: f64) -> (Vec<UserDataset>, Vec<Exclusion>) {
    let mut admitted = Vec::with_capacity(dataset.users.len());
    let mut excluded = Vec::new();
    for u in &dataset.users {
        match split_user(u.clone(), train_frac, support_frac) {
            Ok(d) => admitted.push(d),
            Err(e) => excluded.push(e),
        }
    }
    (admitted, excluded)
}

/// Summary counts of a dataset, in the shape of a dataset statistics table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetStats {
    pub users: usize,
    pub items: Option<usize>,
    pub samples: usize,
    pub features: usize,
    pub positives: usize,
}

impl DatasetStats {
    pub fn of(dataset: &Dataset, items: Option<usize>) -> Self {
        DatasetStats {
            users: dataset.users.len(),
            items,
            samples: dataset.num_samples(),
            features: dataset.space.num_features(),
            positives: dataset
                .users
                .iter()
                .flat_map(|u| &u.samples)
                .filter(|s| s.label == 1)
                .count(),
        }
    }

    pub fn render(&self) -> String {
        let items = self.items.map(|i| i.to_string()).unwrap_or_else(|| "n/a".into());
        format!(
            "users={}\nitems={}\nsamples={}\nfeatures={}\npositives={}\n",
            self.users, items, self.samples, self.features, self.positives
        )
    }
}
