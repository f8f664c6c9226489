//! Synthetic heterogeneous-user benchmarks with a planted best model family
//! per user cluster.
//!
//! Layout: field 0 is `user_id`, field 1 is a user `segment` (each cluster owns
//! its own segment values, so cluster membership is observable from the
//! features), followed by `item_fields` item attributes drawn uniformly.
//! Labels depend only on the item attributes through the cluster's logit
//! function, which is either linear (LR-realizable) or a rank-2 pairwise
//! factorization (FM-realizable).

use super::{Dataset, Feature, FeatureSpace, Sample, UserSamples};
use crate::numkit::{raw_sigmoid, Rng};
use crate::{Error, Result};

pub const FIELD_USER: usize = 0;
pub const FIELD_SEGMENT: usize = 1;
pub const FIRST_ITEM_FIELD: usize = 2;

/// Rank of the factorized clusters' pairwise interactions.
const FACTOR_RANK: usize = 2;
/// Fraction of linear weights forced to zero.
const LINEAR_SPARSITY: f64 = 0.25;
/// Draws used to standardise each cluster's logit scale.
const CALIBRATION_DRAWS: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterFamily {
    /// Sparse linear logit over item attributes.
    Linear,
    /// Rank-2 pairwise factorized logit over item attributes.
    Factorized,
}

impl std::str::FromStr for ClusterFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" | "lr" => Ok(ClusterFamily::Linear),
            "factorized" | "fm" => Ok(ClusterFamily::Factorized),
            other => Err(Error::Config(format!("unknown cluster family {other:?}"))),
        }
    }
}

impl std::fmt::Display for ClusterFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ClusterFamily::Linear => "linear",
            ClusterFamily::Factorized => "factorized",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_users: usize,
    pub samples_per_user: usize,
    /// One family per cluster; at most four.
    pub clusters: Vec<ClusterFamily>,
    /// Relative cluster sizes. Users are assigned by largest-remainder quotas,
    /// then the assignment is shuffled.
    pub cluster_weights: Vec<f64>,
    pub segments_per_cluster: usize,
    pub item_fields: usize,
    pub values_per_field: usize,
    /// Standard deviation of every cluster's logit function.
    pub signal_scale: f64,
    /// Label temperature: `y ~ Bernoulli(sigmoid(f(x) / noise))`, and
    /// `y = 1[f(x) > 0]` when zero.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_users: 200,
            samples_per_user: 100,
            clusters: vec![ClusterFamily::Linear, ClusterFamily::Factorized],
            cluster_weights: vec![1.0, 1.0],
            segments_per_cluster: 2,
            item_fields: 4,
            values_per_field: 10,
            signal_scale: 2.0,
            noise: 1.0,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    // `!(x >= 0.0)` also rejects NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.clusters.is_empty() {
            return Err(Error::Config("synthetic spec needs at least one cluster".into()));
        }
        if self.clusters.len() > 4 {
            return Err(Error::Config(format!(
                "{} clusters requested, at most 4 base-model families exist",
                self.clusters.len()
            )));
        }
        if self.cluster_weights.len() != self.clusters.len() {
            return Err(Error::Config("cluster_weights must match clusters".into()));
        }
        if self.cluster_weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite())
            || self.cluster_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Config(
                "cluster weights must be nonnegative with positive sum".into(),
            ));
        }
        if self.num_users == 0 || self.samples_per_user == 0 {
            return Err(Error::Config("synthetic spec needs users and samples".into()));
        }
        if self.item_fields < 2 || self.values_per_field < 2 || self.segments_per_cluster == 0 {
            return Err(Error::Config(
                "need at least 2 item fields, 2 values per field and 1 segment per cluster".into(),
            ));
        }
        if !(self.noise >= 0.0) || !(self.signal_scale > 0.0) {
            return Err(Error::Config("noise must be >= 0 and signal_scale > 0".into()));
        }
        Ok(())
    }
}

/// The planted logit functions, one per cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    families: Vec<ClusterFamily>,
    /// Linear: `[field][value]` weights. Factorized: `[field][value * rank + r]` factors.
    tables: Vec<Vec<Vec<f64>>>,
    scales: Vec<f64>,
    item_fields: usize,
}

impl GroundTruth {
    pub fn family(&self, cluster: usize) -> ClusterFamily {
        self.families[cluster]
    }

    /// Planted logit for item attribute values (one per item field).
    pub fn logit(&self, cluster: usize, values: &[usize]) -> f64 {
        self.raw_logit(cluster, values) * self.scales[cluster]
    }

    fn raw_logit(&self, cluster: usize, values: &[usize]) -> f64 {
        let t = &self.tables[cluster];
        match self.families[cluster] {
            ClusterFamily::Linear => values.iter().enumerate().map(|(f, &v)| t[f][v]).sum(),
            ClusterFamily::Factorized => {
                let mut total = 0.0;
                for f in 0..values.len() {
                    for g in f + 1..values.len() {
                        let a = &t[f][values[f] * FACTOR_RANK..(values[f] + 1) * FACTOR_RANK];
                        let b = &t[g][values[g] * FACTOR_RANK..(values[g] + 1) * FACTOR_RANK];
                        total += crate::numkit::dot(a, b);
                    }
                }
                total
            }
        }
    }

    /// Planted logit of an encoded synthetic sample.
    pub fn sample_logit(&self, space: &FeatureSpace, cluster: usize, sample: &Sample) -> f64 {
        let mut values = vec![0; self.item_fields];
        for f in &sample.features {
            let field = f.field as usize;
            if field >= FIRST_ITEM_FIELD {
                values[field - FIRST_ITEM_FIELD] = f.index as usize - space.offset(field);
            }
        }
        self.logit(cluster, &values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub dataset: Dataset,
    /// Cluster of each user, aligned with `dataset.users`.
    pub clusters: Vec<usize>,
    pub truth: GroundTruth,
}

impl SyntheticData {
    pub fn cluster_of(&self, user: super::UserId) -> usize {
        self.clusters[user as usize]
    }
}

/// Largest-remainder quota: exact integer cluster sizes summing to `n`.
fn quotas(weights: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let k = spec.clusters.len();
    let segments = k * spec.segments_per_cluster;

    let mut fields = vec![
        ("user_id".to_string(), spec.num_users),
        ("segment".to_string(), segments),
    ];
    for f in 0..spec.item_fields {
        fields.push((format!("item_{f}"), spec.values_per_field));
    }
    let space = FeatureSpace::new(fields)?;

    // planted functions
    let mut tables = Vec::with_capacity(k);
    for family in &spec.clusters {
        let table: Vec<Vec<f64>> = match family {
            ClusterFamily::Linear => (0..spec.item_fields)
                .map(|_| {
                    (0..spec.values_per_field)
                        .map(|_| {
                            if rng.bernoulli(LINEAR_SPARSITY) {
                                0.0
                            } else {
                                rng.normal()
                            }
                        })
                        .collect()
                })
                .collect(),
            ClusterFamily::Factorized => (0..spec.item_fields)
                .map(|_| {
                    let mut f: Vec<f64> = (0..spec.values_per_field * FACTOR_RANK).map(|_| rng.normal()).collect();
                    // center each factor coordinate so the interaction has no main effects
                    for r in 0..FACTOR_RANK {
                        let mean = (0..spec.values_per_field).map(|v| f[v * FACTOR_RANK + r]).sum::<f64>()
                            / spec.values_per_field as f64;
                        for v in 0..spec.values_per_field {
                            f[v * FACTOR_RANK + r] -= mean;
                        }
                    }
                    f
                })
                .collect(),
        };
        tables.push(table);
    }
    let mut truth = GroundTruth {
        families: spec.clusters.clone(),
        tables,
        scales: vec![1.0; k],
        item_fields: spec.item_fields,
    };
    let mut calib = rng.fork(0xCA11B);
    for c in 0..k {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut values = vec![0; spec.item_fields];
        for _ in 0..CALIBRATION_DRAWS {
            for v in values.iter_mut() {
                *v = calib.below(spec.values_per_field);
            }
            let z = truth.raw_logit(c, &values);
            sum += z;
            sum_sq += z * z;
        }
        let n = CALIBRATION_DRAWS as f64;
        let var = (sum_sq / n - (sum / n).powi(2)).max(1e-12);
        truth.scales[c] = spec.signal_scale / var.sqrt();
    }

    // user -> cluster
    let counts = quotas(&spec.cluster_weights, spec.num_users);
    let mut assignment: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
        .collect();
    rng.shuffle(&mut assignment);

    let mut users = Vec::with_capacity(spec.num_users);
    let mut values = vec![0; spec.item_fields];
    for (u, &cluster) in assignment.iter().enumerate() {
        let segment = cluster * spec.segments_per_cluster + rng.below(spec.segments_per_cluster);
        let mut samples = Vec::with_capacity(spec.samples_per_user);
        for t in 0..spec.samples_per_user {
            for v in values.iter_mut() {
                *v = rng.below(spec.values_per_field);
            }
            let z = truth.logit(cluster, &values);
            let label = if spec.noise == 0.0 {
                u8::from(z > 0.0)
            } else {
                u8::from(rng.bernoulli(raw_sigmoid(z / spec.noise)))
            };
            let mut features = Vec::with_capacity(2 + spec.item_fields);
            features.push(Feature::new(FIELD_USER, space.index(FIELD_USER, u), 1.0));
            features.push(Feature::new(FIELD_SEGMENT, space.index(FIELD_SEGMENT, segment), 1.0));
            for (f, &v) in values.iter().enumerate() {
                let field = FIRST_ITEM_FIELD + f;
                features.push(Feature::new(field, space.index(field, v), 1.0));
            }
            let mut s = Sample::new(u as u32, label, features)?;
            s.timestamp = Some(t as i64);
            samples.push(s);
        }
        users.push(UserSamples {
            user_id: u as u32,
            samples,
        });
    }

    Ok(SyntheticData {
        dataset: Dataset { space, users },
        clusters: assignment,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_labels_are_thresholded_logits() {
        let spec = SyntheticSpec {
            num_users: 1,
            samples_per_user: 500,
            clusters: vec![ClusterFamily::Linear],
            cluster_weights: vec![1.0],
            noise: 0.0,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let space = &data.dataset.space;
        for s in &data.dataset.users[0].samples {
            let z = data.truth.sample_logit(space, 0, s);
            assert_eq!(s.label, u8::from(z > 0.0));
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = SyntheticSpec {
            num_users: 100,
            seed: 7,
            ..SyntheticSpec::default()
        };
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let other = SyntheticSpec {
            seed: 8,
            ..spec.clone()
        };
        assert_ne!(
            generate_synthetic(&spec).unwrap().dataset,
            generate_synthetic(&other).unwrap().dataset
        );
    }

    #[test]
    fn too_many_clusters_rejected() {
        let spec = SyntheticSpec {
            clusters: vec![ClusterFamily::Linear; 5],
            cluster_weights: vec![1.0; 5],
            ..SyntheticSpec::default()
        };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn cluster_sizes_follow_quotas() {
        assert_eq!(quotas(&[0.6, 0.4], 200), vec![120, 80]);
        assert_eq!(quotas(&[1.0, 1.0, 1.0], 10).iter().sum::<usize>(), 10);
        let spec = SyntheticSpec {
            cluster_weights: vec![0.6, 0.4],
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        assert_eq!(data.clusters.iter().filter(|&&c| c == 0).count(), 120);
    }

    #[test]
    fn segments_identify_clusters() {
        let data = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let space = &data.dataset.space;
        for (u, user) in data.dataset.users.iter().enumerate() {
            let seg = user.samples[0].features[1].index as usize - space.offset(FIELD_SEGMENT);
            assert_eq!(seg / 2, data.clusters[u]);
            for s in &user.samples {
                s.validate(space).unwrap();
            }
        }
    }

    #[test]
    fn logit_scale_is_standardised() {
        let data = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let space = &data.dataset.space;
        for c in 0..2 {
            let zs: Vec<f64> = data
                .dataset
                .users
                .iter()
                .enumerate()
                .filter(|(u, _)| data.clusters[*u] == c)
                .flat_map(|(_, u)| u.samples.iter().map(|s| data.truth.sample_logit(space, c, s)))
                .collect();
            let mean = zs.iter().sum::<f64>() / zs.len() as f64;
            let sd = (zs.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / zs.len() as f64).sqrt();
            assert!((sd - 2.0).abs() < 0.2, "cluster {c} sd {sd}");
        }
    }
}
