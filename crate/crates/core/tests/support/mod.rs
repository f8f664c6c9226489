//! Shared oracles and random-instance builders for the integration tests.
#![allow(dead_code)]

use metaselector::data::{FeatureSpace, Sample, UserDataset, UserId};
use metaselector::models::{Model, ModelKind, ModelSpec, ParamBank};
use metaselector::numkit::Rng;
use metaselector::selector::{Ensemble, Selector, SelectorSpec};

/// Central finite differences of `f` at `x`.
pub fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut w = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = w[i];
            w[i] = orig + h;
            let up = f(&w);
            w[i] = orig - h;
            let down = f(&w);
            w[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max_i |a_i - b_i| / max(max_i |a_i|, max_i |b_i|)`; zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a.iter().chain(b).fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// 2–4 fields with 2–5 buckets each.
pub fn random_space(rng: &mut Rng) -> FeatureSpace {
    let nf = 2 + rng.below(3);
    FeatureSpace::new((0..nf).map(|f| (format!("f{f}"), 2 + rng.below(4))).collect()).unwrap()
}

/// 2–3 fields with 2–3 buckets each, for instances that must stay under a
/// parameter budget.
pub fn tiny_space(rng: &mut Rng) -> FeatureSpace {
    let nf = 2 + rng.below(2);
    FeatureSpace::new((0..nf).map(|f| (format!("f{f}"), 2 + rng.below(2))).collect()).unwrap()
}

/// One active bucket per field, except that the last field is multi-valued
/// (mean-pooled) about half the time.
pub fn random_sample(rng: &mut Rng, space: &FeatureSpace, user: UserId) -> Sample {
    let nf = space.num_fields();
    let buckets = space.hash_buckets_per_field();
    let mut per_field = Vec::with_capacity(nf);
    for (f, &nb) in buckets.iter().enumerate() {
        let mut bs = vec![rng.below(nb)];
        if f == nf - 1 && rng.bernoulli(0.5) {
            let extra = rng.below(nb);
            if extra != bs[0] {
                bs.push(extra);
            }
        }
        per_field.push((f, bs));
    }
    let y = rng.bernoulli(0.5) as u8;
    Sample::new(user, y, Sample::pooled(space, &per_field)).unwrap()
}

pub fn random_batch(rng: &mut Rng, space: &FeatureSpace, n: usize, user: UserId) -> Vec<Sample> {
    (0..n).map(|_| random_sample(rng, space, user)).collect()
}

pub fn random_params(rng: &mut Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| rng.uniform(-scale, scale)).collect()
}

pub fn small_model(kind: ModelKind, space: &FeatureSpace) -> Model {
    let spec = ModelSpec::new(kind, space.num_fields())
        .with_latent_dim(3)
        .with_hidden(vec![5, 4]);
    Model::new(spec, space).unwrap()
}

pub fn small_selector(k: usize, space: &FeatureSpace) -> Selector {
    let spec = SelectorSpec {
        embed_dim: 2,
        hidden_sizes: vec![4],
        ..SelectorSpec::new(k, space.num_fields())
    };
    Selector::new(spec, space).unwrap()
}

/// An ensemble over `kinds` with random (not init-scale) joint parameters.
pub fn small_ensemble(rng: &mut Rng, kinds: &[ModelKind], space: &FeatureSpace, scale: f64) -> (Ensemble, Vec<f64>) {
    let models: Vec<Model> = kinds.iter().map(|&k| small_model(k, space)).collect();
    let ens = Ensemble::new(models, small_selector(kinds.len(), space)).unwrap();
    let params = random_params(rng, ens.param_len(), scale);
    (ens, params)
}

pub fn split_banks(ens: &Ensemble, params: &[f64]) -> (Vec<ParamBank>, ParamBank) {
    ens.split(params).unwrap()
}

pub fn random_user(rng: &mut Rng, space: &FeatureSpace, uid: UserId, s: usize, q: usize, t: usize) -> UserDataset {
    UserDataset::from_parts(
        uid,
        random_batch(rng, space, s, uid),
        random_batch(rng, space, q, uid),
        random_batch(rng, space, t, uid),
    )
}
