//! Episodic meta-training of the shared initialization `w = (θ, φ)` and the
//! per-parameter inner rate `α`, plus in-task adaptation and meta-testing.
//!
//! For one user with support loss `L_S` and query loss `L_Q`:
//!
//! ```text
//! w_u      = w - α ∘ ∇L_S(w)
//! d_alpha  = -∇L_S(w) ∘ ∇L_Q(w_u)
//! d_w      = ∇L_Q(w_u) - H_S (α ∘ ∇L_Q(w_u))      (exact)
//! d_w      = ∇L_Q(w_u)                            (first order)
//! ```
//!
//! `H_S v` is a central difference of the support gradient along `v`.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::data::{Sample, UserDataset, UserId};
use crate::models::{Adam, AdamConfig, ParamBank};
use crate::numkit::{norm2, Rng};
use crate::selector::{Ensemble, GradScope};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetaMode {
    FirstOrder,
    ExactHvp,
}

impl FromStr for MetaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "first-order" | "first_order" => Ok(MetaMode::FirstOrder),
            "exact" | "exact-hvp" | "exact_hvp" => Ok(MetaMode::ExactHvp),
            other => Err(Error::Config(format!("unknown mode {other:?} (first-order|exact)"))),
        }
    }
}

impl fmt::Display for MetaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetaMode::FirstOrder => "first-order",
            MetaMode::ExactHvp => "exact",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    /// Frozen base models; only the selector is adapted and meta-trained.
    Simplified,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "full" => Ok(Variant::Full),
            "simplified" => Ok(Variant::Simplified),
            other => Err(Error::Config(format!("unknown variant {other:?} (full|simplified)"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::Simplified => "simplified",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OuterOptimizer {
    Sgd,
    Adam,
}

impl FromStr for OuterOptimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sgd" => Ok(OuterOptimizer::Sgd),
            "adam" => Ok(OuterOptimizer::Adam),
            other => Err(Error::Config(format!("unknown outer optimizer {other:?} (sgd|adam)"))),
        }
    }
}

impl fmt::Display for OuterOptimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OuterOptimizer::Sgd => "sgd",
            OuterOptimizer::Adam => "adam",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaConfig {
    /// Users per episode.
    pub m: usize,
    pub episodes: usize,
    pub alpha_init: f64,
    /// Outer rate; `None` means `alpha_init / 10`.
    pub beta: Option<f64>,
    pub alpha_max: f64,
    pub alpha_learned: bool,
    pub mode: MetaMode,
    pub variant: Variant,
    pub outer: OuterOptimizer,
    /// Inner steps at meta-test time.
    pub finetune_steps: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            m: 10,
            episodes: 300,
            alpha_init: 0.001,
            beta: None,
            alpha_max: 1.0,
            alpha_learned: true,
            mode: MetaMode::ExactHvp,
            variant: Variant::Full,
            outer: OuterOptimizer::Sgd,
            finetune_steps: 1,
        }
    }
}

impl MetaConfig {
    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or(self.alpha_init / 10.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("m must be at least 1".into()));
        }
        if !(self.alpha_init > 0.0 && self.alpha_init <= self.alpha_max) {
            return Err(Error::Config(format!(
                "alpha_init {} must lie in (0, alpha_max={}]",
                self.alpha_init, self.alpha_max
            )));
        }
        if !(self.beta() > 0.0 && self.beta().is_finite()) {
            return Err(Error::Config("beta must be positive".into()));
        }
        Ok(())
    }
}

/// Shared initialization, inner rates and outer-loop settings.
#[derive(Debug, Clone)]
pub struct MetaState {
    pub ensemble: Ensemble,
    /// `(θ_1, .., θ_K, φ)`.
    pub params: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: f64,
    pub alpha_max: f64,
    pub alpha_learned: bool,
    pub mode: MetaMode,
    pub variant: Variant,
    pub outer: OuterOptimizer,
    pub finetune_steps: usize,
}

#[derive(Debug, Clone)]
pub struct AdaptedParams {
    pub params: Vec<f64>,
    pub support_loss: f64,
    /// Support gradient at the initialization.
    pub g_support: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MetaGrad {
    pub user_id: UserId,
    pub support_loss: f64,
    pub query_loss: f64,
    pub d_params: Vec<f64>,
    pub d_alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub episode: usize,
    pub mean_query_loss: f64,
    pub mean_support_loss: f64,
    pub wallclock_ms: u128,
}

pub const TRAIN_LOG_HEADER: &str = "episode,mean_query_loss,mean_support_loss,wallclock_ms";

impl EpisodeLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.10},{:.10},{}",
            self.episode, self.mean_query_loss, self.mean_support_loss, self.wallclock_ms
        )
    }
}

fn non_finite(user: UserId, stage: &str) -> Error {
    Error::Diverged(format!("user {user}: non-finite {stage}"))
}

fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

impl MetaState {
    pub fn new(ensemble: Ensemble, thetas: &[ParamBank], phi: &ParamBank, config: &MetaConfig) -> Result<Self> {
        config.validate()?;
        let params = ensemble.join(thetas, phi)?;
        let alpha = vec![config.alpha_init; params.len()];
        Ok(MetaState {
            ensemble,
            params,
            alpha,
            beta: config.beta(),
            alpha_max: config.alpha_max,
            alpha_learned: config.alpha_learned,
            mode: config.mode,
            variant: config.variant,
            outer: config.outer,
            finetune_steps: config.finetune_steps,
        })
    }

    pub fn scope(&self) -> GradScope {
        match self.variant {
            Variant::Full => GradScope::ALL,
            Variant::Simplified => GradScope::PHI_ONLY,
        }
    }

    pub fn thetas(&self) -> Result<Vec<ParamBank>> {
        Ok(self.ensemble.split(&self.params)?.0)
    }

    pub fn phi(&self) -> Result<ParamBank> {
        Ok(self.ensemble.split(&self.params)?.1)
    }

    fn support_grad(&self, at: &[f64], support: &[Sample]) -> Result<(f64, Vec<f64>)> {
        self.ensemble.grad_batch(at, support, self.scope())
    }

    /// One inner step `w - α ∘ ∇L_S(w)` from `from` (θ untouched in the
    /// simplified variant).
    pub fn inner_step(&self, from: &[f64], support: &[Sample]) -> Result<AdaptedParams> {
        if support.is_empty() {
            return Err(Error::Empty("support set"));
        }
        let (support_loss, g) = self.support_grad(from, support)?;
        if !support_loss.is_finite() || !all_finite(&g) {
            return Err(Error::NonFinite("support loss or gradient".into()));
        }
        let params = from
            .iter()
            .zip(&self.alpha)
            .zip(&g)
            .map(|((w, a), g)| w - a * g)
            .collect();
        Ok(AdaptedParams {
            params,
            support_loss,
            g_support: g,
        })
    }

    pub fn inner_adapt(&self, support: &[Sample]) -> Result<AdaptedParams> {
        self.inner_step(&self.params, support)
    }

    /// Meta-gradient of the post-adaptation query loss for one user.
    pub fn meta_gradient(&self, user: &UserDataset) -> Result<MetaGrad> {
        let uid = user.user_id;
        if user.support().is_empty() || user.query().is_empty() {
            return Err(Error::InvalidArgument(format!(
                "user {uid} lacks a support or query set"
            )));
        }
        let adapted = self
            .inner_adapt(user.support())
            .map_err(|_| non_finite(uid, "support gradient"))?;
        let (query_loss, g_q) = self.ensemble.grad_batch(&adapted.params, user.query(), self.scope())?;
        if !query_loss.is_finite() || !all_finite(&g_q) {
            return Err(non_finite(uid, "query gradient"));
        }
        let d_alpha: Vec<f64> = adapted.g_support.iter().zip(&g_q).map(|(s, q)| -s * q).collect();
        let d_params = match self.mode {
            MetaMode::FirstOrder => g_q,
            MetaMode::ExactHvp => {
                let v: Vec<f64> = self.alpha.iter().zip(&g_q).map(|(a, g)| a * g).collect();
                let hv = self.hvp(user.support(), &v)?;
                if !all_finite(&hv) {
                    return Err(non_finite(uid, "Hessian-vector product"));
                }
                g_q.iter().zip(&hv).map(|(g, h)| g - h).collect()
            }
        };
        Ok(MetaGrad {
            user_id: uid,
            support_loss: adapted.support_loss,
            query_loss,
            d_params,
            d_alpha,
        })
    }

    /// `H_S v ≈ [∇L_S(w + εv) − ∇L_S(w − εv)] / 2ε`, `ε = 1e-4 / max(1, ‖v‖)`.
    pub fn hvp(&self, support: &[Sample], v: &[f64]) -> Result<Vec<f64>> {
        let norm = norm2(v);
        if norm == 0.0 {
            return Ok(vec![0.0; v.len()]);
        }
        let eps = 1e-4 / norm.max(1.0);
        let shifted = |sign: f64| -> Vec<f64> { self.params.iter().zip(v).map(|(w, d)| w + sign * eps * d).collect() };
        let (_, gp) = self.support_grad(&shifted(1.0), support)?;
        let (_, gm) = self.support_grad(&shifted(-1.0), support)?;
        Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect())
    }

    /// Plain SGD outer step with the mean of `grads`.
    pub fn sgd_step(&mut self, grads: &[MetaGrad]) -> Result<()> {
        let (dw, da) = mean_grads(grads, self.params.len())?;
        for (w, g) in self.params.iter_mut().zip(&dw) {
            *w -= self.beta * g;
        }
        if self.alpha_learned {
            for (a, g) in self.alpha.iter_mut().zip(&da) {
                *a = (*a - self.beta * g).clamp(0.0, self.alpha_max);
            }
        }
        Ok(())
    }

    /// Adapted parameters for deployment on a user's full training history.
    pub fn adapt_for_test(&self, train: &[Sample]) -> Result<Vec<f64>> {
        let mut w = self.params.clone();
        for _ in 0..self.finetune_steps {
            w = self.inner_step(&w, train)?.params;
        }
        Ok(w)
    }
}

/// Mean gradient over users, summed in ascending user-id order.
fn mean_grads(grads: &[MetaGrad], len: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if grads.is_empty() {
        return Err(Error::Empty("meta-gradient batch"));
    }
    let mut order: Vec<&MetaGrad> = grads.iter().collect();
    order.sort_by_key(|g| g.user_id);
    let mut dw = vec![0.0; len];
    let mut da = vec![0.0; len];
    for g in order {
        for (acc, x) in dw.iter_mut().zip(&g.d_params) {
            *acc += x;
        }
        for (acc, x) in da.iter_mut().zip(&g.d_alpha) {
            *acc += x;
        }
    }
    let inv = 1.0 / grads.len() as f64;
    dw.iter_mut().chain(da.iter_mut()).for_each(|x| *x *= inv);
    Ok((dw, da))
}

pub(crate) fn thread_pool(threads: usize) -> Result<Option<rayon::ThreadPool>> {
    if threads <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map(Some)
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Apply `f` to every item, in parallel when a pool is given; output order
/// follows input order either way.
pub(crate) fn map_users<T: Sync, R: Send>(
    pool: Option<&rayon::ThreadPool>,
    items: &[T],
    f: impl Fn(&T) -> R + Sync + Send,
) -> Vec<R> {
    match pool {
        None => items.iter().map(f).collect(),
        Some(p) => p.install(|| items.par_iter().map(f).collect()),
    }
}

/// Run `episodes` outer updates. Each episode samples `m` distinct admitted
/// users, averages their meta-gradients and applies one outer step.
pub fn meta_train(
    state: &mut MetaState,
    users: &[UserDataset],
    m: usize,
    episodes: usize,
    rng: &mut Rng,
    threads: usize,
) -> Result<Vec<EpisodeLog>> {
    let mut logs = Vec::with_capacity(episodes);
    if episodes == 0 {
        return Ok(logs);
    }
    let admitted: Vec<&UserDataset> = users.iter().filter(|u| u.is_admitted()).collect();
    if m == 0 || admitted.len() < m {
        return Err(Error::InvalidArgument(format!(
            "meta-training needs at least m={m} admitted users, have {}",
            admitted.len()
        )));
    }
    let pool = thread_pool(threads)?;
    let len = state.params.len();
    let mut adam = match state.outer {
        OuterOptimizer::Sgd => None,
        OuterOptimizer::Adam => {
            let cfg = AdamConfig {
                lr: state.beta,
                ..AdamConfig::default()
            };
            Some((Adam::new(cfg, len), Adam::new(cfg, len)))
        }
    };
    let start = Instant::now();
    for episode in 0..episodes {
        let mut batch: Vec<&UserDataset> = rng
            .choose_distinct(admitted.len(), m)
            .into_iter()
            .map(|i| admitted[i])
            .collect();
        batch.sort_by_key(|u| u.user_id);
        let snapshot = &*state;
        let results = map_users(pool.as_ref(), &batch, |u| snapshot.meta_gradient(u));
        let mut grads = Vec::with_capacity(m);
        for (u, r) in batch.iter().zip(results) {
            let g = r.map_err(|e| Error::Diverged(format!("episode {episode}, user {}: {e}", u.user_id)))?;
            grads.push(g);
        }
        let mean_query_loss = grads.iter().map(|g| g.query_loss).sum::<f64>() / m as f64;
        let mean_support_loss = grads.iter().map(|g| g.support_loss).sum::<f64>() / m as f64;
        match adam.as_mut() {
            None => state.sgd_step(&grads)?,
            Some((opt_w, opt_a)) => {
                let (dw, da) = mean_grads(&grads, len)?;
                opt_w.step(&mut state.params, &dw)?;
                if state.alpha_learned {
                    opt_a.step(&mut state.alpha, &da)?;
                    for a in &mut state.alpha {
                        *a = a.clamp(0.0, state.alpha_max);
                    }
                }
            }
        }
        if !all_finite(&state.params) || !all_finite(&state.alpha) {
            let ids: Vec<String> = batch.iter().map(|u| u.user_id.to_string()).collect();
            return Err(Error::Diverged(format!(
                "episode {episode}: non-finite parameters after update (users {})",
                ids.join(",")
            )));
        }
        log::debug!("episode {episode}: query loss {mean_query_loss:.5}");
        logs.push(EpisodeLog {
            episode,
            mean_query_loss,
            mean_support_loss,
            wallclock_ms: start.elapsed().as_millis(),
        });
    }
    Ok(logs)
}

/// Test-set predictions for one user.
#[derive(Debug, Clone, PartialEq)]
pub struct UserPredictions {
    pub user_id: UserId,
    pub labels: Vec<u8>,
    pub probs: Vec<f64>,
    /// Simplified variant only: predictions mixed with the user's mean λ
    /// over their training items.
    pub pooled_probs: Option<Vec<f64>>,
    /// Mean λ over the test items, as used for `probs`.
    pub mean_lambda: Vec<f64>,
}

/// Deploy on one user. Full: adapt on the pooled training split, predict
/// with the adapted parameters. Simplified: the unadapted selector weighs the
/// frozen base models per test item, plus the pooled-λ̄ predictions.
/// Users without test samples yield `None`.
pub fn meta_test(state: &MetaState, user: &UserDataset) -> Result<Option<UserPredictions>> {
    let test = user.test();
    if test.is_empty() {
        return Ok(None);
    }
    let ens = &state.ensemble;
    let k = ens.k();
    let params = match state.variant {
        Variant::Full if !user.train().is_empty() => state.adapt_for_test(user.train())?,
        _ => state.params.clone(),
    };
    let mut probs = Vec::with_capacity(test.len());
    let mut mean_lambda = vec![0.0; k];
    for x in test {
        let out = ens.predict(&params, x)?;
        for (m, l) in mean_lambda.iter_mut().zip(&out.lambda) {
            *m += l / test.len() as f64;
        }
        probs.push(out.prob);
    }
    let pooled_probs = match state.variant {
        Variant::Simplified if !user.train().is_empty() => {
            let mut bar = vec![0.0; k];
            for x in user.train() {
                for (b, l) in bar.iter_mut().zip(ens.lambda(&params, x)?) {
                    *b += l / user.train().len() as f64;
                }
            }
            Some(
                test.iter()
                    .map(|x| ens.predict_with_lambda(&params, &bar, x))
                    .collect::<Result<Vec<_>>>()?,
            )
        }
        _ => None,
    };
    Ok(Some(UserPredictions {
        user_id: user.user_id,
        labels: test.iter().map(|x| x.label).collect(),
        probs,
        pooled_probs,
        mean_lambda,
    }))
}

/// [`meta_test`] over many users, in input order.
pub fn meta_test_all(state: &MetaState, users: &[UserDataset], threads: usize) -> Result<Vec<UserPredictions>> {
    let pool = thread_pool(threads)?;
    let out = map_users(pool.as_ref(), users, |u| meta_test(state, u));
    let mut preds = Vec::new();
    for r in out {
        if let Some(p) = r? {
            preds.push(p);
        }
    }
    Ok(preds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Feature, FeatureSpace};
    use crate::models::{Model, ModelKind, ModelSpec};
    use crate::selector::{Selector, SelectorSpec};

    fn setup(kinds: &[ModelKind], variant: Variant, seed: u64) -> (MetaState, Vec<UserDataset>) {
        let sp = FeatureSpace::new(vec![("a".into(), 4), ("b".into(), 3)]).unwrap();
        let mut rng = Rng::new(seed);
        let models: Vec<Model> = kinds
            .iter()
            .map(|&k| Model::new(ModelSpec::new(k, 2).with_latent_dim(2), &sp).unwrap())
            .collect();
        let sel = Selector::new(
            SelectorSpec {
                embed_dim: 2,
                hidden_sizes: vec![3],
                ..SelectorSpec::new(kinds.len(), 2)
            },
            &sp,
        )
        .unwrap();
        let thetas: Vec<ParamBank> = models.iter().map(|m| m.init_params(&mut rng)).collect();
        let phi = sel.init_params(&mut rng);
        let ens = Ensemble::new(models, sel).unwrap();
        let cfg = MetaConfig {
            variant,
            alpha_init: 0.1,
            beta: Some(0.05),
            ..MetaConfig::default()
        };
        let mut state = MetaState::new(ens, &thetas, &phi, &cfg).unwrap();
        for p in state.params.iter_mut() {
            *p += rng.uniform(-0.3, 0.3);
        }
        let mut users = Vec::new();
        for uid in 0..12u32 {
            let mut mk = |n: usize| -> Vec<Sample> {
                (0..n)
                    .map(|_| {
                        let a = rng.below(4);
                        let b = rng.below(3);
                        let y = rng.bernoulli(if (a + b + uid as usize).is_multiple_of(2) {
                            0.8
                        } else {
                            0.2
                        }) as u8;
                        Sample::new(uid, y, vec![Feature::new(0, a, 1.0), Feature::new(1, 4 + b, 1.0)]).unwrap()
                    })
                    .collect()
            };
            let (s, q, t) = (mk(4), mk(3), mk(3));
            users.push(UserDataset::from_parts(uid, s, q, t));
        }
        (state, users)
    }

    #[test]
    fn zero_alpha_adaptation_is_identity() {
        let (mut state, users) = setup(&[ModelKind::Lr, ModelKind::Fm], Variant::Full, 1);
        state.alpha.iter_mut().for_each(|a| *a = 0.0);
        let a = state.inner_adapt(users[0].support()).unwrap();
        assert_eq!(a.params, state.params);
        for mode in [MetaMode::FirstOrder, MetaMode::ExactHvp] {
            state.mode = mode;
            let g = state.meta_gradient(&users[0]).unwrap();
            let (_, gq) = state
                .ensemble
                .grad_batch(&state.params, users[0].query(), GradScope::ALL)
                .unwrap();
            assert_eq!(g.d_params, gq);
        }
    }

    #[test]
    fn scalar_alpha_is_plain_maml_step() {
        let (state, users) = setup(&[ModelKind::Lr, ModelKind::Ffm], Variant::Full, 2);
        let a = state.inner_adapt(users[1].support()).unwrap();
        let (_, g) = state
            .ensemble
            .grad_batch(&state.params, users[1].support(), GradScope::ALL)
            .unwrap();
        for ((u, w), g) in a.params.iter().zip(&state.params).zip(&g) {
            assert!((u - (w - 0.1 * g)).abs() <= 1e-12);
        }
    }

    #[test]
    fn simplified_never_moves_theta() {
        let (mut state, users) = setup(&[ModelKind::Lr, ModelKind::Fm], Variant::Simplified, 3);
        let before = state.params[state.ensemble.thetas_range()].to_vec();
        let logs = meta_train(&mut state, &users, 4, 5, &mut Rng::new(9), 1).unwrap();
        assert_eq!(logs.len(), 5);
        assert_eq!(&state.params[state.ensemble.thetas_range()], &before[..]);
        assert_ne!(
            &state.params[state.ensemble.phi_range()],
            &vec![0.0; state.ensemble.phi_range().len()][..]
        );
    }

    #[test]
    fn zero_episodes_is_noop_and_training_is_deterministic() {
        let (state, users) = setup(&[ModelKind::Lr, ModelKind::Fm], Variant::Full, 4);
        let mut a = state.clone();
        assert!(meta_train(&mut a, &users, 3, 0, &mut Rng::new(1), 1)
            .unwrap()
            .is_empty());
        assert_eq!(a.params, state.params);
        let mut b = state.clone();
        let mut c = state.clone();
        meta_train(&mut b, &users, 3, 4, &mut Rng::new(7), 1).unwrap();
        meta_train(&mut c, &users, 3, 4, &mut Rng::new(7), 3).unwrap();
        assert_eq!(b.params, c.params);
        assert_eq!(b.alpha, c.alpha);
    }

    #[test]
    fn too_few_users_is_an_error() {
        let (mut state, users) = setup(&[ModelKind::Lr], Variant::Full, 5);
        assert!(meta_train(&mut state, &users[..2], 3, 1, &mut Rng::new(1), 1).is_err());
    }

    #[test]
    fn full_variant_with_zero_alpha_predicts_like_initialization() {
        let (mut state, users) = setup(&[ModelKind::Lr, ModelKind::Fm], Variant::Full, 6);
        state.alpha.iter_mut().for_each(|a| *a = 0.0);
        let p = meta_test(&state, &users[0]).unwrap().unwrap();
        for (x, q) in users[0].test().iter().zip(&p.probs) {
            assert_eq!(state.ensemble.predict(&state.params, x).unwrap().prob, *q);
        }
    }

    #[test]
    fn simplified_test_reports_pooled_predictions() {
        let (state, users) = setup(&[ModelKind::Lr, ModelKind::Fm], Variant::Simplified, 7);
        let p = meta_test(&state, &users[0]).unwrap().unwrap();
        assert_eq!(p.pooled_probs.as_ref().unwrap().len(), p.probs.len());
        let empty = UserDataset::from_parts(99, users[0].support().to_vec(), users[0].query().to_vec(), vec![]);
        assert!(meta_test(&state, &empty).unwrap().is_none());
    }
}
