//! The model selector: per-field embeddings, a ReLU MLP and a softmax over
//! the K base models, plus the joint (θ, φ) parameter layout that the
//! meta-learner differentiates through.

use std::ops::Range;

use crate::data::{FeatureSpace, Sample};
use crate::dense::{Mlp, MlpCache};
use crate::models::{Model, ParamBank, ParamSegment};
use crate::numkit::{clamp_prob, logloss_slope, logloss_unchecked, softmax_backward, softmax_into, DenseVec, Rng};
use crate::{Error, Result};

/// Embedding initialisation half-width.
const EMBED_INIT: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct SelectorSpec {
    pub embed_dim: usize,
    pub hidden_sizes: Vec<usize>,
    pub k: usize,
    pub num_fields: usize,
    /// Fields the selector does not read.
    pub ignored_fields: Vec<usize>,
}

impl SelectorSpec {
    pub fn new(k: usize, num_fields: usize) -> Self {
        SelectorSpec {
            embed_dim: 16,
            hidden_sizes: vec![200, 200, 200],
            k,
            num_fields,
            ignored_fields: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("selector needs K >= 1".into()));
        }
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return Err(Error::Config(
                "selector hidden sizes must be nonempty and positive".into(),
            ));
        }
        if self.embed_dim == 0 || self.num_fields == 0 {
            return Err(Error::Config(
                "selector needs embed_dim > 0 and at least one field".into(),
            ));
        }
        if let Some(&f) = self.ignored_fields.iter().find(|&&f| f >= self.num_fields) {
            return Err(Error::Config(format!(
                "selector ignored field {f} >= num_fields {}",
                self.num_fields
            )));
        }
        Ok(())
    }

    pub fn descriptor(&self) -> String {
        let join = |xs: &[usize]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "kind=selector k={} embed_dim={} num_fields={} hidden={} ignored_fields={}",
            self.k,
            self.embed_dim,
            self.num_fields,
            join(&self.hidden_sizes),
            join(&self.ignored_fields)
        )
    }
}

impl std::str::FromStr for SelectorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let map = crate::checkpoint::descriptor_map(s)?;
        if map.get("kind").map(String::as_str) != Some("selector") {
            return Err(Error::Config(format!("not a selector descriptor: {s:?}")));
        }
        let get = |k: &str| {
            map.get(k)
                .ok_or_else(|| Error::Config(format!("selector descriptor lacks {k}")))
        };
        let num =
            |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::Config(format!("bad selector {k}"))) };
        let list = |k: &str| -> Result<Vec<usize>> {
            get(k)?
                .split(',')
                .filter(|t| !t.is_empty())
                .map(|t| t.parse().map_err(|_| Error::Config(format!("bad selector {k}"))))
                .collect()
        };
        let spec = SelectorSpec {
            embed_dim: num("embed_dim")?,
            hidden_sizes: list("hidden")?,
            k: num("k")?,
            num_fields: num("num_fields")?,
            ignored_fields: list("ignored_fields")?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone)]
pub struct SelectorCache {
    pub lambda: Vec<f64>,
    mlp: MlpCache,
}

#[derive(Debug, Clone)]
pub struct Selector {
    spec: SelectorSpec,
    num_features: usize,
    reads_field: Vec<bool>,
    mlp: Mlp,
    mlp_off: usize,
    segments: Vec<ParamSegment>,
    len: usize,
}

impl Selector {
    pub fn new(spec: SelectorSpec, space: &FeatureSpace) -> Result<Self> {
        if spec.num_fields != space.num_fields() {
            return Err(Error::Config(format!(
                "selector declares {} fields, feature space has {}",
                spec.num_fields,
                space.num_fields()
            )));
        }
        Self::with_dims(spec, space.num_features())
    }

    pub fn with_dims(spec: SelectorSpec, num_features: usize) -> Result<Self> {
        spec.validate()?;
        let d = spec.embed_dim;
        let embed_len = num_features * d;
        let mut segments = vec![ParamSegment {
            name: "embed".into(),
            offset: 0,
            len: embed_len,
            shape: vec![num_features, d],
        }];
        let mut sizes = vec![spec.num_fields * d];
        sizes.extend(&spec.hidden_sizes);
        sizes.push(spec.k);
        let mlp = Mlp::new(sizes);
        for (name, rel, len, shape) in mlp.segments("mlp") {
            segments.push(ParamSegment {
                name,
                offset: embed_len + rel,
                len,
                shape,
            });
        }
        let mut reads_field = vec![true; spec.num_fields];
        for &f in &spec.ignored_fields {
            reads_field[f] = false;
        }
        let len = embed_len + mlp.param_count();
        Ok(Selector {
            spec,
            num_features,
            reads_field,
            mlp,
            mlp_off: embed_len,
            segments,
            len,
        })
    }

    pub fn spec(&self) -> &SelectorSpec {
        &self.spec
    }

    pub fn k(&self) -> usize {
        self.spec.k
    }

    pub fn param_len(&self) -> usize {
        self.len
    }

    pub fn segments(&self) -> &[ParamSegment] {
        &self.segments
    }

    /// Small uniform embeddings, Glorot hidden layers and a zero output
    /// layer, so a fresh selector is exactly uniform over the base models.
    pub fn init_params(&self, rng: &mut Rng) -> ParamBank {
        let mut flat = vec![0.0; self.len];
        for x in &mut flat[..self.mlp_off] {
            *x = rng.uniform(-EMBED_INIT, EMBED_INIT);
        }
        self.mlp.init(&mut flat[self.mlp_off..], rng, true);
        self.bank_from(flat).expect("layout is consistent")
    }

    pub fn zero_params(&self) -> ParamBank {
        self.bank_from(vec![0.0; self.len]).expect("layout is consistent")
    }

    pub fn bank_from(&self, flat: Vec<f64>) -> Result<ParamBank> {
        ParamBank::new(DenseVec::new(flat)?, self.segments.clone())
    }

    /// λ = softmax(MLP(concat_f e_f)), with `e_f` the value-weighted
    /// (mean-pooled for multi-valued fields) embedding of field `f`.
    pub fn select(&self, params: &[f64], x: &Sample) -> Result<(DenseVec, SelectorCache)> {
        if params.len() != self.len {
            return Err(Error::LengthMismatch {
                expected: self.len,
                found: params.len(),
            });
        }
        let d = self.spec.embed_dim;
        let mut input = vec![0.0; self.spec.num_fields * d];
        for f in &x.features {
            let (field, idx) = (f.field as usize, f.index as usize);
            if field >= self.spec.num_fields {
                return Err(Error::FieldOutOfRange {
                    field,
                    num_fields: self.spec.num_fields,
                });
            }
            if idx >= self.num_features {
                return Err(Error::IndexOutOfRange {
                    index: idx,
                    num_features: self.num_features,
                });
            }
            if !self.reads_field[field] {
                continue;
            }
            crate::numkit::axpy(
                f.value as f64,
                &params[idx * d..(idx + 1) * d],
                &mut input[field * d..(field + 1) * d],
            );
        }
        let mc = self.mlp.forward(&params[self.mlp_off..], &input, None);
        let logits = mc.output();
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::NonFinite("selector logits".into()));
        }
        let mut lambda = vec![0.0; self.spec.k];
        softmax_into(logits, &mut lambda);
        Ok((DenseVec::new(lambda.clone())?, SelectorCache { lambda, mlp: mc }))
    }

    /// Accumulate `d_lambda · dλ/dφ` into `grad`.
    pub fn backward(&self, params: &[f64], x: &Sample, cache: &SelectorCache, d_lambda: &[f64], grad: &mut [f64]) {
        let mut d_logits = vec![0.0; self.spec.k];
        softmax_backward(&cache.lambda, d_lambda, &mut d_logits);
        if d_logits.iter().all(|&g| g == 0.0) {
            return;
        }
        let mut d_input = vec![0.0; self.mlp.input_dim()];
        let (embed_grad, mlp_grad) = grad.split_at_mut(self.mlp_off);
        self.mlp.backward(
            &params[self.mlp_off..],
            &cache.mlp,
            &d_logits,
            mlp_grad,
            Some(&mut d_input),
        );
        let d = self.spec.embed_dim;
        for f in &x.features {
            let (field, idx) = (f.field as usize, f.index as usize);
            if !self.reads_field[field] {
                continue;
            }
            crate::numkit::axpy(
                f.value as f64,
                &d_input[field * d..(field + 1) * d],
                &mut embed_grad[idx * d..(idx + 1) * d],
            );
        }
    }
}

/// Convex combination `sum_k λ_k p_k`, clamped to `[ε, 1-ε]`.
pub fn mix(lambda: &DenseVec, base_probs: &DenseVec) -> Result<f64> {
    if lambda.len() != base_probs.len() {
        return Err(Error::LengthMismatch {
            expected: lambda.len(),
            found: base_probs.len(),
        });
    }
    if lambda.is_empty() {
        return Err(Error::Empty("mixture weights"));
    }
    Ok(clamp_prob(crate::numkit::dot(lambda.as_slice(), base_probs.as_slice())))
}

/// Which parts of the joint vector receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradScope {
    pub theta: bool,
    pub phi: bool,
}

impl GradScope {
    pub const ALL: GradScope = GradScope { theta: true, phi: true };
    pub const PHI_ONLY: GradScope = GradScope {
        theta: false,
        phi: true,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixOutput {
    pub prob: f64,
    pub lambda: Vec<f64>,
    pub base_probs: Vec<f64>,
}

/// K base models plus the selector over one flat vector `(θ_1, .., θ_K, φ)`.
#[derive(Debug, Clone)]
pub struct Ensemble {
    models: Vec<Model>,
    selector: Selector,
    offsets: Vec<usize>,
}

impl Ensemble {
    pub fn new(models: Vec<Model>, selector: Selector) -> Result<Self> {
        if models.len() != selector.k() {
            return Err(Error::Config(format!(
                "selector has K={} outputs for {} base models",
                selector.k(),
                models.len()
            )));
        }
        let mut offsets = vec![0];
        for m in &models {
            offsets.push(offsets.last().unwrap() + m.param_len());
        }
        offsets.push(offsets.last().unwrap() + selector.param_len());
        Ok(Ensemble {
            models,
            selector,
            offsets,
        })
    }

    pub fn models(&self) -> &[Model] {
        &self.models
    }

    pub fn selector(&self) -> &Selector {
        &self.selector
    }

    pub fn k(&self) -> usize {
        self.models.len()
    }

    pub fn param_len(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn theta_range(&self, k: usize) -> Range<usize> {
        self.offsets[k]..self.offsets[k + 1]
    }

    /// All base-model parameters.
    pub fn thetas_range(&self) -> Range<usize> {
        0..self.offsets[self.k()]
    }

    pub fn phi_range(&self) -> Range<usize> {
        self.offsets[self.k()]..self.param_len()
    }

    pub fn join(&self, thetas: &[ParamBank], phi: &ParamBank) -> Result<Vec<f64>> {
        if thetas.len() != self.k() {
            return Err(Error::LengthMismatch {
                expected: self.k(),
                found: thetas.len(),
            });
        }
        let mut flat = Vec::with_capacity(self.param_len());
        for (k, b) in thetas.iter().enumerate() {
            if b.len() != self.theta_range(k).len() {
                return Err(Error::LengthMismatch {
                    expected: self.theta_range(k).len(),
                    found: b.len(),
                });
            }
            flat.extend_from_slice(b.values());
        }
        if phi.len() != self.selector.param_len() {
            return Err(Error::LengthMismatch {
                expected: self.selector.param_len(),
                found: phi.len(),
            });
        }
        flat.extend_from_slice(phi.values());
        Ok(flat)
    }

    pub fn split(&self, flat: &[f64]) -> Result<(Vec<ParamBank>, ParamBank)> {
        self.check_len(flat)?;
        let thetas = self
            .models
            .iter()
            .enumerate()
            .map(|(k, m)| m.bank_from(flat[self.theta_range(k)].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let phi = self.selector.bank_from(flat[self.phi_range()].to_vec())?;
        Ok((thetas, phi))
    }

    fn check_len(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_len() {
            return Err(Error::LengthMismatch {
                expected: self.param_len(),
                found: params.len(),
            });
        }
        Ok(())
    }

    pub fn base_probs(&self, params: &[f64], x: &Sample) -> Result<Vec<f64>> {
        self.models
            .iter()
            .enumerate()
            .map(|(k, m)| m.predict(&params[self.theta_range(k)], x))
            .collect()
    }

    pub fn lambda(&self, params: &[f64], x: &Sample) -> Result<Vec<f64>> {
        self.check_len(params)?;
        Ok(self.selector.select(&params[self.phi_range()], x)?.1.lambda)
    }

    pub fn predict(&self, params: &[f64], x: &Sample) -> Result<MixOutput> {
        self.check_len(params)?;
        let (lambda, _) = self.selector.select(&params[self.phi_range()], x)?;
        let base_probs = self.base_probs(params, x)?;
        let prob = mix(&lambda, &DenseVec::new(base_probs.clone())?)?;
        Ok(MixOutput {
            prob,
            lambda: lambda.into_vec(),
            base_probs,
        })
    }

    /// Mixture prediction with a fixed weight vector instead of the selector.
    pub fn predict_with_lambda(&self, params: &[f64], lambda: &[f64], x: &Sample) -> Result<f64> {
        self.check_len(params)?;
        let base = self.base_probs(params, x)?;
        mix(&DenseVec::new(lambda.to_vec())?, &DenseVec::new(base)?)
    }

    pub fn mean_loss(&self, params: &[f64], batch: &[Sample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty("mixture batch"));
        }
        let mut total = 0.0;
        for x in batch {
            total += logloss_unchecked(self.predict(params, x)?.prob, x.label);
        }
        Ok(total / batch.len() as f64)
    }

    /// Mean mixture log-loss over `batch` and its gradient with respect to
    /// the joint vector. Segments outside `scope` are left at zero.
    pub fn grad_batch(&self, params: &[f64], batch: &[Sample], scope: GradScope) -> Result<(f64, Vec<f64>)> {
        self.check_len(params)?;
        if batch.is_empty() {
            return Err(Error::Empty("mixture batch"));
        }
        let k = self.k();
        let scale = 1.0 / batch.len() as f64;
        let mut grad = vec![0.0; self.param_len()];
        let mut total = 0.0;
        let mut probs = vec![0.0; k];
        let mut caches = Vec::with_capacity(k);
        let mut d_lambda = vec![0.0; k];
        for x in batch {
            let (_, sc) = self.selector.select(&params[self.phi_range()], x)?;
            caches.clear();
            for (j, m) in self.models.iter().enumerate() {
                let (p, c) = m.forward(&params[self.theta_range(j)], x, None)?;
                probs[j] = p;
                caches.push(c);
            }
            let raw = crate::numkit::dot(&sc.lambda, &probs);
            let p = clamp_prob(raw);
            total += logloss_unchecked(p, x.label);
            let d_p = if p == raw {
                scale * logloss_slope(p, x.label)
            } else {
                0.0
            };
            if d_p == 0.0 {
                continue;
            }
            if scope.theta {
                for (j, m) in self.models.iter().enumerate() {
                    let r = self.theta_range(j);
                    let d_logit = d_p * sc.lambda[j] * caches[j].slope;
                    m.backward(&params[r.clone()], x, &caches[j], d_logit, &mut grad[r]);
                }
            }
            if scope.phi {
                for (dl, &pk) in d_lambda.iter_mut().zip(&probs) {
                    *dl = d_p * pk;
                }
                let r = self.phi_range();
                self.selector
                    .backward(&params[r.clone()], x, &sc, &d_lambda, &mut grad[r]);
            }
        }
        Ok((total * scale, grad))
    }
}

/// Joint mixture loss and gradient from separate banks; the gradient is laid
/// out as `(θ_1, .., θ_K, φ)`.
pub fn grad_mixture_batch(
    selector: &Selector,
    phi: &ParamBank,
    models: &[Model],
    thetas: &[ParamBank],
    batch: &[Sample],
) -> Result<(f64, Vec<f64>)> {
    let ens = Ensemble::new(models.to_vec(), selector.clone())?;
    let flat = ens.join(thetas, phi)?;
    ens.grad_batch(&flat, batch, GradScope::ALL)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Feature;
    use crate::models::{ModelKind, ModelSpec};

    fn space() -> FeatureSpace {
        FeatureSpace::new(vec![("a".into(), 5), ("b".into(), 4), ("c".into(), 3)]).unwrap()
    }

    fn sample(sp: &FeatureSpace, a: usize, b: usize, c: usize, y: u8) -> Sample {
        Sample::new(
            0,
            y,
            vec![
                Feature::new(0, sp.index(0, a), 1.0),
                Feature::new(1, sp.index(1, b), 1.0),
                Feature::new(2, sp.index(2, c), 1.0),
            ],
        )
        .unwrap()
    }

    fn small_spec(k: usize) -> SelectorSpec {
        SelectorSpec {
            embed_dim: 3,
            hidden_sizes: vec![6, 5],
            ..SelectorSpec::new(k, 3)
        }
    }

    #[test]
    fn zero_params_are_uniform() {
        let sp = space();
        let s = Selector::new(small_spec(4), &sp).unwrap();
        let (l, _) = s.select(s.zero_params().values(), &sample(&sp, 1, 2, 0, 1)).unwrap();
        assert_eq!(l.as_slice(), &[0.25; 4]);
        let fresh = s.init_params(&mut Rng::new(3));
        let (l, _) = s.select(fresh.values(), &sample(&sp, 4, 0, 2, 1)).unwrap();
        assert_eq!(l.as_slice(), &[0.25; 4]);
    }

    #[test]
    fn single_model_is_certain() {
        let sp = space();
        let s = Selector::new(small_spec(1), &sp).unwrap();
        let mut rng = Rng::new(5);
        let p: Vec<f64> = (0..s.param_len()).map(|_| rng.uniform(-1.0, 1.0)).collect();
        assert_eq!(s.select(&p, &sample(&sp, 0, 1, 2, 0)).unwrap().0.as_slice(), &[1.0]);
    }

    #[test]
    fn mix_examples() {
        let v = |x: &[f64]| DenseVec::new(x.to_vec()).unwrap();
        assert_eq!(mix(&v(&[1.0, 0.0, 0.0, 0.0]), &v(&[0.9, 0.1, 0.5, 0.5])).unwrap(), 0.9);
        assert!((mix(&v(&[0.25; 4]), &v(&[0.2, 0.4, 0.6, 0.8])).unwrap() - 0.5).abs() < 1e-15);
        assert!((mix(&v(&[0.3, 0.7]), &v(&[0.1, 0.9])).unwrap() - 0.66).abs() < 1e-15);
        assert!(matches!(
            mix(&v(&[1.0]), &v(&[0.5, 0.5])),
            Err(Error::LengthMismatch { .. })
        ));
    }

    fn ensemble(sp: &FeatureSpace, kinds: &[ModelKind]) -> Ensemble {
        let models = kinds
            .iter()
            .map(|&k| Model::new(ModelSpec::new(k, 3).with_latent_dim(2).with_hidden(vec![4]), sp).unwrap())
            .collect();
        Ensemble::new(models, Selector::new(small_spec(kinds.len()), sp).unwrap()).unwrap()
    }

    #[test]
    fn identical_models_give_zero_selector_gradient() {
        let sp = space();
        let ens = ensemble(&sp, &[ModelKind::Fm, ModelKind::Fm, ModelKind::Fm]);
        let mut rng = Rng::new(8);
        let theta: Vec<f64> = (0..ens.theta_range(0).len()).map(|_| rng.uniform(-0.5, 0.5)).collect();
        let mut flat = Vec::new();
        for _ in 0..3 {
            flat.extend(&theta);
        }
        flat.extend((0..ens.phi_range().len()).map(|_| rng.uniform(-0.5, 0.5)));
        let batch = vec![sample(&sp, 1, 2, 0, 1), sample(&sp, 3, 0, 2, 0)];
        let (_, g) = ens.grad_batch(&flat, &batch, GradScope::ALL).unwrap();
        assert!(g[ens.phi_range()].iter().all(|&v| v == 0.0));
        assert!(g[ens.thetas_range()].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn single_model_mixture_matches_model_gradient() {
        let sp = space();
        let ens = ensemble(&sp, &[ModelKind::Ffm]);
        let mut rng = Rng::new(9);
        let flat: Vec<f64> = (0..ens.param_len()).map(|_| rng.uniform(-0.5, 0.5)).collect();
        let batch = vec![
            sample(&sp, 1, 2, 0, 1),
            sample(&sp, 3, 0, 2, 0),
            sample(&sp, 0, 3, 1, 1),
        ];
        let (l, g) = ens.grad_batch(&flat, &batch, GradScope::ALL).unwrap();
        let (lm, gm) = ens.models()[0]
            .grad_batch(&flat[ens.theta_range(0)], &batch, None)
            .unwrap();
        assert!((l - lm).abs() < 1e-15);
        for (a, b) in g[ens.theta_range(0)].iter().zip(&gm) {
            assert!((a - b).abs() <= 1e-15 * (1.0 + b.abs()));
        }
        assert!(g[ens.phi_range()].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn descriptor_roundtrip() {
        let spec = SelectorSpec {
            ignored_fields: vec![1],
            ..small_spec(3)
        };
        assert_eq!(spec.descriptor().parse::<SelectorSpec>().unwrap(), spec);
    }

    #[test]
    fn join_split_roundtrip() {
        let sp = space();
        let ens = ensemble(&sp, &[ModelKind::Lr, ModelKind::DeepFm]);
        let mut rng = Rng::new(1);
        let flat: Vec<f64> = (0..ens.param_len()).map(|_| rng.normal()).collect();
        let (t, p) = ens.split(&flat).unwrap();
        assert_eq!(ens.join(&t, &p).unwrap(), flat);
    }
}
