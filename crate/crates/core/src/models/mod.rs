//! Base CTR predictors: logistic regression, factorization machines,
//! field-aware factorization machines and DeepFM.
//!
//! Every model reads its parameters from a flat `&[f64]` laid out by its
//! [`ParamBank`] segment table, and writes analytic gradients into a flat
//! buffer of the same length. This keeps the meta-learner free to treat the
//! concatenation of all banks as a single vector.

mod optim;
mod pretrain;

use std::fmt;
use std::str::FromStr;

pub use optim::{Adam, AdamConfig, Ftrl, FtrlConfig};
pub use pretrain::{pretrain, PretrainConfig, PretrainLog};

use crate::data::{FeatureSpace, Sample};
use crate::dense::{Mlp, MlpCache};
use crate::numkit::{logloss_slope, logloss_unchecked, sigmoid_with_slope, DenseVec, Rng};
use crate::{Error, Result};

/// Initialisation half-width for linear weights and embeddings.
pub const INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    Lr,
    Fm,
    Ffm,
    DeepFm,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Lr => "LR",
            ModelKind::Fm => "FM",
            ModelKind::Ffm => "FFM",
            ModelKind::DeepFm => "DeepFM",
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lr" => Ok(ModelKind::Lr),
            "fm" => Ok(ModelKind::Fm),
            "ffm" => Ok(ModelKind::Ffm),
            "deepfm" => Ok(ModelKind::DeepFm),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub latent_dim: usize,
    pub num_fields: usize,
    pub hidden_sizes: Vec<usize>,
    /// DeepFM inverted-dropout keep probability, used only while pretraining.
    pub keep_prob: f64,
    /// Fields this model does not read.
    pub ignored_fields: Vec<usize>,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, num_fields: usize) -> Self {
        ModelSpec {
            kind,
            latent_dim: 10,
            num_fields,
            hidden_sizes: vec![256, 256, 256],
            keep_prob: 0.9,
            ignored_fields: Vec::new(),
        }
    }

    pub fn with_latent_dim(mut self, d: usize) -> Self {
        self.latent_dim = d;
        self
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden_sizes = hidden;
        self
    }

    pub fn with_ignored_fields(mut self, fields: Vec<usize>) -> Self {
        self.ignored_fields = fields;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_fields == 0 {
            return Err(Error::Config("model needs at least one field".into()));
        }
        if self.kind != ModelKind::Lr && self.latent_dim == 0 {
            return Err(Error::Config(format!("{} needs latent_dim > 0", self.kind)));
        }
        if self.kind == ModelKind::DeepFm && (self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0)) {
            return Err(Error::Config("DeepFM needs nonempty, positive hidden sizes".into()));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(Error::Config(format!("keep_prob {} outside (0, 1]", self.keep_prob)));
        }
        if let Some(&f) = self.ignored_fields.iter().find(|&&f| f >= self.num_fields) {
            return Err(Error::Config(format!(
                "ignored field {f} >= num_fields {}",
                self.num_fields
            )));
        }
        Ok(())
    }
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| Error::Config(format!("invalid integer {t:?}"))))
        .collect()
}

/// Round-trippable one-line descriptor, stored in checkpoint headers.
impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "kind={} latent_dim={} num_fields={} hidden={} keep_prob={} ignored_fields={}",
            self.kind.name().to_ascii_lowercase(),
            self.latent_dim,
            self.num_fields,
            join(&self.hidden_sizes),
            self.keep_prob,
            join(&self.ignored_fields)
        )
    }
}

impl FromStr for ModelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut spec = ModelSpec::new(ModelKind::Lr, 1);
        for tok in s.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad model descriptor token {tok:?}")))?;
            let num = || {
                v.parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad value in {tok:?}")))
            };
            match k {
                "kind" => spec.kind = v.parse()?,
                "latent_dim" => spec.latent_dim = num()?,
                "num_fields" => spec.num_fields = num()?,
                "hidden" => spec.hidden_sizes = parse_list(v)?,
                "keep_prob" => {
                    spec.keep_prob = v.parse().map_err(|_| Error::Config(format!("bad value in {tok:?}")))?
                }
                "ignored_fields" => spec.ignored_fields = parse_list(v)?,
                other => return Err(Error::Config(format!("unknown model descriptor key {other:?}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSegment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub shape: Vec<usize>,
}

/// Flat parameter vector with a named, disjoint, exhaustive segment table.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBank {
    pub flat: DenseVec,
    pub segments: Vec<ParamSegment>,
}

impl ParamBank {
    pub fn new(flat: DenseVec, segments: Vec<ParamSegment>) -> Result<Self> {
        let mut cursor = 0;
        for s in &segments {
            if s.offset != cursor {
                return Err(Error::InvalidArgument(format!("segment {} is not contiguous", s.name)));
            }
            cursor += s.len;
        }
        if cursor != flat.len() {
            return Err(Error::LengthMismatch {
                expected: cursor,
                found: flat.len(),
            });
        }
        for (i, a) in segments.iter().enumerate() {
            if segments[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::InvalidArgument(format!("duplicate segment {}", a.name)));
            }
        }
        Ok(ParamBank { flat, segments })
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        self.flat.as_slice()
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        self.flat.as_mut_slice()
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.flat.as_slice()[s.offset..s.offset + s.len])
    }

    pub fn segment_info(&self, name: &str) -> Option<&ParamSegment> {
        self.segments.iter().find(|s| s.name == name)
    }
}

/// Forward intermediates kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    pub logit: f64,
    pub prob: f64,
    /// `dprob/dlogit`, zero when the probability clamp is active.
    pub slope: f64,
    /// FM/DeepFM: `s_k = sum_i V[i,k] x_i`.
    sums: Vec<f64>,
    mlp: Option<MlpCache>,
}

/// A base model bound to a feature space: spec plus precomputed layout.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    num_features: usize,
    reads_field: Vec<bool>,
    segments: Vec<ParamSegment>,
    w_off: usize,
    b_off: usize,
    v_off: usize,
    mlp: Option<(Mlp, usize)>,
    len: usize,
}

impl Model {
    pub fn new(spec: ModelSpec, space: &FeatureSpace) -> Result<Self> {
        spec.validate()?;
        if spec.num_fields != space.num_fields() {
            return Err(Error::Config(format!(
                "model declares {} fields, feature space has {}",
                spec.num_fields,
                space.num_fields()
            )));
        }
        Self::with_dims(spec, space.num_features())
    }

    /// Layout from raw dimensions, for callers without a [`FeatureSpace`].
    pub fn with_dims(spec: ModelSpec, num_features: usize) -> Result<Self> {
        spec.validate()?;
        let n = num_features;
        let d = spec.latent_dim;
        let f = spec.num_fields;
        let mut segments = Vec::new();
        let mut off = 0;
        let mut push = |name: &str, len: usize, shape: Vec<usize>, off: &mut usize| {
            segments.push(ParamSegment {
                name: name.to_string(),
                offset: *off,
                len,
                shape,
            });
            *off += len;
        };
        let w_off = off;
        push("w", n, vec![n], &mut off);
        let b_off = off;
        push("b", 1, vec![1], &mut off);
        let v_off = off;
        match spec.kind {
            ModelKind::Lr => {}
            ModelKind::Fm | ModelKind::DeepFm => push("v", n * d, vec![n, d], &mut off),
            ModelKind::Ffm => push("v", n * f * d, vec![n, f, d], &mut off),
        }
        let mlp = if spec.kind == ModelKind::DeepFm {
            let mut sizes = vec![f * d];
            sizes.extend(&spec.hidden_sizes);
            sizes.push(1);
            let mlp = Mlp::new(sizes);
            let base = off;
            for (name, rel, len, shape) in mlp.segments("mlp") {
                debug_assert_eq!(base + rel, off);
                push(&name, len, shape, &mut off);
            }
            Some((mlp, base))
        } else {
            None
        };
        let mut reads_field = vec![true; f];
        for &i in &spec.ignored_fields {
            reads_field[i] = false;
        }
        Ok(Model {
            spec,
            num_features: n,
            reads_field,
            segments,
            w_off,
            b_off,
            v_off,
            mlp,
            len: off,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn param_len(&self) -> usize {
        self.len
    }

    pub fn segments(&self) -> &[ParamSegment] {
        &self.segments
    }

    /// Linear weights and embeddings ~ U(-0.01, 0.01), biases 0, dense tower
    /// layers Glorot-uniform.
    pub fn init_params(&self, rng: &mut Rng) -> ParamBank {
        let mut flat = vec![0.0; self.len];
        for x in &mut flat[self.w_off..self.b_off] {
            *x = rng.uniform(-INIT_SCALE, INIT_SCALE);
        }
        let v_end = self.mlp.as_ref().map_or(self.len, |(_, o)| *o);
        for x in &mut flat[self.v_off..v_end] {
            *x = rng.uniform(-INIT_SCALE, INIT_SCALE);
        }
        if let Some((mlp, off)) = &self.mlp {
            mlp.init(&mut flat[*off..], rng, false);
        }
        self.bank_from(flat).expect("layout is consistent")
    }

    pub fn zero_params(&self) -> ParamBank {
        self.bank_from(vec![0.0; self.len]).expect("layout is consistent")
    }

    pub fn bank_from(&self, flat: Vec<f64>) -> Result<ParamBank> {
        ParamBank::new(DenseVec::new(flat)?, self.segments.clone())
    }

    fn check(&self, x: &Sample) -> Result<()> {
        for f in &x.features {
            if f.field as usize >= self.spec.num_fields {
                return Err(Error::FieldOutOfRange {
                    field: f.field as usize,
                    num_fields: self.spec.num_fields,
                });
            }
            if f.index as usize >= self.num_features {
                return Err(Error::IndexOutOfRange {
                    index: f.index as usize,
                    num_features: self.num_features,
                });
            }
        }
        Ok(())
    }

    #[inline]
    fn active<'a>(&'a self, x: &'a Sample) -> impl Iterator<Item = (usize, usize, f64)> + 'a {
        x.features
            .iter()
            .filter(move |f| self.reads_field[f.field as usize])
            .map(|f| (f.field as usize, f.index as usize, f.value as f64))
    }

    /// Prediction for one sample. Dropout (DeepFM only) runs iff `dropout` is given.
    pub fn forward(&self, params: &[f64], x: &Sample, dropout: Option<&mut Rng>) -> Result<(f64, ForwardCache)> {
        if params.len() != self.len {
            return Err(Error::LengthMismatch {
                expected: self.len,
                found: params.len(),
            });
        }
        self.check(x)?;
        let mut cache = ForwardCache::default();
        let d = self.spec.latent_dim;
        let mut z = params[self.b_off];
        for (_, i, v) in self.active(x) {
            z += params[self.w_off + i] * v;
        }
        match self.spec.kind {
            ModelKind::Lr => {}
            ModelKind::Fm | ModelKind::DeepFm => {
                let mut sums = vec![0.0; d];
                let mut sq = 0.0;
                for (_, i, v) in self.active(x) {
                    let row = &params[self.v_off + i * d..self.v_off + (i + 1) * d];
                    for (s, &vk) in sums.iter_mut().zip(row) {
                        *s += vk * v;
                        sq += vk * vk * v * v;
                    }
                }
                z += 0.5 * (sums.iter().map(|s| s * s).sum::<f64>() - sq);
                cache.sums = sums;
            }
            ModelKind::Ffm => {
                let act: Vec<(usize, usize, f64)> = self.active(x).collect();
                for p in 0..act.len() {
                    for q in p + 1..act.len() {
                        let (fp, ip, vp) = act[p];
                        let (fq, iq, vq) = act[q];
                        let a = self.ffm_row(params, ip, fq);
                        let b = self.ffm_row(params, iq, fp);
                        z += crate::numkit::dot(a, b) * vp * vq;
                    }
                }
            }
        }
        if let Some((mlp, off)) = &self.mlp {
            let embed = self.field_embeddings(params, x);
            let keep = self.spec.keep_prob;
            let mc = mlp.forward(&params[*off..], &embed, dropout.map(|r| (keep, r)));
            z += mc.output()[0];
            cache.mlp = Some(mc);
        }
        if !z.is_finite() {
            return Err(Error::NonFinite(format!("{} logit", self.spec.kind)));
        }
        let (p, slope) = sigmoid_with_slope(z);
        cache.logit = z;
        cache.prob = p;
        cache.slope = slope;
        Ok((p, cache))
    }

    #[inline]
    fn ffm_row<'a>(&self, params: &'a [f64], index: usize, field: usize) -> &'a [f64] {
        let d = self.spec.latent_dim;
        let start = self.v_off + (index * self.spec.num_fields + field) * d;
        &params[start..start + d]
    }

    /// Concatenated per-field embeddings `e_f = sum_{i in f} x_i V_i`.
    fn field_embeddings(&self, params: &[f64], x: &Sample) -> Vec<f64> {
        let d = self.spec.latent_dim;
        let mut e = vec![0.0; self.spec.num_fields * d];
        for (f, i, v) in self.active(x) {
            let row = &params[self.v_off + i * d..self.v_off + (i + 1) * d];
            crate::numkit::axpy(v, row, &mut e[f * d..(f + 1) * d]);
        }
        e
    }

    /// Accumulate `d_logit * dlogit/dparams` into `grad`.
    pub fn backward(&self, params: &[f64], x: &Sample, cache: &ForwardCache, d_logit: f64, grad: &mut [f64]) {
        if d_logit == 0.0 {
            return;
        }
        let d = self.spec.latent_dim;
        grad[self.b_off] += d_logit;
        for (_, i, v) in self.active(x) {
            grad[self.w_off + i] += d_logit * v;
        }
        match self.spec.kind {
            ModelKind::Lr => {}
            ModelKind::Fm | ModelKind::DeepFm => {
                for (_, i, v) in self.active(x) {
                    let base = self.v_off + i * d;
                    for k in 0..d {
                        grad[base + k] += d_logit * (v * cache.sums[k] - params[base + k] * v * v);
                    }
                }
            }
            ModelKind::Ffm => {
                let act: Vec<(usize, usize, f64)> = self.active(x).collect();
                let nf = self.spec.num_fields;
                for p in 0..act.len() {
                    for q in p + 1..act.len() {
                        let (fp, ip, vp) = act[p];
                        let (fq, iq, vq) = act[q];
                        let scale = d_logit * vp * vq;
                        let a = self.v_off + (ip * nf + fq) * d;
                        let b = self.v_off + (iq * nf + fp) * d;
                        for k in 0..d {
                            let (pa, pb) = (params[a + k], params[b + k]);
                            grad[a + k] += scale * pb;
                            grad[b + k] += scale * pa;
                        }
                    }
                }
            }
        }
        if let (Some((mlp, off)), Some(mc)) = (&self.mlp, &cache.mlp) {
            let mut d_embed = vec![0.0; mlp.input_dim()];
            let (head, tail) = grad.split_at_mut(*off);
            mlp.backward(&params[*off..], mc, &[d_logit], tail, Some(&mut d_embed));
            for (f, i, v) in self.active(x) {
                let base = self.v_off + i * d;
                crate::numkit::axpy(v, &d_embed[f * d..(f + 1) * d], &mut head[base..base + d]);
            }
        }
    }

    /// Mean clamped log-loss over `batch` and its exact gradient. Per-sample
    /// `weights` scale each sample's loss (default all ones); dropout is off.
    pub fn grad_batch(&self, params: &[f64], batch: &[Sample], weights: Option<&[f64]>) -> Result<(f64, Vec<f64>)> {
        let refs: Vec<&Sample> = batch.iter().collect();
        self.grad_batch_refs(params, &refs, weights, None)
    }

    pub(crate) fn grad_batch_refs(
        &self,
        params: &[f64],
        batch: &[&Sample],
        weights: Option<&[f64]>,
        mut dropout: Option<&mut Rng>,
    ) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::Empty("gradient batch"));
        }
        if let Some(w) = weights {
            if w.len() != batch.len() {
                return Err(Error::LengthMismatch {
                    expected: batch.len(),
                    found: w.len(),
                });
            }
        }
        let mut grad = vec![0.0; self.len];
        let mut loss = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for (j, x) in batch.iter().enumerate() {
            let w = weights.map_or(1.0, |w| w[j]);
            let (p, cache) = self.forward(params, x, dropout.as_deref_mut())?;
            loss += w * logloss_unchecked(p, x.label);
            let d_logit = scale * w * logloss_slope(p, x.label) * cache.slope;
            self.backward(params, x, &cache, d_logit, &mut grad);
        }
        Ok((loss * scale, grad))
    }

    /// Mean log-loss over a batch without gradients.
    pub fn mean_loss(&self, params: &[f64], batch: &[Sample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty("loss batch"));
        }
        let mut loss = 0.0;
        for x in batch {
            let (p, _) = self.forward(params, x, None)?;
            loss += logloss_unchecked(p, x.label);
        }
        Ok(loss / batch.len() as f64)
    }

    pub fn predict(&self, params: &[f64], x: &Sample) -> Result<f64> {
        Ok(self.forward(params, x, None)?.0)
    }
}
