//! Numeric substrate shared by every other module: checked dense vectors,
//! the seeded generator, and the stable sigmoid / softmax / log-loss trio.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Probability clamp applied to every probability output and before every log.
pub const PROB_EPS: f64 = 1e-7;

/// A fixed-length vector of finite 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVec(Vec<f64>);

impl DenseVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("entry {i} of dense vector")));
        }
        Ok(DenseVec(values))
    }

    pub fn zeros(len: usize) -> Self {
        DenseVec(vec![0.0; len])
    }

    pub fn filled(len: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Mutable access for in-place updates. Callers must keep entries finite;
    /// [`DenseVec::check_finite`] re-validates after bulk updates.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.0.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!("entry {i} of dense vector"))),
            None => Ok(()),
        }
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &DenseVec) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                found: other.len(),
            });
        }
        Ok(dot(&self.0, &other.0))
    }
}

impl std::ops::Index<usize> for DenseVec {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl AsRef<[f64]> for DenseVec {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a * x`
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn norm2(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Clamp a probability into `[PROB_EPS, 1 - PROB_EPS]`.
#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Logistic function evaluated without overflow, then clamped.
pub fn stable_sigmoid(z: f64) -> Result<f64> {
    if !z.is_finite() {
        return Err(Error::NonFinite(format!("sigmoid input {z}")));
    }
    Ok(clamp_prob(raw_sigmoid(z)))
}

/// Unclamped logistic; the caller guarantees `z` is finite.
#[inline]
pub(crate) fn raw_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid with its derivative factor `dp/dz`, which is zero whenever the
/// clamp is active.
#[inline]
pub(crate) fn sigmoid_with_slope(z: f64) -> (f64, f64) {
    let raw = raw_sigmoid(z);
    let p = clamp_prob(raw);
    if p != raw {
        (p, 0.0)
    } else {
        (p, p * (1.0 - p))
    }
}

pub fn softmax(logits: &DenseVec) -> Result<DenseVec> {
    if logits.is_empty() {
        return Err(Error::Empty("softmax logits"));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits.as_slice(), &mut out);
    Ok(DenseVec(out))
}

/// Max-subtracted softmax written into `out`; `logits` must be nonempty and finite.
pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Backward pass of softmax: given `probs = softmax(z)` and `d_probs`,
/// writes `d_logits[j] = probs[j] * sum_i probs[i] * (d_probs[j] - d_probs[i])`.
///
/// Algebraically this is `probs[j] * (d_probs[j] - <probs, d_probs>)`; the
/// pairwise form makes a constant `d_probs` map to exactly zero.
pub(crate) fn softmax_backward(probs: &[f64], d_probs: &[f64], d_logits: &mut [f64]) {
    for (j, dl) in d_logits.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (&p, &d) in probs.iter().zip(d_probs) {
            acc += p * (d_probs[j] - d);
        }
        *dl = probs[j] * acc;
    }
}

/// Binary cross-entropy of a probability against a `{0, 1}` label. The
/// probability is clamped before the log.
pub fn clamped_logloss(p: f64, y: u8) -> Result<f64> {
    if y > 1 {
        return Err(Error::InvalidLabel(y as i64));
    }
    if p.is_nan() {
        return Err(Error::NonFinite("log-loss probability".into()));
    }
    Ok(logloss_unchecked(p, y))
}

#[inline]
pub(crate) fn logloss_unchecked(p: f64, y: u8) -> f64 {
    let p = clamp_prob(p);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// `d logloss / d p` at an already clamped probability.
#[inline]
pub(crate) fn logloss_slope(p: f64, y: u8) -> f64 {
    if y == 1 {
        -1.0 / p
    } else {
        1.0 / (1.0 - p)
    }
}

/// Deterministic generator owned by a single run.
///
/// Backed by ChaCha8, a counter-based stream cipher: the same seed and the
/// same sequence of calls always yield the same stream on every platform.
/// Consumers draw in a fixed order: user shuffles, parameter init, pretraining
/// shuffles and dropout masks, then episode sampling.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream keyed by `tag`, leaving `self` untouched.
    pub fn fork(&self, tag: u64) -> Rng {
        let mixed =
            self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17) ^ tag.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
        Rng::new(mixed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen()
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `0..n`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `m` distinct indices from `0..n` in draw order.
    pub fn choose_distinct(&mut self, n: usize, m: usize) -> Vec<usize> {
        let mut pool: Vec<usize> = (0..n).collect();
        let m = m.min(n);
        for i in 0..m {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(m);
        pool
    }
}

#[cfg(test)]
mod tests {
    use super::Rng;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sigmoid_examples() {
        assert_eq!(stable_sigmoid(0.0).unwrap(), 0.5);
        assert_eq!(stable_sigmoid(1000.0).unwrap(), 1.0 - 1e-7);
        assert_eq!(stable_sigmoid(-1000.0).unwrap(), 1e-7);
        assert!((stable_sigmoid(2.0).unwrap() - 0.8807970779778823).abs() < 1e-15);
        assert!((stable_sigmoid(-700.0).unwrap() - 1e-7).abs() < 1e-20);
        assert!(stable_sigmoid(f64::NAN).is_err());
        assert!(stable_sigmoid(f64::INFINITY).is_err());
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&DenseVec::zeros(4)).unwrap();
        assert_eq!(u.as_slice(), &[0.25; 4]);
        for c in [-50.0, 0.0, 3.5, 1e6] {
            let one = softmax(&DenseVec::new(vec![c]).unwrap()).unwrap();
            assert_eq!(one.as_slice(), &[1.0]);
        }
        let s = softmax(&DenseVec::new(vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let expected = [0.09003057, 0.24472847, 0.66524096];
        for (a, b) in s.as_slice().iter().zip(expected) {
            assert!((a - b).abs() < 5e-9, "{a} vs {b}");
        }
        assert!(matches!(softmax(&DenseVec::new(vec![]).unwrap()), Err(Error::Empty(_))));
    }

    #[test]
    fn logloss_examples() {
        assert!((clamped_logloss(0.5, 1).unwrap() - std::f64::consts::LN_2).abs() < 1e-16);
        let near = clamped_logloss(1.0 - PROB_EPS, 1).unwrap();
        assert!(near > 0.0 && near <= 1.0000001e-7);
        assert!((clamped_logloss(0.9, 0).unwrap() - std::f64::consts::LN_10).abs() < 1e-14);
        assert!(matches!(clamped_logloss(0.5, 2), Err(Error::InvalidLabel(2))));
        // exact 0/1 are clamped rather than producing infinities
        assert!(clamped_logloss(0.0, 1).unwrap().is_finite());
        assert!(clamped_logloss(1.0, 0).unwrap().is_finite());
    }

    #[test]
    fn logloss_monotone_on_grid() {
        let grid: Vec<f64> = (1..=1000).map(|i| i as f64 / 1001.0).collect();
        for w in grid.windows(2) {
            assert!(clamped_logloss(w[1], 1).unwrap() < clamped_logloss(w[0], 1).unwrap());
            assert!(clamped_logloss(w[1], 0).unwrap() > clamped_logloss(w[0], 0).unwrap());
        }
    }

    #[test]
    fn dense_vec_rejects_non_finite() {
        assert!(DenseVec::new(vec![1.0, f64::NAN]).is_err());
        assert!(DenseVec::new(vec![f64::NEG_INFINITY]).is_err());
        assert_eq!(DenseVec::zeros(3).len(), 3);
    }

    #[test]
    fn rng_reproducible() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::new(43);
        assert_ne!(Rng::new(42).next_u64(), c.next_u64());
    }

    #[test]
    fn choose_distinct_is_distinct() {
        let mut rng = Rng::new(5);
        let mut picked = rng.choose_distinct(20, 10);
        picked.sort_unstable();
        picked.dedup();
        assert_eq!(picked.len(), 10);
        assert!(picked.iter().all(|&i| i < 20));
    }

    proptest! {
        // beyond a logit spread of ~36, 1 - e^-spread rounds to 1.0 in f64
        #[test]
        fn softmax_on_open_simplex(logits in prop::collection::vec(-15.0f64..15.0, 1..=16)) {
            let s = softmax(&DenseVec::new(logits).unwrap()).unwrap();
            let total: f64 = s.as_slice().iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            if s.len() > 1 {
                prop_assert!(s.as_slice().iter().all(|&p| p > 0.0 && p < 1.0));
            }
        }

        #[test]
        fn softmax_shift_invariant(
            logits in prop::collection::vec(-30.0f64..30.0, 1..=16),
            c in -100.0f64..100.0,
        ) {
            let a = softmax(&DenseVec::new(logits.clone()).unwrap()).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
            let b = softmax(&DenseVec::new(shifted).unwrap()).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
