//! Fully connected ReLU stacks over a flat parameter slice.
//!
//! Used by the DeepFM tower, the model selector and the trained level
//! selectors. Hidden layers use ReLU (optionally followed by inverted dropout);
//! the output layer is linear.

use crate::numkit::Rng;

/// Layer widths `[input, hidden.., output]`. Parameters for each layer are a
/// row-major `out x in` weight matrix followed by `out` biases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    sizes: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct MlpCache {
    /// `acts[0]` is the input, `acts[l]` the (post-dropout) output of layer `l`.
    acts: Vec<Vec<f64>>,
    /// Post-ReLU, pre-dropout hidden activations.
    relu: Vec<Vec<f64>>,
    /// Inverted-dropout scale per hidden unit (`0` or `1/keep`), if dropout ran.
    masks: Vec<Option<Vec<f64>>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl Mlp {
    pub fn new(sizes: Vec<usize>) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output widths");
        Mlp { sizes }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// `(name, relative offset, len, shape)` for every weight and bias block.
    pub fn segments(&self, prefix: &str) -> Vec<(String, usize, usize, Vec<usize>)> {
        let mut out = Vec::new();
        let mut off = 0;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            out.push((format!("{prefix}.l{l}.w"), off, fan_in * fan_out, vec![fan_out, fan_in]));
            off += fan_in * fan_out;
            out.push((format!("{prefix}.l{l}.b"), off, fan_out, vec![fan_out]));
            off += fan_out;
        }
        out
    }

    /// Glorot-uniform weights, zero biases. With `zero_output` the final layer
    /// starts at exactly zero.
    pub fn init(&self, params: &mut [f64], rng: &mut Rng, zero_output: bool) {
        debug_assert_eq!(params.len(), self.param_count());
        let mut off = 0;
        let last = self.num_layers() - 1;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut params[off..off + fan_in * fan_out] {
                *p = if zero_output && l == last {
                    0.0
                } else {
                    rng.uniform(-limit, limit)
                };
            }
            off += fan_in * fan_out;
            params[off..off + fan_out].fill(0.0);
            off += fan_out;
        }
    }

    pub fn forward(&self, params: &[f64], input: &[f64], mut dropout: Option<(f64, &mut Rng)>) -> MlpCache {
        debug_assert_eq!(input.len(), self.input_dim());
        let layers = self.num_layers();
        let mut cache = MlpCache {
            acts: Vec::with_capacity(layers + 1),
            relu: Vec::with_capacity(layers.saturating_sub(1)),
            masks: Vec::with_capacity(layers.saturating_sub(1)),
        };
        cache.acts.push(input.to_vec());
        let mut off = 0;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = &params[off..off + fan_in * fan_out];
            let biases = &params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            off += fan_in * fan_out + fan_out;
            let prev = &cache.acts[l];
            let mut out: Vec<f64> = biases.to_vec();
            for (o, row) in out.iter_mut().zip(weights.chunks_exact(fan_in)) {
                *o += crate::numkit::dot(row, prev);
            }
            if l + 1 < layers {
                for o in out.iter_mut() {
                    *o = o.max(0.0);
                }
                let relu = out.clone();
                let mask = match dropout.as_mut() {
                    Some((keep, rng)) if *keep < 1.0 => {
                        let scale = 1.0 / *keep;
                        let m: Vec<f64> = (0..fan_out)
                            .map(|_| if rng.bernoulli(*keep) { scale } else { 0.0 })
                            .collect();
                        for (o, s) in out.iter_mut().zip(&m) {
                            *o *= s;
                        }
                        Some(m)
                    }
                    _ => None,
                };
                cache.relu.push(relu);
                cache.masks.push(mask);
            }
            cache.acts.push(out);
        }
        cache
    }

    /// Accumulates parameter gradients into `grad` and, when requested, the
    /// gradient with respect to the input into `d_input` (overwritten).
    pub fn backward(
        &self,
        params: &[f64],
        cache: &MlpCache,
        d_out: &[f64],
        grad: &mut [f64],
        d_input: Option<&mut [f64]>,
    ) {
        let layers = self.num_layers();
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for w in self.sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        let want_input = d_input.is_some();
        let mut delta = d_out.to_vec();
        for l in (0..layers).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            if l + 1 < layers {
                // delta is currently d(acts[l+1]); push through dropout and ReLU
                if let Some(mask) = &cache.masks[l] {
                    for (d, m) in delta.iter_mut().zip(mask) {
                        *d *= m;
                    }
                }
                for (d, &r) in delta.iter_mut().zip(&cache.relu[l]) {
                    if r <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let base = offsets[l];
            let prev = &cache.acts[l];
            let need_prev_delta = l > 0 || want_input;
            let mut prev_delta = if need_prev_delta { vec![0.0; fan_in] } else { Vec::new() };
            for (j, &dj) in delta.iter().enumerate().take(fan_out) {
                if dj == 0.0 {
                    continue;
                }
                let row = base + j * fan_in;
                crate::numkit::axpy(dj, prev, &mut grad[row..row + fan_in]);
                grad[base + fan_in * fan_out + j] += dj;
                if need_prev_delta {
                    crate::numkit::axpy(dj, &params[row..row + fan_in], &mut prev_delta);
                }
            }
            delta = prev_delta;
        }
        if let Some(d_in) = d_input {
            d_in.copy_from_slice(&delta);
        }
    }
}
