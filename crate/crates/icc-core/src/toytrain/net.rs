//! The network: a stack of (linear -> normalization -> ReLU -> dropout)
//! hidden blocks and a linear softmax head. Normalization uses batch
//! statistics while training and running statistics at inference; the
//! post-normalization, pre-ReLU values are what gets dumped for analysis.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub(crate) const BN_EPS: f64 = 1e-5;
const MOMENTUM: f64 = 0.1; // running-statistics update rate

#[derive(Clone, Debug)]
pub struct LinearBn {
    /// (fan_in, width); applied as x @ w, no bias (the shift is beta's job).
    pub w: Array2<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

#[derive(Clone, Debug)]
pub struct ToyNet {
    pub hidden: Vec<LinearBn>,
    pub out_w: Array2<f64>,
    pub out_b: Array1<f64>,
}

/// Per-layer cache of a training-mode forward pass, kept for backprop.
pub(crate) struct ForwardCache {
    /// Input to each hidden layer (activations of the previous one).
    inputs: Vec<Array2<f64>>,
    z: Vec<Array2<f64>>,
    mean: Vec<Array1<f64>>,
    var: Vec<Array1<f64>>,
    xhat: Vec<Array2<f64>>,
    preact: Vec<Array2<f64>>, // gamma * xhat + beta
    last: Array2<f64>,
    pub logits: Array2<f64>,
}

/// Gradients in the same shapes as the parameters.
pub(crate) struct Grads {
    pub hidden: Vec<(Array2<f64>, Array1<f64>, Array1<f64>)>, // (w, gamma, beta)
    pub out_w: Array2<f64>,
    pub out_b: Array1<f64>,
}

impl ToyNet {
    /// He-scaled Gaussian weights, identity normalization parameters.
    /// Draw order (one ChaCha stream): hidden weights layer by layer in
    /// row-major order, then the output weights.
    pub fn init(
        input_dim: usize,
        width: usize,
        depth: usize,
        n_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut linear = |fan_in: usize, fan_out: usize| -> Array2<f64> {
            let scale = (2.0 / fan_in as f64).sqrt();
            Array2::from_shape_fn((fan_in, fan_out), |_| {
                scale * rng.sample::<f64, _>(StandardNormal)
            })
        };
        let mut hidden = Vec::with_capacity(depth);
        let mut fan_in = input_dim;
        for _ in 0..depth {
            hidden.push(LinearBn {
                w: linear(fan_in, width),
                gamma: Array1::ones(width),
                beta: Array1::zeros(width),
                running_mean: Array1::zeros(width),
                running_var: Array1::ones(width),
            });
            fan_in = width;
        }
        let out_w = linear(fan_in, n_classes);
        ToyNet { hidden, out_w, out_b: Array1::zeros(n_classes) }
    }

    pub fn n_classes(&self) -> usize {
        self.out_w.ncols()
    }

    /// Inference pass: running statistics, no dropout. Returns the
    /// post-normalization pre-ReLU values per hidden layer plus the logits.
    pub fn forward_inference(&self, x: &Array2<f64>) -> (Vec<Array2<f64>>, Array2<f64>) {
        let mut a = x.clone();
        let mut preacts = Vec::with_capacity(self.hidden.len());
        for layer in &self.hidden {
            let z = a.dot(&layer.w);
            let mut y = z;
            for (mut col, ((&m, &v), (&g, &b))) in y.columns_mut().into_iter().zip(
                layer
                    .running_mean
                    .iter()
                    .zip(layer.running_var.iter())
                    .zip(layer.gamma.iter().zip(layer.beta.iter())),
            ) {
                let istd = 1.0 / (v + BN_EPS).sqrt();
                col.mapv_inplace(|z| g * ((z - m) * istd) + b);
            }
            a = y.mapv(|v| v.max(0.0));
            preacts.push(y);
        }
        let logits = a.dot(&self.out_w) + &self.out_b;
        (preacts, logits)
    }

    /// Training-mode pass with batch statistics. `masks`, when present,
    /// holds one inverted-dropout mask per hidden layer applied after ReLU.
    pub(crate) fn forward_train(
        &self,
        x: &Array2<f64>,
        masks: Option<&[Array2<f64>]>,
    ) -> ForwardCache {
        let m = x.nrows() as f64;
        let mut cache = ForwardCache {
            inputs: Vec::new(),
            z: Vec::new(),
            mean: Vec::new(),
            var: Vec::new(),
            xhat: Vec::new(),
            preact: Vec::new(),
            last: Array2::zeros((0, 0)),
            logits: Array2::zeros((0, 0)),
        };
        let mut a = x.clone();
        for (l, layer) in self.hidden.iter().enumerate() {
            let z = a.dot(&layer.w);
            let mean = z.mean_axis(Axis(0)).expect("non-empty batch");
            let var = z
                .rows()
                .into_iter()
                .fold(Array1::<f64>::zeros(z.ncols()), |acc, row| {
                    acc + (&row - &mean).mapv(|d| d * d)
                })
                / m;
            let mut xhat = z.clone();
            for (mut col, (&mu, &v)) in
                xhat.columns_mut().into_iter().zip(mean.iter().zip(var.iter()))
            {
                let istd = 1.0 / (v + BN_EPS).sqrt();
                col.mapv_inplace(|z| (z - mu) * istd);
            }
            let preact = &xhat * &layer.gamma + &layer.beta;
            let mut act = preact.mapv(|v| v.max(0.0));
            if let Some(masks) = masks {
                act *= &masks[l];
            }
            cache.inputs.push(a);
            cache.z.push(z);
            cache.mean.push(mean);
            cache.var.push(var);
            cache.xhat.push(xhat);
            cache.preact.push(preact);
            a = act;
        }
        cache.logits = a.dot(&self.out_w) + &self.out_b;
        cache.last = a;
        cache
    }

    /// Fold the batch statistics of `cache` into the running statistics.
    /// `rate` is the update weight (1.0 replaces them outright, used by the
    /// pre-training calibration pass).
    pub(crate) fn update_running_stats(&mut self, cache: &ForwardCache, rate: Option<f64>) {
        let rate = rate.unwrap_or(MOMENTUM);
        for (layer, (mean, var)) in
            self.hidden.iter_mut().zip(cache.mean.iter().zip(cache.var.iter()))
        {
            layer.running_mean = &layer.running_mean * (1.0 - rate) + &(mean * rate);
            layer.running_var = &layer.running_var * (1.0 - rate) + &(var * rate);
        }
    }

    /// Mean softmax cross-entropy of training-mode logits against integer
    /// targets, plus the L2 penalty on the linear weights.
    pub(crate) fn loss_from(&self, cache: &ForwardCache, targets: &[usize], weight_decay: f64) -> f64 {
        softmax_cross_entropy(&cache.logits, targets) + self.decay_term(weight_decay)
    }

    pub(crate) fn decay_term(&self, weight_decay: f64) -> f64 {
        if weight_decay == 0.0 {
            return 0.0;
        }
        let mut sq = self.out_w.iter().map(|w| w * w).sum::<f64>();
        for layer in &self.hidden {
            sq += layer.w.iter().map(|w| w * w).sum::<f64>();
        }
        0.5 * weight_decay * sq
    }

    /// Backpropagation through the cached forward pass. The returned
    /// gradients include the weight-decay term on all linear weights
    /// (normalization parameters and the output bias are not decayed).
    pub(crate) fn backward(
        &self,
        cache: &ForwardCache,
        targets: &[usize],
        masks: Option<&[Array2<f64>]>,
        weight_decay: f64,
    ) -> Grads {
        let m = cache.logits.nrows() as f64;
        // d loss / d logits for mean cross-entropy: (softmax - onehot) / m.
        let mut dlogits = softmax_rows(&cache.logits);
        for (s, &t) in targets.iter().enumerate() {
            dlogits[[s, t]] -= 1.0;
        }
        dlogits /= m;

        let out_w_grad = cache.last.t().dot(&dlogits) + &(weight_decay * &self.out_w);
        let out_b_grad = dlogits.sum_axis(Axis(0));
        let mut da = dlogits.dot(&self.out_w.t());

        let mut hidden = vec![None; self.hidden.len()];
        for l in (0..self.hidden.len()).rev() {
            let layer = &self.hidden[l];
            if let Some(masks) = masks {
                da *= &masks[l];
            }
            // ReLU gate on the pre-activation sign.
            let mut dy = da;
            dy.zip_mut_with(&cache.preact[l], |g, &p| {
                if p <= 0.0 {
                    *g = 0.0;
                }
            });

            let dgamma = (&dy * &cache.xhat[l]).sum_axis(Axis(0));
            let dbeta = dy.sum_axis(Axis(0));

            // Normalization backward, the standard batched form:
            // dz = istd/m * (m*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat)).
            let dxhat = &dy * &layer.gamma;
            let sum_dxhat = dxhat.sum_axis(Axis(0));
            let sum_dxhat_xhat = (&dxhat * &cache.xhat[l]).sum_axis(Axis(0));
            let batch = cache.z[l].nrows() as f64;
            let mut dz = dxhat * batch;
            dz -= &sum_dxhat;
            dz -= &(&cache.xhat[l] * &sum_dxhat_xhat);
            for (mut col, &v) in dz.columns_mut().into_iter().zip(cache.var[l].iter()) {
                let istd = 1.0 / (v + BN_EPS).sqrt();
                col.mapv_inplace(|g| g * istd / batch);
            }

            let dw = cache.inputs[l].t().dot(&dz) + &(weight_decay * &layer.w);
            da = dz.dot(&layer.w.t());
            hidden[l] = Some((dw, dgamma, dbeta));
        }
        Grads {
            hidden: hidden.into_iter().map(|g| g.expect("every layer visited")).collect(),
            out_w: out_w_grad,
            out_b: out_b_grad,
        }
    }

    /// Mutable references to every trainable parameter, in a stable order
    /// (hidden w/gamma/beta per layer, then output w/b). Running statistics
    /// are state, not parameters, and are excluded.
    pub(crate) fn params_flat_mut(&mut self) -> Vec<&mut f64> {
        let mut out: Vec<&mut f64> = Vec::new();
        for layer in &mut self.hidden {
            out.extend(layer.w.iter_mut());
            out.extend(layer.gamma.iter_mut());
            out.extend(layer.beta.iter_mut());
        }
        out.extend(self.out_w.iter_mut());
        out.extend(self.out_b.iter_mut());
        out
    }

    pub fn n_params(&self) -> usize {
        self.hidden
            .iter()
            .map(|l| l.w.len() + l.gamma.len() + l.beta.len())
            .sum::<usize>()
            + self.out_w.len()
            + self.out_b.len()
    }

    /// Training-mode batch loss (cross-entropy plus weight decay) and the
    /// analytic gradient flattened in `params_flat_mut` order. This is the
    /// hook for finite-difference probes; no dropout is applied.
    pub fn training_loss_and_grad(
        &self,
        x: &Array2<f64>,
        targets: &[usize],
        weight_decay: f64,
    ) -> (f64, Vec<f64>) {
        let cache = self.forward_train(x, None);
        let loss = self.loss_from(&cache, targets, weight_decay);
        let grads = self.backward(&cache, targets, None, weight_decay);
        (loss, grads.flat())
    }

    /// Shift one parameter by `delta`, indexing the same flat order as
    /// `training_loss_and_grad`'s gradient vector.
    pub fn nudge_param(&mut self, idx: usize, delta: f64) {
        *self.params_flat_mut()[idx] += delta;
    }
}

impl Grads {
    /// Gradient values in the same order as `params_flat_mut`.
    pub(crate) fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, gamma, beta) in &self.hidden {
            out.extend(w.iter().copied());
            out.extend(gamma.iter().copied());
            out.extend(beta.iter().copied());
        }
        out.extend(self.out_w.iter().copied());
        out.extend(self.out_b.iter().copied());
        out
    }
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Mean negative log-likelihood under row-wise softmax.
pub(crate) fn softmax_cross_entropy(logits: &Array2<f64>, targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &t) in logits.rows().into_iter().zip(targets) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        total += log_sum - row[t];
    }
    total / targets.len() as f64
}

/// Fraction of rows whose argmax (lowest index on ties) hits the target.
pub(crate) fn accuracy(logits: &Array2<f64>, targets: &[usize]) -> f64 {
    let mut correct = 0usize;
    for (row, &t) in logits.rows().into_iter().zip(targets) {
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == t {
            correct += 1;
        }
    }
    correct as f64 / targets.len() as f64
}
