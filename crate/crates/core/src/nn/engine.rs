//! Forward and backward passes over a [`WeightStore`].

use std::borrow::Cow;

use super::arch::{ConvGeometry, Stage};
use super::store::WeightStore;
use crate::error::{Error, Result};
use crate::masks::Mask;
use crate::tensor::{matmul, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics of the variant are updated.
    Train,
    /// Batch statistics, running statistics untouched. Used while weights
    /// are held fixed (mask search, gradient checks).
    Probe,
    /// Running statistics.
    Eval,
}

/// How maskable weights are gated during a pass.
#[derive(Clone, Copy, Debug)]
pub enum WeightMask<'a, T> {
    All,
    /// Weights outside the mask are replaced by zero.
    Keep(&'a Mask),
    /// Inverted weight dropout: kept weights are multiplied by `scale`.
    Dropout { keep: &'a Mask, scale: T },
}

impl<'a, T> From<Option<&'a Mask>> for WeightMask<'a, T> {
    fn from(mask: Option<&'a Mask>) -> Self {
        match mask {
            Some(m) => WeightMask::Keep(m),
            None => WeightMask::All,
        }
    }
}

enum Record<T> {
    Dense {
        input: Vec<T>,
        weight: Vec<T>,
        multiplier: Option<Vec<T>>,
    },
    Conv {
        cols: Vec<T>,
        weight: Vec<T>,
        multiplier: Option<Vec<T>>,
    },
    BatchNorm {
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu {
        positive: Vec<bool>,
    },
    Flatten,
}

/// Activation record of one forward pass.
pub struct Cache<T> {
    version: u64,
    mode: Mode,
    variant: usize,
    batch: usize,
    records: Vec<Record<T>>,
    head_input: Vec<T>,
}

impl<T> Cache<T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn variant(&self) -> usize {
        self.variant
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Which ReLU inputs were positive, concatenated over layers.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.records
            .iter()
            .filter_map(|r| match r {
                Record::Relu { positive } => Some(positive.iter().copied()),
                _ => None,
            })
            .flatten()
            .collect()
    }
}

/// Gradients for one backward pass. Covers every tensor that takes part
/// in the pass, frozen ones included.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub variant: usize,
    pub head: usize,
    pub weights: Vec<Tensor<T>>,
    pub biases: Vec<Vec<T>>,
    pub bn_gamma: Vec<Vec<T>>,
    pub bn_beta: Vec<Vec<T>>,
    pub head_weight: Tensor<T>,
    pub head_bias: Vec<T>,
}

impl<T: Real> Gradients<T> {
    pub fn is_zero(&self) -> bool {
        self.values().all(|v| v == T::zero())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// All entries in a fixed order: weights, biases, gamma, beta, head.
    pub fn values(&self) -> impl Iterator<Item = T> + '_ {
        self.weights
            .iter()
            .flat_map(|t| t.data().iter())
            .chain(self.biases.iter().flatten())
            .chain(self.bn_gamma.iter().flatten())
            .chain(self.bn_beta.iter().flatten())
            .chain(self.head_weight.data().iter())
            .chain(self.head_bias.iter())
            .copied()
    }
}

struct BatchStats<T> {
    mean: Vec<T>,
    var_unbiased: Vec<T>,
}

fn check_finite<T: Real>(values: &[T], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn effective_weight<'w, T: Real>(
    weight: &'w [T],
    mask: &WeightMask<'_, T>,
    layer: usize,
) -> (Cow<'w, [T]>, Option<Vec<T>>) {
    match *mask {
        WeightMask::All => (Cow::Borrowed(weight), None),
        WeightMask::Keep(m) => {
            let mult: Vec<T> = m.layer_as(layer);
            let eff = weight
                .iter()
                .zip(m.layer(layer).iter().by_vals())
                .map(|(&w, keep)| if keep { w } else { T::zero() })
                .collect();
            (Cow::Owned(eff), Some(mult))
        }
        WeightMask::Dropout { keep, scale } => {
            let mult: Vec<T> = keep
                .layer(layer)
                .iter()
                .by_vals()
                .map(|b| if b { scale } else { T::zero() })
                .collect();
            let eff = weight
                .iter()
                .zip(keep.layer(layer).iter().by_vals())
                .map(|(&w, k)| if k { w * scale } else { T::zero() })
                .collect();
            (Cow::Owned(eff), Some(mult))
        }
    }
}

/// Unroll input patches: `cols[patch_len x positions]` for one sample.
pub(crate) fn im2col<T: Real>(input: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let positions = g.out_positions();
    let k = g.kernel;
    for c in 0..g.in_channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let out = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    for ox in 0..g.out_width {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        out[oy * g.out_width + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < g.height
                            && (ix as usize) < g.width
                        {
                            input[(c * g.height + iy as usize) * g.width + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add of patch gradients back onto the input layout.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeometry, out: &mut [T]) {
    let positions = g.out_positions();
    let k = g.kernel;
    for c in 0..g.in_channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    for ox in 0..g.out_width {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix < 0 || ix as usize >= g.width {
                            continue;
                        }
                        out[(c * g.height + iy as usize) * g.width + ix as usize] += src[oy * g.out_width + ox];
                    }
                }
            }
        }
    }
}

/// `upstream^T * inputs`: gradient of a dense layer's weight
/// (`outputs x inputs`) before any masking.
pub(crate) fn dense_weight_grad<T: Real>(upstream: &[T], inputs: &[T], batch: usize, n_in: usize, n_out: usize) -> Vec<T> {
    let mut grad = vec![T::zero(); n_out * n_in];
    matmul(upstream, true, inputs, false, n_out, batch, n_in, &mut grad, false);
    grad
}

/// Weight gradient of a convolution from unrolled patches.
pub(crate) fn conv_weight_grad<T: Real>(upstream: &[T], cols: &[T], batch: usize, g: &ConvGeometry) -> Vec<T> {
    let (p, kk, cout) = (g.out_positions(), g.patch_len(), g.out_channels);
    let mut grad = vec![T::zero(); cout * kk];
    for n in 0..batch {
        matmul(
            &upstream[n * cout * p..(n + 1) * cout * p],
            false,
            &cols[n * kk * p..(n + 1) * kk * p],
            true,
            cout,
            p,
            kk,
            &mut grad,
            true,
        );
    }
    grad
}

impl<T: Real> WeightStore<T> {
    fn check_batch(&self, batch: &Tensor<T>, variant: usize) -> Result<usize> {
        if variant >= self.variants.len() {
            return Err(Error::invalid(format!(
                "variant {variant} out of range ({} variants)",
                self.variants.len()
            )));
        }
        let n = batch.rows();
        if batch.shape().len() < 2 || batch.row_len() != self.arch.input_len() {
            return Err(Error::shape(format!(
                "batch shape {:?} does not match input {:?}",
                batch.shape(),
                self.arch.input
            )));
        }
        Ok(n)
    }

    fn check_mask(&self, mask: &WeightMask<'_, T>) -> Result<()> {
        let m = match mask {
            WeightMask::All => return Ok(()),
            WeightMask::Keep(m) => m,
            WeightMask::Dropout { keep, .. } => keep,
        };
        if m.layer_sizes() != self.maskable_sizes() {
            return Err(Error::shape(format!(
                "mask layout {:?} does not match maskable layers {:?}",
                m.layer_sizes(),
                self.maskable_sizes()
            )));
        }
        Ok(())
    }

    fn run(
        &self,
        mask: WeightMask<'_, T>,
        variant: usize,
        batch: &Tensor<T>,
        mode: Mode,
        keep_cache: bool,
    ) -> Result<(Tensor<T>, Cache<T>, Vec<BatchStats<T>>)> {
        let n = self.check_batch(batch, variant)?;
        self.check_mask(&mask)?;
        let params = &self.variants[variant];
        let mut x: Vec<T> = batch.data().to_vec();
        let mut records = Vec::with_capacity(self.plan.stages.len());
        let mut stats = Vec::new();
        let batch_stats = mode != Mode::Eval;

        for stage in &self.plan.stages {
            match *stage {
                Stage::Dense {
                    param,
                    bias,
                    inputs,
                    outputs,
                } => {
                    let (w, multiplier) = effective_weight(self.weights[param].data(), &mask, param);
                    let mut y = vec![T::zero(); n * outputs];
                    matmul(&x, false, &w, true, n, inputs, outputs, &mut y, false);
                    let b = &params.biases[bias];
                    for row in y.chunks_mut(outputs) {
                        row.iter_mut().zip(b).for_each(|(v, &bb)| *v += bb);
                    }
                    if keep_cache {
                        records.push(Record::Dense {
                            input: std::mem::take(&mut x),
                            weight: w.into_owned(),
                            multiplier,
                        });
                    }
                    x = y;
                }
                Stage::Conv { param, geom } => {
                    let (w, multiplier) = effective_weight(self.weights[param].data(), &mask, param);
                    let (p, kk, cout) = (geom.out_positions(), geom.patch_len(), geom.out_channels);
                    let mut cols = vec![T::zero(); n * kk * p];
                    let mut y = vec![T::zero(); n * cout * p];
                    for s in 0..n {
                        let c = &mut cols[s * kk * p..(s + 1) * kk * p];
                        im2col(&x[s * geom.in_len()..(s + 1) * geom.in_len()], &geom, c);
                        matmul(&w, false, c, false, cout, kk, p, &mut y[s * cout * p..(s + 1) * cout * p], false);
                    }
                    if keep_cache {
                        records.push(Record::Conv {
                            cols,
                            weight: w.into_owned(),
                            multiplier,
                        });
                    }
                    x = y;
                }
                Stage::BatchNorm {
                    index,
                    channels,
                    spatial,
                } => {
                    let bn = &params.batchnorms[index];
                    let mut inv_std = vec![T::zero(); channels];
                    let count = n * spatial;
                    if batch_stats {
                        let mut mean = vec![T::zero(); channels];
                        let mut var = vec![T::zero(); channels];
                        let cnt = T::from_usize(count).unwrap();
                        for c in 0..channels {
                            let mut sum = T::zero();
                            for s in 0..n {
                                let base = (s * channels + c) * spatial;
                                sum += x[base..base + spatial].iter().copied().sum::<T>();
                            }
                            let mu = sum / cnt;
                            let mut sq = T::zero();
                            for s in 0..n {
                                let base = (s * channels + c) * spatial;
                                sq += x[base..base + spatial].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
                            }
                            mean[c] = mu;
                            var[c] = sq / cnt;
                            inv_std[c] = T::one() / (var[c] + bn.epsilon).sqrt();
                        }
                        for s in 0..n {
                            for c in 0..channels {
                                let base = (s * channels + c) * spatial;
                                for v in &mut x[base..base + spatial] {
                                    *v = (*v - mean[c]) * inv_std[c];
                                }
                            }
                        }
                        let correction = if count > 1 {
                            T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
                        } else {
                            T::one()
                        };
                        stats.push(BatchStats {
                            mean,
                            var_unbiased: var.into_iter().map(|v| v * correction).collect(),
                        });
                    } else {
                        for c in 0..channels {
                            inv_std[c] = T::one() / (bn.running_var[c] + bn.epsilon).sqrt();
                        }
                        for s in 0..n {
                            for c in 0..channels {
                                let base = (s * channels + c) * spatial;
                                for v in &mut x[base..base + spatial] {
                                    *v = (*v - bn.running_mean[c]) * inv_std[c];
                                }
                            }
                        }
                    }
                    let xhat = if keep_cache { Some(x.clone()) } else { None };
                    for s in 0..n {
                        for c in 0..channels {
                            let base = (s * channels + c) * spatial;
                            for v in &mut x[base..base + spatial] {
                                *v = *v * bn.gamma[c] + bn.beta[c];
                            }
                        }
                    }
                    if let Some(xhat) = xhat {
                        records.push(Record::BatchNorm { xhat, inv_std });
                    }
                }
                Stage::Relu => {
                    let positive: Vec<bool> = x.iter().map(|&v| v > T::zero()).collect();
                    for (v, &p) in x.iter_mut().zip(&positive) {
                        if !p {
                            *v = T::zero();
                        }
                    }
                    if keep_cache {
                        records.push(Record::Relu { positive });
                    }
                }
                Stage::Flatten => {
                    if keep_cache {
                        records.push(Record::Flatten);
                    }
                }
            }
        }

        let head = &self.heads[self.head_index(variant)];
        let (inputs, classes) = (self.plan.head_inputs, self.plan.classes);
        let mut logits = vec![T::zero(); n * classes];
        matmul(&x, false, head.weight.data(), true, n, inputs, classes, &mut logits, false);
        for row in logits.chunks_mut(classes) {
            row.iter_mut().zip(&head.bias).for_each(|(v, &b)| *v += b);
        }
        check_finite(&logits, "logits")?;
        let cache = Cache {
            version: self.version,
            mode,
            variant,
            batch: n,
            records,
            head_input: if keep_cache { x } else { Vec::new() },
        };
        Ok((Tensor::new(vec![n, classes], logits)?, cache, stats))
    }

    /// Forward pass. In [`Mode::Train`] batchnorm uses batch statistics and
    /// updates the running statistics of `variant` only.
    pub fn forward(
        &mut self,
        mask: Option<&Mask>,
        variant: usize,
        batch: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, Cache<T>)> {
        self.forward_masked(mask.into(), variant, batch, mode)
    }

    pub fn forward_masked(
        &mut self,
        mask: WeightMask<'_, T>,
        variant: usize,
        batch: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, Cache<T>)> {
        let (logits, cache, stats) = self.run(mask, variant, batch, mode, true)?;
        if mode == Mode::Train {
            for (bn, st) in self.variants[variant].batchnorms.iter_mut().zip(stats) {
                let m = bn.momentum;
                for c in 0..bn.channels() {
                    bn.running_mean[c] = (T::one() - m) * bn.running_mean[c] + m * st.mean[c];
                    bn.running_var[c] = (T::one() - m) * bn.running_var[c] + m * st.var_unbiased[c];
                }
            }
        }
        Ok((logits, cache))
    }

    /// Forward pass that leaves the store untouched; [`Mode::Train`] is
    /// treated as [`Mode::Probe`].
    pub fn forward_probe(
        &self,
        mask: WeightMask<'_, T>,
        variant: usize,
        batch: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, Cache<T>)> {
        let mode = if mode == Mode::Train { Mode::Probe } else { mode };
        let (logits, cache, _) = self.run(mask, variant, batch, mode, true)?;
        Ok((logits, cache))
    }

    /// Eval-mode logits without recording activations.
    pub fn infer(&self, mask: WeightMask<'_, T>, variant: usize, batch: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(mask, variant, batch, Mode::Eval, false)?.0)
    }

    /// Gradients of the mean softmax cross-entropy of `labels`.
    pub fn backward(&self, cache: &Cache<T>, labels: &[usize]) -> Result<Gradients<T>> {
        let logits = self.logits_from_cache(cache);
        let (_, dlogits) = softmax_cross_entropy(&logits, labels)?;
        self.backward_from(cache, &dlogits)
    }

    /// Gradients for an arbitrary upstream gradient on the logits.
    pub fn backward_from(&self, cache: &Cache<T>, dlogits: &Tensor<T>) -> Result<Gradients<T>> {
        let mut grads = self.backprop(cache, dlogits)?;
        for (g, record) in grads.weights.iter_mut().zip(self.weight_records(cache)) {
            if let Some(mult) = record {
                for (v, &m) in g.data_mut().iter_mut().zip(mult) {
                    *v *= m;
                }
            }
        }
        Ok(grads)
    }

    /// Straight-through estimate of the loss gradient with respect to
    /// per-weight scores that gate the maskable weights: the unmasked weight
    /// gradient times the weight itself.
    pub fn score_gradients(&self, cache: &Cache<T>, dlogits: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let grads = self.backprop(cache, dlogits)?;
        Ok(grads
            .weights
            .into_iter()
            .zip(&self.weights)
            .map(|(mut g, w)| {
                for (v, &wv) in g.data_mut().iter_mut().zip(w.data()) {
                    *v *= wv;
                }
                g
            })
            .collect())
    }

    fn weight_records<'c>(&self, cache: &'c Cache<T>) -> Vec<Option<&'c [T]>> {
        cache
            .records
            .iter()
            .filter_map(|r| match r {
                Record::Dense { multiplier, .. } | Record::Conv { multiplier, .. } => Some(multiplier.as_deref()),
                _ => None,
            })
            .collect()
    }

    fn logits_from_cache(&self, cache: &Cache<T>) -> Tensor<T> {
        let head = &self.heads[self.head_index(cache.variant)];
        let (inputs, classes) = (self.plan.head_inputs, self.plan.classes);
        let mut logits = vec![T::zero(); cache.batch * classes];
        matmul(&cache.head_input, false, head.weight.data(), true, cache.batch, inputs, classes, &mut logits, false);
        for row in logits.chunks_mut(classes) {
            row.iter_mut().zip(&head.bias).for_each(|(v, &b)| *v += b);
        }
        Tensor::new(vec![cache.batch, classes], logits).expect("consistent head shape")
    }

    /// Backpropagation with raw (unmasked) weight gradients.
    fn backprop(&self, cache: &Cache<T>, dlogits: &Tensor<T>) -> Result<Gradients<T>> {
        if cache.version != self.version {
            return Err(Error::StaleCache {
                cached: cache.version,
                current: self.version,
            });
        }
        if cache.mode == Mode::Eval {
            return Err(Error::invalid("backward needs a cache recorded with batch statistics"));
        }
        let n = cache.batch;
        let (inputs, classes) = (self.plan.head_inputs, self.plan.classes);
        if dlogits.shape() != [n, classes] {
            return Err(Error::shape(format!(
                "upstream gradient {:?} does not match logits [{n}, {classes}]",
                dlogits.shape()
            )));
        }
        let variant = cache.variant;
        let head_idx = self.head_index(variant);
        let head = &self.heads[head_idx];
        let dl = dlogits.data();

        let head_weight = dense_weight_grad(dl, &cache.head_input, n, inputs, classes);
        let mut head_bias = vec![T::zero(); classes];
        for row in dl.chunks(classes) {
            head_bias.iter_mut().zip(row).for_each(|(b, &v)| *b += v);
        }
        let mut d = vec![T::zero(); n * inputs];
        matmul(dl, false, head.weight.data(), false, n, classes, inputs, &mut d, false);

        let params = &self.variants[variant];
        let mut weights: Vec<Tensor<T>> = self.weights.iter().map(|w| Tensor::zeros(w.shape().to_vec())).collect();
        let mut biases: Vec<Vec<T>> = params.biases.iter().map(|b| vec![T::zero(); b.len()]).collect();
        let mut bn_gamma: Vec<Vec<T>> = params.batchnorms.iter().map(|b| vec![T::zero(); b.channels()]).collect();
        let mut bn_beta = bn_gamma.clone();

        for (pos, (stage, record)) in self.plan.stages.iter().zip(&cache.records).enumerate().rev() {
            let need_input_grad = pos > 0;
            match (stage, record) {
                (Stage::Relu, Record::Relu { positive }) => {
                    for (v, &p) in d.iter_mut().zip(positive) {
                        if !p {
                            *v = T::zero();
                        }
                    }
                }
                (Stage::Flatten, Record::Flatten) => {}
                (
                    &Stage::BatchNorm {
                        index,
                        channels,
                        spatial,
                    },
                    Record::BatchNorm { xhat, inv_std },
                ) => {
                    let gamma = &params.batchnorms[index].gamma;
                    let m = T::from_usize(n * spatial).unwrap();
                    for c in 0..channels {
                        let (mut sum_d, mut sum_dx) = (T::zero(), T::zero());
                        for s in 0..n {
                            let base = (s * channels + c) * spatial;
                            for i in base..base + spatial {
                                sum_d += d[i];
                                sum_dx += d[i] * xhat[i];
                            }
                        }
                        bn_gamma[index][c] = sum_dx;
                        bn_beta[index][c] = sum_d;
                        let scale = gamma[c] * inv_std[c] / m;
                        for s in 0..n {
                            let base = (s * channels + c) * spatial;
                            for i in base..base + spatial {
                                d[i] = scale * (m * d[i] - sum_d - xhat[i] * sum_dx);
                            }
                        }
                    }
                }
                (
                    &Stage::Dense {
                        param,
                        bias,
                        inputs,
                        outputs,
                    },
                    Record::Dense { input, weight, .. },
                ) => {
                    for row in d.chunks(outputs) {
                        biases[bias].iter_mut().zip(row).for_each(|(b, &v)| *b += v);
                    }
                    weights[param] = Tensor::new(vec![outputs, inputs], dense_weight_grad(&d, input, n, inputs, outputs))?;
                    if need_input_grad {
                        let mut dx = vec![T::zero(); n * inputs];
                        matmul(&d, false, weight, false, n, outputs, inputs, &mut dx, false);
                        d = dx;
                    }
                }
                (&Stage::Conv { param, geom }, Record::Conv { cols, weight, .. }) => {
                    let shape = weights[param].shape().to_vec();
                    weights[param] = Tensor::new(shape, conv_weight_grad(&d, cols, n, &geom))?;
                    if need_input_grad {
                        let (p, kk, cout) = (geom.out_positions(), geom.patch_len(), geom.out_channels);
                        let mut dx = vec![T::zero(); n * geom.in_len()];
                        let mut dcols = vec![T::zero(); kk * p];
                        for s in 0..n {
                            matmul(weight, true, &d[s * cout * p..(s + 1) * cout * p], false, kk, cout, p, &mut dcols, false);
                            col2im(&dcols, &geom, &mut dx[s * geom.in_len()..(s + 1) * geom.in_len()]);
                        }
                        d = dx;
                    }
                }
                _ => return Err(Error::invalid("activation cache does not match the network plan")),
            }
        }

        Ok(Gradients {
            variant,
            head: head_idx,
            weights,
            biases,
            bn_gamma,
            bn_beta,
            head_weight: Tensor::new(vec![classes, inputs], head_weight)?,
            head_bias,
        })
    }
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let n = logits.rows();
    let classes = logits.row_len();
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} rows", labels.len())));
    }
    let probs = softmax_rows(logits);
    let mut grad = probs.clone().into_data();
    let inv_n = T::one() / T::from_usize(n.max(1)).unwrap();
    let mut loss = T::zero();
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        loss += lse - row[label];
        grad[i * classes + label] -= T::one();
    }
    grad.iter_mut().for_each(|g| *g *= inv_n);
    Ok((loss * inv_n, Tensor::new(vec![n, classes], grad)?))
}

/// Row-wise softmax.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let classes = logits.row_len();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(classes.max(1)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Straight-through score gradient of a dense layer:
/// `dL/dS[j][i] = upstream[j] * W[j][i] * input[i]`, summed over the batch.
///
/// Shapes: `upstream` is `batch x outputs`, `weights` is `outputs x inputs`,
/// `inputs` is `batch x inputs`.
pub fn ste_score_grads<T: Real>(upstream: &Tensor<T>, weights: &Tensor<T>, inputs: &Tensor<T>) -> Result<Tensor<T>> {
    let [n_out, n_in] = match *weights.shape() {
        [o, i] => [o, i],
        _ => return Err(Error::shape("dense weights must be 2-D")),
    };
    let batch = upstream.rows();
    if upstream.shape() != [batch, n_out] || inputs.shape() != [batch, n_in] {
        return Err(Error::shape(format!(
            "upstream {:?} / inputs {:?} do not fit weights {:?}",
            upstream.shape(),
            inputs.shape(),
            weights.shape()
        )));
    }
    let mut g = dense_weight_grad(upstream.data(), inputs.data(), batch, n_in, n_out);
    g.iter_mut().zip(weights.data()).for_each(|(v, &w)| *v *= w);
    Tensor::new(vec![n_out, n_in], g)
}

/// Convolution analogue of [`ste_score_grads`]: the per-position products
/// are summed over output positions. `upstream` is `batch x cout x oh x ow`,
/// `inputs` is `batch x cin x h x w`.
pub fn ste_conv_score_grads<T: Real>(
    upstream: &Tensor<T>,
    weights: &Tensor<T>,
    inputs: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (cout, cin, kernel) = match *weights.shape() {
        [o, i, k, k2] if k == k2 => (o, i, k),
        _ => return Err(Error::shape("conv weights must be cout x cin x k x k")),
    };
    let (batch, h, w) = match *inputs.shape() {
        [b, c, h, w] if c == cin => (b, h, w),
        _ => return Err(Error::shape("conv inputs must be batch x cin x h x w")),
    };
    if stride == 0 || h + 2 * padding < kernel || w + 2 * padding < kernel {
        return Err(Error::shape("kernel does not fit the input"));
    }
    let geom = ConvGeometry {
        in_channels: cin,
        height: h,
        width: w,
        out_channels: cout,
        kernel,
        stride,
        padding,
        out_height: (h + 2 * padding - kernel) / stride + 1,
        out_width: (w + 2 * padding - kernel) / stride + 1,
    };
    if upstream.shape() != [batch, cout, geom.out_height, geom.out_width] {
        return Err(Error::shape(format!("upstream {:?} does not fit the convolution", upstream.shape())));
    }
    let (kk, p) = (geom.patch_len(), geom.out_positions());
    let mut cols = vec![T::zero(); batch * kk * p];
    for s in 0..batch {
        im2col(
            &inputs.data()[s * geom.in_len()..(s + 1) * geom.in_len()],
            &geom,
            &mut cols[s * kk * p..(s + 1) * kk * p],
        );
    }
    let mut g = conv_weight_grad(upstream.data(), &cols, batch, &geom);
    g.iter_mut().zip(weights.data()).for_each(|(v, &wv)| *v *= wv);
    Tensor::new(weights.shape().to_vec(), g)
}
