//! Stacked LSTM language model: forward pass, loss, exact truncated-BPTT
//! gradients and global-norm clipping.
//!
//! Activations are kept time-major: row `t * batch + b` of every per-position
//! matrix belongs to lane `b` at step `t`. Gate columns are packed as
//! `[input | forget | candidate | output]`, each `hidden` wide.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use thiserror::Error;

use crate::char_encoding::CWConfig;
use crate::corpus::Batch;
use crate::embedding::{EmbeddingParams, SizeSpec};
use crate::real::Real;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NetworkError {
    #[error("shape mismatch: {0}")]
    Shape(String),
}

fn mismatch(what: &str, expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> NetworkError {
    NetworkError::Shape(format!("{what}: expected {expected:?}, got {got:?}"))
}

/// Architecture dimensions. The embedding width always equals `hidden`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub vocab: usize,
    pub char_vocab: usize,
    pub hidden: usize,
    pub layers: usize,
    pub n_chars: usize,
    pub char_emb: usize,
    pub shared: bool,
}

impl ModelShape {
    /// Shape for a character setup. Without slots the character knobs are
    /// ignored, so `n_chars = 0` always yields the plain word model.
    pub fn with_chars(vocab: usize, char_vocab: usize, hidden: usize, layers: usize, cw: &CWConfig) -> Self {
        let n = cw.n_chars;
        Self {
            vocab,
            char_vocab,
            hidden,
            layers,
            n_chars: n,
            char_emb: if n == 0 { 0 } else { cw.char_emb },
            shared: n > 0 && cw.shared_weights,
        }
    }

    pub fn embedding(&self) -> usize {
        self.hidden
    }

    pub fn word_size(&self) -> usize {
        self.hidden - self.n_chars * self.char_emb
    }

    pub fn size_spec(&self) -> SizeSpec {
        SizeSpec {
            vocab: self.vocab,
            embedding: self.hidden,
            n_chars: self.n_chars,
            char_emb: self.char_emb,
            char_vocab: self.char_vocab,
            shared: self.shared,
            layers: self.layers,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer<F> {
    /// `[in × 4H]`
    pub w_x: Array2<F>,
    /// `[H × 4H]`
    pub w_h: Array2<F>,
    /// `[4H]`
    pub bias: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxLayer<F> {
    /// `[H × V]`
    pub w: Array2<F>,
    pub bias: Array1<F>,
}

/// Every trainable tensor of a model. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub embedding: EmbeddingParams<F>,
    pub layers: Vec<LstmLayer<F>>,
    pub softmax: SoftmaxLayer<F>,
}

impl<F: Real> ModelParams<F> {
    pub fn zeros(shape: &ModelShape) -> Self {
        assert!(
            shape.n_chars * shape.char_emb < shape.hidden,
            "character part must leave room for the word part"
        );
        let h = shape.hidden;
        let embedding = EmbeddingParams::zeros(
            shape.vocab,
            shape.word_size(),
            shape.n_chars,
            shape.char_vocab,
            shape.char_emb,
            shape.shared,
        );
        let layers = (0..shape.layers)
            .map(|_| LstmLayer {
                w_x: Array2::zeros((shape.embedding(), 4 * h)),
                w_h: Array2::zeros((h, 4 * h)),
                bias: Array1::zeros(4 * h),
            })
            .collect();
        let softmax = SoftmaxLayer {
            w: Array2::zeros((h, shape.vocab)),
            bias: Array1::zeros(shape.vocab),
        };
        Self {
            embedding,
            layers,
            softmax,
        }
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            vocab: self.vocab_size(),
            char_vocab: self.embedding.chars.first().map_or(0, |t| t.nrows()),
            hidden: self.hidden(),
            layers: self.layers.len(),
            n_chars: self.embedding.n_chars,
            char_emb: self.embedding.char_emb(),
            shared: self.embedding.shared,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.softmax.w.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.softmax.w.nrows()
    }

    /// Named tensors in a fixed order: embeddings, LSTM layers, softmax.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[F])> {
        fn flat<F, D: ndarray::Dimension>(a: &ndarray::Array<F, D>) -> &[F] {
            a.as_slice().expect("parameter tensors are contiguous")
        }
        let mut out = vec![(
            "embed.word".to_string(),
            self.embedding.word.shape().to_vec(),
            flat(&self.embedding.word),
        )];
        for (k, t) in self.embedding.chars.iter().enumerate() {
            out.push((format!("embed.char.{k}"), t.shape().to_vec(), flat(t)));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("lstm.{l}.w_x"), layer.w_x.shape().to_vec(), flat(&layer.w_x)));
            out.push((format!("lstm.{l}.w_h"), layer.w_h.shape().to_vec(), flat(&layer.w_h)));
            out.push((format!("lstm.{l}.bias"), layer.bias.shape().to_vec(), flat(&layer.bias)));
        }
        out.push(("softmax.w".to_string(), self.softmax.w.shape().to_vec(), flat(&self.softmax.w)));
        out.push(("softmax.bias".to_string(), self.softmax.bias.shape().to_vec(), flat(&self.softmax.bias)));
        out
    }

    /// Mutable flat views, in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        fn flat<F, D: ndarray::Dimension>(a: &mut ndarray::Array<F, D>) -> &mut [F] {
            a.as_slice_mut().expect("parameter tensors are contiguous")
        }
        let mut out = vec![flat(&mut self.embedding.word)];
        out.extend(self.embedding.chars.iter_mut().map(flat));
        for layer in &mut self.layers {
            out.push(flat(&mut layer.w_x));
            out.push(flat(&mut layer.w_h));
            out.push(flat(&mut layer.bias));
        }
        out.push(flat(&mut self.softmax.w));
        out.push(flat(&mut self.softmax.bias));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    pub fn global_norm(&self) -> f64 {
        let refs: Vec<&[F]> = self.tensors().into_iter().map(|t| t.2).collect();
        global_norm(&refs)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.2.iter().all(|x| x.is_finite()))
    }
}

/// Carried cell and hidden vectors, one `[batch × H]` pair per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState<F> {
    pub c: Vec<Array2<F>>,
    pub h: Vec<Array2<F>>,
}

impl<F: Real> NetworkState<F> {
    pub fn zeros(layers: usize, batch: usize, hidden: usize) -> Self {
        Self {
            c: (0..layers).map(|_| Array2::zeros((batch, hidden))).collect(),
            h: (0..layers).map(|_| Array2::zeros((batch, hidden))).collect(),
        }
    }

    pub fn for_model(params: &ModelParams<F>, batch: usize) -> Self {
        Self::zeros(params.layers.len(), batch, params.hidden())
    }

    pub fn is_finite(&self) -> bool {
        self.c.iter().chain(&self.h).all(|m| m.iter().all(|x| x.is_finite()))
    }
}

/// Inverted-dropout masks for the non-recurrent connections of one batch.
/// Entries are 0 or `1 / keep`; the same mask applies at every unrolled step.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks<F> {
    /// Embedding → first layer, `[batch × E]`.
    pub input: Array2<F>,
    /// Output of layer `l` → next layer (or softmax), `[batch × H]`.
    pub outputs: Vec<Array2<F>>,
}

impl<F: Real> DropoutMasks<F> {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, shape: &ModelShape, batch: usize, keep: f64) -> Self {
        assert!(keep > 0.0 && keep <= 1.0, "keep probability must lie in (0, 1]");
        let scale = F::from_f64(1.0 / keep);
        let mut draw = |cols: usize| {
            Array2::from_shape_simple_fn((batch, cols), || {
                if keep >= 1.0 || rng.random::<f64>() < keep {
                    scale
                } else {
                    F::zero()
                }
            })
        };
        let input = draw(shape.embedding());
        let outputs = (0..shape.layers).map(|_| draw(shape.hidden)).collect();
        Self { input, outputs }
    }

    pub fn ones(shape: &ModelShape, batch: usize) -> Self {
        Self {
            input: Array2::ones((batch, shape.embedding())),
            outputs: (0..shape.layers).map(|_| Array2::ones((batch, shape.hidden))).collect(),
        }
    }
}

#[derive(Debug, Clone)]
struct LayerCache<F> {
    /// Layer input after dropout, `[N × in]`.
    input: Array2<F>,
    /// Gate activations, `[N × 4H]`.
    acts: Array2<F>,
    c: Array2<F>,
    tanh_c: Array2<F>,
    /// Layer output before dropout.
    h: Array2<F>,
    c0: Array2<F>,
    h0: Array2<F>,
}

/// Result of a forward pass, with everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct Forward<F> {
    /// Time-major logits `[(unroll · batch) × V]`.
    pub logits: Array2<F>,
    /// State after the last step, to carry into the next batch.
    pub state: NetworkState<F>,
    layers: Vec<LayerCache<F>>,
    /// Input to the softmax after dropout.
    top: Array2<F>,
    masks: Option<DropoutMasks<F>>,
    batch: usize,
}

impl<F: Real> Forward<F> {
    /// Logits for lane `b` at step `t`.
    pub fn logits_at(&self, b: usize, t: usize) -> ndarray::ArrayView1<'_, F> {
        self.logits.row(t * self.batch + b)
    }
}

/// Targets of a batch in the time-major row order of [`Forward::logits`].
pub fn time_major_targets(batch: &Batch) -> Vec<u32> {
    let (b, t) = batch.targets.dim();
    (0..t * b).map(|r| batch.targets[[r % b, r / b]]).collect()
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn scale_rows<F: Real>(m: &mut Array2<F>, mask: &Array2<F>) {
    let b = mask.nrows();
    for (r, mut row) in m.axis_iter_mut(Axis(0)).enumerate() {
        row *= &mask.row(r % b);
    }
}

fn check_inputs<F: Real>(
    params: &ModelParams<F>,
    batch: &Batch,
    state: &NetworkState<F>,
    masks: Option<&DropoutMasks<F>>,
) -> Result<(), NetworkError> {
    let b = batch.batch_size();
    let h = params.hidden();
    let layers = params.layers.len();
    if batch.targets.dim() != batch.inputs.dim() {
        return Err(mismatch("targets", batch.inputs.dim(), batch.targets.dim()));
    }
    if batch.n_chars() != params.embedding.n_chars {
        return Err(mismatch("character slots", params.embedding.n_chars, batch.n_chars()));
    }
    if state.c.len() != layers || state.h.len() != layers {
        return Err(mismatch("state layers", layers, state.c.len()));
    }
    for m in state.c.iter().chain(&state.h) {
        if m.dim() != (b, h) {
            return Err(mismatch("state", (b, h), m.dim()));
        }
    }
    if let Some(m) = masks {
        if m.input.dim() != (b, params.embedding.size()) {
            return Err(mismatch("input mask", (b, params.embedding.size()), m.input.dim()));
        }
        if m.outputs.len() != layers || m.outputs.iter().any(|o| o.dim() != (b, h)) {
            return Err(NetworkError::Shape("output masks".into()));
        }
    }
    Ok(())
}

/// Run the network over one batch. `masks = None` is evaluation mode.
pub fn forward<F: Real>(
    params: &ModelParams<F>,
    batch: &Batch,
    state: &NetworkState<F>,
    masks: Option<&DropoutMasks<F>>,
) -> Result<Forward<F>, NetworkError> {
    check_inputs(params, batch, state, masks)?;
    let (bsz, steps) = batch.inputs.dim();
    let n = bsz * steps;
    let h = params.hidden();
    let emb = &params.embedding;

    let mut x = Array2::<F>::zeros((n, emb.size()));
    for t in 0..steps {
        for b in 0..bsz {
            let chars = batch.char_inputs.slice(s![b, t, ..]);
            let chars: Vec<u32> = chars.iter().copied().collect();
            emb.embed_into(batch.inputs[[b, t]], &chars, x.row_mut(t * bsz + b));
        }
    }
    if let Some(m) = masks {
        scale_rows(&mut x, &m.input);
    }

    let mut new_state = NetworkState::zeros(params.layers.len(), bsz, h);
    let mut caches = Vec::with_capacity(params.layers.len());
    for (l, layer) in params.layers.iter().enumerate() {
        let mut acts = x.dot(&layer.w_x) + &layer.bias;
        let mut c_all = Array2::<F>::zeros((n, h));
        let mut tanh_all = Array2::<F>::zeros((n, h));
        let mut h_all = Array2::<F>::zeros((n, h));
        let mut h_prev = state.h[l].clone();
        let mut c_prev = state.c[l].clone();
        for t in 0..steps {
            let rows = t * bsz..(t + 1) * bsz;
            let mut gates = acts.slice_mut(s![rows.clone(), ..]);
            gates += &h_prev.dot(&layer.w_h);
            for b in 0..bsz {
                let r = t * bsz + b;
                for j in 0..h {
                    let i = sigmoid(gates[[b, j]]);
                    let f = sigmoid(gates[[b, h + j]]);
                    let g = gates[[b, 2 * h + j]].tanh();
                    let o = sigmoid(gates[[b, 3 * h + j]]);
                    gates[[b, j]] = i;
                    gates[[b, h + j]] = f;
                    gates[[b, 2 * h + j]] = g;
                    gates[[b, 3 * h + j]] = o;
                    let c = f * c_prev[[b, j]] + i * g;
                    let tc = c.tanh();
                    c_all[[r, j]] = c;
                    tanh_all[[r, j]] = tc;
                    h_all[[r, j]] = o * tc;
                }
            }
            h_prev = h_all.slice(s![rows.clone(), ..]).to_owned();
            c_prev = c_all.slice(s![rows, ..]).to_owned();
        }
        let mut next = h_all.clone();
        if let Some(m) = masks {
            scale_rows(&mut next, &m.outputs[l]);
        }
        new_state.h[l] = h_prev;
        new_state.c[l] = c_prev;
        caches.push(LayerCache {
            input: std::mem::replace(&mut x, next),
            acts,
            c: c_all,
            tanh_c: tanh_all,
            h: h_all,
            c0: state.c[l].clone(),
            h0: state.h[l].clone(),
        });
    }
    let logits = x.dot(&params.softmax.w) + &params.softmax.bias;
    Ok(Forward {
        logits,
        state: new_state,
        layers: caches,
        top: x,
        masks: masks.cloned(),
        batch: bsz,
    })
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax<F: Real>(logits: &ArrayView2<'_, F>) -> Array2<F> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let lse = max + row.iter().fold(F::zero(), |acc, &v| acc + (v - max).exp()).ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax<F: Real>(logits: &ArrayView2<'_, F>) -> Array2<F> {
    log_softmax(logits).mapv(F::exp)
}

/// Log-probability of each row's target.
pub fn target_log_probs<F: Real>(logits: &Array2<F>, targets: &[u32]) -> Vec<F> {
    assert_eq!(logits.nrows(), targets.len(), "one target per logit row");
    logits
        .axis_iter(Axis(0))
        .zip(targets)
        .map(|(row, &y)| {
            let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let sum = row.iter().fold(F::zero(), |acc, &v| acc + (v - max).exp());
            row[y as usize] - max - sum.ln()
        })
        .collect()
}

/// Mean negative log-likelihood in nats per token.
pub fn loss<F: Real>(logits: &Array2<F>, targets: &[u32]) -> F {
    let lp = target_log_probs(logits, targets);
    let total = lp.iter().fold(F::zero(), |acc, &v| acc - v);
    total / F::from_f64(lp.len() as f64)
}

/// Exact gradient of the mean loss of `fwd` with respect to every parameter.
/// Nothing flows back into the carried-in state.
pub fn backward<F: Real>(params: &ModelParams<F>, batch: &Batch, fwd: &Forward<F>) -> ModelParams<F> {
    let (bsz, steps) = batch.inputs.dim();
    let n = bsz * steps;
    let h = params.hidden();
    let mut grads = ModelParams::zeros(&params.shape());
    let targets = time_major_targets(batch);

    let mut dlogits = softmax(&fwd.logits.view());
    let inv_n = F::from_f64(1.0 / n as f64);
    for (r, &y) in targets.iter().enumerate() {
        dlogits[[r, y as usize]] -= F::one();
    }
    dlogits.mapv_inplace(|v| v * inv_n);
    grads.softmax.w = fwd.top.t().dot(&dlogits);
    grads.softmax.bias = dlogits.sum_axis(Axis(0));
    let mut d_upper = dlogits.dot(&params.softmax.w.t());

    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let cache = &fwd.layers[l];
        if let Some(m) = &fwd.masks {
            scale_rows(&mut d_upper, &m.outputs[l]);
        }
        let mut dgates = Array2::<F>::zeros((n, 4 * h));
        let mut dh_next = Array2::<F>::zeros((bsz, h));
        let mut dc_next = Array2::<F>::zeros((bsz, h));
        for t in (0..steps).rev() {
            for b in 0..bsz {
                let r = t * bsz + b;
                for j in 0..h {
                    let i = cache.acts[[r, j]];
                    let f = cache.acts[[r, h + j]];
                    let g = cache.acts[[r, 2 * h + j]];
                    let o = cache.acts[[r, 3 * h + j]];
                    let tc = cache.tanh_c[[r, j]];
                    let c_prev = if t == 0 {
                        cache.c0[[b, j]]
                    } else {
                        cache.c[[r - bsz, j]]
                    };
                    let dh = d_upper[[r, j]] + dh_next[[b, j]];
                    let dc = dh * o * (F::one() - tc * tc) + dc_next[[b, j]];
                    dgates[[r, j]] = dc * g * i * (F::one() - i);
                    dgates[[r, h + j]] = dc * c_prev * f * (F::one() - f);
                    dgates[[r, 2 * h + j]] = dc * i * (F::one() - g * g);
                    dgates[[r, 3 * h + j]] = dh * tc * o * (F::one() - o);
                    dc_next[[b, j]] = dc * f;
                }
            }
            dh_next = dgates.slice(s![t * bsz..(t + 1) * bsz, ..]).dot(&layer.w_h.t());
        }
        let h_prev = concatenate(Axis(0), &[cache.h0.view(), cache.h.slice(s![..n - bsz, ..])])
            .expect("matching widths");
        let g = &mut grads.layers[l];
        g.w_x = cache.input.t().dot(&dgates);
        g.w_h = h_prev.t().dot(&dgates);
        g.bias = dgates.sum_axis(Axis(0));
        d_upper = dgates.dot(&layer.w_x.t());
    }

    if let Some(m) = &fwd.masks {
        scale_rows(&mut d_upper, &m.input);
    }
    let mut chars = vec![0u32; batch.n_chars()];
    for t in 0..steps {
        for b in 0..bsz {
            for (k, c) in chars.iter_mut().enumerate() {
                *c = batch.char_inputs[[b, t, k]];
            }
            grads
                .embedding
                .accumulate_grad(batch.inputs[[b, t]], &chars, d_upper.row(t * bsz + b));
        }
    }
    grads
}

/// Forward, loss and backward in one call.
pub fn loss_and_grads<F: Real>(
    params: &ModelParams<F>,
    batch: &Batch,
    state: &NetworkState<F>,
    masks: Option<&DropoutMasks<F>>,
) -> Result<(F, ModelParams<F>, NetworkState<F>), NetworkError> {
    let fwd = forward(params, batch, state, masks)?;
    let value = loss(&fwd.logits, &time_major_targets(batch));
    let grads = backward(params, batch, &fwd);
    Ok((value, grads, fwd.state))
}

/// L2 norm over all tensors, accumulated in `f64` in a fixed order.
pub fn global_norm<F: Real>(tensors: &[&[F]]) -> f64 {
    tensors
        .iter()
        .flat_map(|t| t.iter())
        .map(|&v| {
            let v = v.to_f64();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescale all tensors jointly so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_tensors<F: Real>(tensors: &mut [&mut [F]], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = {
        let views: Vec<&[F]> = tensors.iter().map(|t| &**t).collect();
        global_norm(&views)
    };
    if norm > max_norm {
        let scale = F::from_f64(max_norm / norm);
        for t in tensors.iter_mut() {
            t.iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

pub fn clip_global_norm<F: Real>(grads: &mut ModelParams<F>, max_norm: f64) -> f64 {
    clip_tensors(&mut grads.tensors_mut(), max_norm)
}

/// `self += alpha * other`, tensor by tensor.
pub fn axpy<F: Real>(target: &mut ModelParams<F>, alpha: F, other: &ModelParams<F>) {
    let src = other.tensors();
    for (dst, (_, _, s)) in target.tensors_mut().into_iter().zip(src) {
        Zip::from(dst).and(s).for_each(|d, &g| *d += alpha * g);
    }
}
