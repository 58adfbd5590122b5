//! Frozen zero-shot embedders and the trainable image encoder with its
//! classification head.
//!
//! The trainable path is a fixed graph: an MLP with tanh hidden layers
//! producing an embedding `V`, the normalized embedding `v = V / |V|` used by
//! the contrastive loss, and a linear head `logits = W V + b` followed by a
//! softmax. Gradients are accumulated by hand in reverse order.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{DatError, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedKind {
    Image,
    Text,
}

/// A fixed random projection followed by normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEmbedder {
    pub kind: EmbedKind,
    pub input_dim: usize,
    pub output_dim: usize,
    /// `output_dim x input_dim`, row-major.
    pub projection: Vec<f64>,
}

impl FrozenEmbedder {
    /// The image-side projection: i.i.d. N(0, 1/d) entries keyed by `seed`.
    pub fn image(seed: u64, input_dim: usize, output_dim: usize) -> Self {
        let mut r = rng::stream(&[rng::domain::FROZEN_IMAGE, seed]);
        let scale = 1.0 / (output_dim as f64).sqrt();
        let projection = (0..input_dim * output_dim)
            .map(|_| scale * r.sample::<f64, _>(StandardNormal))
            .collect();
        FrozenEmbedder {
            kind: EmbedKind::Image,
            input_dim,
            output_dim,
            projection,
        }
    }

    /// The text-side projection: the image projection plus an independent
    /// perturbation of relative size `modality_gap`, so both towers share an
    /// approximately aligned space.
    pub fn text(seed: u64, input_dim: usize, output_dim: usize, modality_gap: f64) -> Self {
        let mut base = Self::image(seed, input_dim, output_dim);
        let mut r = rng::stream(&[rng::domain::FROZEN_TEXT, seed]);
        let scale = modality_gap / (output_dim as f64).sqrt();
        for w in &mut base.projection {
            *w += scale * r.sample::<f64, _>(StandardNormal);
        }
        base.kind = EmbedKind::Text;
        base
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(DatError::Shape(format!(
                "frozen embed input has {} entries, expected {}",
                x.len(),
                self.input_dim
            )));
        }
        if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
            return Err(DatError::Numeric(format!("frozen embed input: {bad}")));
        }
        let mut out: Vec<f64> = self
            .projection
            .chunks_exact(self.input_dim)
            .map(|row| dot(row, x))
            .collect();
        let norm = l2(&out);
        if norm == 0.0 {
            return Err(DatError::Degenerate(format!(
                "{:?} projection maps the input to the zero vector",
                self.kind
            )));
        }
        out.iter_mut().for_each(|v| *v /= norm);
        Ok(out)
    }

    pub fn embed_f32(&self, x: &[f32]) -> Result<Vec<f64>> {
        let x: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
        self.embed(&x)
    }
}

/// Convenience wrapper matching `frozen_embed(kind, x)`.
pub fn frozen_embed(image: &FrozenEmbedder, text: &FrozenEmbedder, kind: EmbedKind, x: &[f64]) -> Result<Vec<f64>> {
    match kind {
        EmbedKind::Image => image.embed(x),
        EmbedKind::Text => text.embed(x),
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn l2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// A dense affine map `out = weight * input + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Dense {
            rows,
            cols,
            weight: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    fn uniform(rows: usize, cols: usize, r: &mut impl Rng) -> Self {
        let bound = 1.0 / (cols as f64).sqrt();
        Dense {
            rows,
            cols,
            weight: (0..rows * cols).map(|_| r.gen_range(-bound..bound)).collect(),
            bias: (0..rows).map(|_| r.gen_range(-bound..bound)).collect(),
        }
    }

    fn apply(&self, input: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.cols)
            .zip(&self.bias)
            .map(|(row, b)| dot(row, input) + b)
            .collect()
    }

    /// `weight^T * delta`.
    fn transpose_apply(&self, delta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (row, &d) in self.weight.chunks_exact(self.cols).zip(delta) {
            for (o, &w) in out.iter_mut().zip(row) {
                *o += w * d;
            }
        }
        out
    }

    /// Adds the outer product `delta * input^T` and `delta` to this gradient.
    fn accumulate(&mut self, delta: &[f64], input: &[f64]) {
        for (row, &d) in self.weight.chunks_exact_mut(self.cols).zip(delta) {
            for (g, &x) in row.iter_mut().zip(input) {
                *g += d * x;
            }
        }
        for (g, &d) in self.bias.iter_mut().zip(delta) {
            *g += d;
        }
    }
}

/// Parameters of the image encoder MLP and the classification head. The same
/// type holds parameter gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// tanh after every layer except the last, whose output is `V`.
    pub layers: Vec<Dense>,
    pub head: Dense,
}

pub fn init_params(seed: u64, input_dim: usize, hidden: usize, embed: usize, classes: usize) -> Result<EncoderParams> {
    for (name, v) in [("D_img", input_dim), ("h", hidden), ("d", embed), ("C", classes)] {
        if v == 0 {
            return Err(DatError::Config(format!("{name} must be positive")));
        }
    }
    let mut r = rng::stream(&[rng::domain::INIT, seed]);
    let layers = vec![
        Dense::uniform(hidden, input_dim, &mut r),
        Dense::uniform(embed, hidden, &mut r),
    ];
    let head = Dense::uniform(classes, embed, &mut r);
    Ok(EncoderParams { layers, head })
}

/// Cold init, then the first hidden units copy the frozen image projection and
/// the output layer passes them through, so `V` starts near the frozen
/// embedding space.
pub fn warm_start_params(
    seed: u64,
    frozen: &FrozenEmbedder,
    hidden: usize,
    classes: usize,
) -> Result<EncoderParams> {
    let mut p = init_params(seed, frozen.input_dim, hidden, frozen.output_dim, classes)?;
    let shared = hidden.min(frozen.output_dim);
    let ni = frozen.input_dim;
    for i in 0..shared {
        p.layers[0].weight[i * ni..(i + 1) * ni].copy_from_slice(&frozen.projection[i * ni..(i + 1) * ni]);
        p.layers[0].bias[i] = 0.0;
    }
    let out = &mut p.layers[1];
    for i in 0..shared {
        for j in 0..out.cols {
            out.weight[i * out.cols + j] *= 0.1;
        }
        out.weight[i * out.cols + i] += 1.0;
        out.bias[i] = 0.0;
    }
    Ok(p)
}

impl EncoderParams {
    pub fn input_dim(&self) -> usize {
        self.layers[0].cols
    }
    pub fn hidden_dim(&self) -> usize {
        self.layers[0].rows
    }
    pub fn embed_dim(&self) -> usize {
        self.head.cols
    }
    pub fn num_classes(&self) -> usize {
        self.head.rows
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams {
            layers: self.layers.iter().map(|l| Dense::zeros(l.rows, l.cols)).collect(),
            head: Dense::zeros(self.head.rows, self.head.cols),
        }
    }

    /// All tensors in a fixed order: layer weights and biases, then the head.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in self.layers.iter().chain(std::iter::once(&self.head)) {
            out.push(l.weight.as_slice());
            out.push(l.bias.as_slice());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in self.layers.iter_mut().chain(std::iter::once(&mut self.head)) {
            out.push(l.weight.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn get(&self, mut idx: usize) -> f64 {
        for t in self.tensors() {
            if idx < t.len() {
                return t[idx];
            }
            idx -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set(&mut self, mut idx: usize, value: f64) {
        for t in self.tensors_mut() {
            if idx < t.len() {
                t[idx] = value;
                return;
            }
            idx -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn check_shapes(&self, other: &Self) -> Result<()> {
        let same = self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .chain(std::iter::once(&self.head))
                .zip(other.layers.iter().chain(std::iter::once(&other.head)))
                .all(|(a, b)| a.rows == b.rows && a.cols == b.cols);
        if same {
            Ok(())
        } else {
            Err(DatError::Shape("parameter sets have different shapes".into()))
        }
    }
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `activations[0]` is the input; `activations[l + 1]` is the output of layer `l`.
    pub activations: Vec<Vec<f64>>,
    pub pre_activations: Vec<Vec<f64>>,
    pub embedding: Vec<f64>,
    pub embedding_norm: f64,
    pub normalized: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn ensure_finite(values: &[f64], stage: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DatError::Numeric(stage.to_string()))
    }
}

pub fn encode_and_classify(params: &EncoderParams, x: &[f64]) -> Result<ForwardTrace> {
    if x.len() != params.input_dim() {
        return Err(DatError::Shape(format!(
            "input has {} entries, encoder expects {}",
            x.len(),
            params.input_dim()
        )));
    }
    let last = params.layers.len() - 1;
    let mut activations = Vec::with_capacity(params.layers.len() + 1);
    let mut pre_activations = Vec::with_capacity(params.layers.len());
    activations.push(x.to_vec());
    for (l, layer) in params.layers.iter().enumerate() {
        let z = layer.apply(activations.last().unwrap());
        ensure_finite(&z, &format!("encoder layer {l}"))?;
        let a = if l == last {
            z.clone()
        } else {
            z.iter().map(|v| v.tanh()).collect()
        };
        pre_activations.push(z);
        activations.push(a);
    }
    let embedding = activations.last().unwrap().clone();
    let embedding_norm = l2(&embedding);
    if embedding_norm == 0.0 {
        return Err(DatError::Numeric("embedding normalization (zero norm)".into()));
    }
    let normalized: Vec<f64> = embedding.iter().map(|v| v / embedding_norm).collect();
    let logits = params.head.apply(&embedding);
    ensure_finite(&logits, "classification head")?;
    let probs = softmax(&logits);
    Ok(ForwardTrace {
        activations,
        pre_activations,
        embedding,
        embedding_norm,
        normalized,
        logits,
        probs,
    })
}

/// Gradient of a scalar loss with respect to one trace's outputs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Upstream {
    pub d_logits: Option<Vec<f64>>,
    pub d_normalized: Option<Vec<f64>>,
}

/// Back-propagates through `v = V / |V|`: `(I - v v^T) g / |V|`.
pub fn normalization_vjp(normalized: &[f64], norm: f64, grad: &[f64]) -> Vec<f64> {
    let proj = dot(normalized, grad);
    normalized
        .iter()
        .zip(grad)
        .map(|(v, g)| (g - v * proj) / norm)
        .collect()
}

/// Accumulates parameter gradients over the traces in order.
pub fn param_gradients(params: &EncoderParams, traces: &[ForwardTrace], upstream: &[Upstream]) -> Result<EncoderParams> {
    let mut grads = params.zeros_like();
    accumulate_gradients(params, traces, upstream, &mut grads)?;
    Ok(grads)
}

pub fn accumulate_gradients(
    params: &EncoderParams,
    traces: &[ForwardTrace],
    upstream: &[Upstream],
    grads: &mut EncoderParams,
) -> Result<()> {
    params.check_shapes(grads)?;
    if traces.len() != upstream.len() {
        return Err(DatError::Shape(format!(
            "{} traces but {} upstream gradients",
            traces.len(),
            upstream.len()
        )));
    }
    let d = params.embed_dim();
    for (trace, up) in traces.iter().zip(upstream) {
        if up.d_logits.is_none() && up.d_normalized.is_none() {
            continue;
        }
        let mut d_embedding = vec![0.0; d];
        if let Some(dl) = &up.d_logits {
            if dl.len() != params.num_classes() {
                return Err(DatError::Shape("logit gradient length".into()));
            }
            grads.head.accumulate(dl, &trace.embedding);
            d_embedding = params.head.transpose_apply(dl);
        }
        if let Some(dv) = &up.d_normalized {
            if dv.len() != d {
                return Err(DatError::Shape("embedding gradient length".into()));
            }
            let through = normalization_vjp(&trace.normalized, trace.embedding_norm, dv);
            for (acc, t) in d_embedding.iter_mut().zip(&through) {
                *acc += t;
            }
        }
        let mut delta = d_embedding;
        for l in (0..params.layers.len()).rev() {
            grads.layers[l].accumulate(&delta, &trace.activations[l]);
            if l == 0 {
                break;
            }
            let da = params.layers[l].transpose_apply(&delta);
            delta = da
                .iter()
                .zip(&trace.activations[l])
                .map(|(g, a)| g * (1.0 - a * a))
                .collect();
        }
    }
    Ok(())
}
