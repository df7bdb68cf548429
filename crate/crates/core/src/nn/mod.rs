//! Shared deep components: the embedding network, the mean network and the
//! mixture-of-experts mean, each with hand-derived reverse-mode gradients.
//!
//! The embedding maps a series of raw inputs `x_1..x_T` to vectors
//! `h_1..h_T`. A recurrent cell computes
//! `h_t = tanh(W_xh x_t + W_hh h_{t-1} + b)` with `h_0 = 0`, so `h_t` depends
//! on `x_1..x_t` only. The mean network maps each `h_t` to a scalar.

mod mlp;

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use mlp::{Activation, Dense, Mlp};

/// Embedding cell family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    /// `h_t = x_t`, no parameters.
    Identity,
    /// `h_t = act(W x_t + b)` independently per step.
    Mlp,
    /// Vanilla recurrent cell with tanh.
    Rnn,
}

impl CellKind {
    pub fn label(self) -> &'static str {
        match self {
            CellKind::Identity => "identity",
            CellKind::Mlp => "mlp",
            CellKind::Rnn => "rnn",
        }
    }
}

impl core::str::FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [CellKind::Identity, CellKind::Mlp, CellKind::Rnn]
            .into_iter()
            .find(|c| c.label() == s)
            .ok_or_else(|| Error::InvalidConfig(alloc::format!("unknown cell `{s}`")))
    }
}

/// Layer widths and cell kinds for the shared networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub input_dim: usize,
    pub cell: CellKind,
    /// Embedding width; ignored by the identity cell.
    pub embed_dim: usize,
    /// Hidden widths of the mean network (and of every expert).
    pub mean_hidden: Vec<usize>,
    /// Zero for a single mean network, otherwise the number of experts.
    pub experts: usize,
    /// Hidden widths of the gate network; empty gives a softmax classifier.
    pub gate_hidden: Vec<usize>,
    pub activation: Activation,
}

impl Architecture {
    /// One hidden layer of width 8 for both embedding and mean.
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            cell: CellKind::Mlp,
            embed_dim: 8,
            mean_hidden: vec![8],
            experts: 0,
            gate_hidden: Vec::new(),
            activation: Activation::Tanh,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        match self.cell {
            CellKind::Identity => self.input_dim,
            _ => self.embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidConfig("input dimension must be positive".into()));
        }
        if self.cell != CellKind::Identity && self.embed_dim == 0 {
            return Err(Error::InvalidConfig("embedding width must be positive".into()));
        }
        if self.mean_hidden.iter().chain(&self.gate_hidden).any(|w| *w == 0) {
            return Err(Error::InvalidConfig("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// Uniform access to every real entry of a parameter container.
pub trait ParamView {
    fn for_each_slice(&self, f: &mut dyn FnMut(&[f64]));
    fn for_each_slice_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_slice(&mut |s| n += s.len());
        n
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.for_each_slice(&mut |s| out.extend_from_slice(s));
        out
    }

    fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.param_count();
        if flat.len() != n {
            return Err(Error::ShapeMismatch { params: n, grads: flat.len() });
        }
        let mut offset = 0;
        self.for_each_slice_mut(&mut |s| {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        });
        Ok(())
    }

    fn fill(&mut self, value: f64) {
        self.for_each_slice_mut(&mut |s| s.iter_mut().for_each(|v| *v = value));
    }

    fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_slice(&mut |s| ok &= s.iter().all(|v| v.is_finite()));
        ok
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }
}

/// Per-step embedding vectors, plus the raw inputs when produced by a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    vectors: Vec<Vec<f64>>,
    trace: Option<Vec<Vec<f64>>>,
}

impl Embedding {
    /// Wraps precomputed vectors; the result has no forward trace.
    pub fn from_vectors(vectors: Vec<Vec<f64>>) -> Self {
        Self { vectors, trace: None }
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn has_trace(&self) -> bool {
        self.trace.is_some()
    }

    /// Drops trailing steps, keeping the first `len`.
    pub fn truncated(&self, len: usize) -> Self {
        Self {
            vectors: self.vectors[..len].to_vec(),
            trace: self.trace.as_ref().map(|t| t[..len].to_vec()),
        }
    }
}

/// Parameters of the embedding function.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingParams {
    Identity { dim: usize },
    Mlp { layer: Dense, activation: Activation },
    Rnn { input: Dense, recurrent: Vec<f64> },
}

impl EmbeddingParams {
    fn init(arch: &Architecture, rng: &mut ChaCha8Rng) -> Self {
        match arch.cell {
            CellKind::Identity => EmbeddingParams::Identity { dim: arch.input_dim },
            CellKind::Mlp => EmbeddingParams::Mlp {
                layer: Dense::glorot(arch.input_dim, arch.embed_dim, rng),
                activation: arch.activation,
            },
            CellKind::Rnn => {
                let input = Dense::glorot(arch.input_dim, arch.embed_dim, rng);
                let recurrent = Dense::glorot(arch.embed_dim, arch.embed_dim, rng).weights;
                EmbeddingParams::Rnn { input, recurrent }
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            EmbeddingParams::Identity { dim } => *dim,
            EmbeddingParams::Mlp { layer, .. } => layer.inputs,
            EmbeddingParams::Rnn { input, .. } => input.inputs,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            EmbeddingParams::Identity { dim } => *dim,
            EmbeddingParams::Mlp { layer, .. } => layer.outputs,
            EmbeddingParams::Rnn { input, .. } => input.outputs,
        }
    }

    pub fn embed(&self, xs: &[Vec<f64>]) -> Result<Embedding> {
        let din = self.input_dim();
        if let Some(bad) = xs.iter().find(|x| x.len() != din) {
            return Err(Error::DimensionMismatch { expected: din, found: bad.len() });
        }
        let vectors = match self {
            EmbeddingParams::Identity { .. } => xs.to_vec(),
            EmbeddingParams::Mlp { layer, activation } => xs
                .iter()
                .map(|x| layer.forward(x).into_iter().map(|z| activation.apply(z)).collect())
                .collect(),
            EmbeddingParams::Rnn { input, recurrent } => {
                let n = input.outputs;
                let mut prev = vec![0.0; n];
                let mut out = Vec::with_capacity(xs.len());
                for x in xs {
                    let mut z = input.forward(x);
                    for (o, zo) in z.iter_mut().enumerate() {
                        let row = &recurrent[o * n..(o + 1) * n];
                        *zo += row.iter().zip(&prev).map(|(w, h)| w * h).sum::<f64>();
                        *zo = libm::tanh(*zo);
                    }
                    prev.clone_from(&z);
                    out.push(z);
                }
                out
            }
        };
        Ok(Embedding { vectors, trace: Some(xs.to_vec()) })
    }

    /// Gradient of `sum_t <dh[t], h_t>` with respect to the embedding
    /// parameters (backpropagation through time for the recurrent cell).
    pub fn backward(&self, emb: &Embedding, dh: &[Vec<f64>]) -> Result<EmbeddingParams> {
        if dh.len() != emb.len() {
            return Err(Error::DimensionMismatch { expected: emb.len(), found: dh.len() });
        }
        let mut grads = self.zeros_like();
        if let EmbeddingParams::Identity { .. } = self {
            return Ok(grads);
        }
        let xs = emb.trace.as_ref().ok_or(Error::TraceMissing)?;
        let hs = &emb.vectors;
        match (self, &mut grads) {
            (EmbeddingParams::Mlp { layer, activation }, EmbeddingParams::Mlp { layer: g, .. }) => {
                for t in 0..hs.len() {
                    let dpre: Vec<f64> = dh[t]
                        .iter()
                        .zip(&hs[t])
                        .map(|(d, h)| d * activation.derivative_from_output(*h))
                        .collect();
                    layer.backward(&xs[t], &dpre, g);
                }
            }
            (
                EmbeddingParams::Rnn { input, recurrent },
                EmbeddingParams::Rnn { input: gi, recurrent: gr },
            ) => {
                let n = input.outputs;
                let mut carry = vec![0.0; n];
                for t in (0..hs.len()).rev() {
                    let dpre: Vec<f64> = (0..n)
                        .map(|o| (dh[t][o] + carry[o]) * (1.0 - hs[t][o] * hs[t][o]))
                        .collect();
                    input.backward(&xs[t], &dpre, gi);
                    carry.iter_mut().for_each(|c| *c = 0.0);
                    for o in 0..n {
                        if dpre[o] == 0.0 {
                            continue;
                        }
                        for i in 0..n {
                            if t > 0 {
                                gr[o * n + i] += dpre[o] * hs[t - 1][i];
                            }
                            carry[i] += recurrent[o * n + i] * dpre[o];
                        }
                    }
                }
            }
            _ => unreachable!("gradient container mirrors parameters"),
        }
        Ok(grads)
    }
}

impl ParamView for EmbeddingParams {
    fn for_each_slice(&self, f: &mut dyn FnMut(&[f64])) {
        match self {
            EmbeddingParams::Identity { .. } => {}
            EmbeddingParams::Mlp { layer, .. } => layer.for_each_slice(f),
            EmbeddingParams::Rnn { input, recurrent } => {
                input.for_each_slice(f);
                f(recurrent);
            }
        }
    }

    fn for_each_slice_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        match self {
            EmbeddingParams::Identity { .. } => {}
            EmbeddingParams::Mlp { layer, .. } => layer.for_each_slice_mut(f),
            EmbeddingParams::Rnn { input, recurrent } => {
                input.for_each_slice_mut(f);
                f(recurrent);
            }
        }
    }
}

/// Parameters of the mean function.
#[derive(Debug, Clone, PartialEq)]
pub enum MeanParams {
    Mlp(Mlp),
    Mixture { gate: Mlp, experts: Vec<Mlp> },
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| libm::exp(v - max)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl MeanParams {
    fn init(arch: &Architecture, rng: &mut ChaCha8Rng) -> Self {
        let d = arch.embedding_dim();
        if arch.experts == 0 {
            MeanParams::Mlp(Mlp::glorot(d, &arch.mean_hidden, 1, arch.activation, rng))
        } else {
            let gate = Mlp::glorot(d, &arch.gate_hidden, arch.experts, arch.activation, rng);
            let experts = (0..arch.experts)
                .map(|_| Mlp::glorot(d, &arch.mean_hidden, 1, arch.activation, rng))
                .collect();
            MeanParams::Mixture { gate, experts }
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            MeanParams::Mlp(m) => m.inputs(),
            MeanParams::Mixture { gate, .. } => gate.inputs(),
        }
    }

    /// Gate probabilities at one embedding vector; `None` for a single network.
    pub fn gate_probabilities(&self, h: &[f64]) -> Result<Option<Vec<f64>>> {
        match self {
            MeanParams::Mlp(_) => Ok(None),
            MeanParams::Mixture { gate, .. } => Ok(Some(softmax(&gate.forward(h)?))),
        }
    }

    fn check(&self, emb: &Embedding) -> Result<()> {
        let d = self.input_dim();
        if let Some(bad) = emb.vectors.iter().find(|h| h.len() != d) {
            return Err(Error::DimensionMismatch { expected: d, found: bad.len() });
        }
        if let MeanParams::Mixture { gate, experts } = self {
            if gate.outputs() != experts.len() {
                return Err(Error::DimensionMismatch { expected: experts.len(), found: gate.outputs() });
            }
        }
        Ok(())
    }

    pub fn evaluate(&self, emb: &Embedding) -> Result<Vec<f64>> {
        self.check(emb)?;
        emb.vectors
            .iter()
            .map(|h| match self {
                MeanParams::Mlp(m) => Ok(m.forward(h)?[0]),
                MeanParams::Mixture { gate, experts } => {
                    let g = softmax(&gate.forward(h)?);
                    let mut mu = 0.0;
                    for (gj, e) in g.iter().zip(experts) {
                        mu += gj * e.forward(h)?[0];
                    }
                    Ok(mu)
                }
            })
            .collect()
    }

    /// Gradient of `sum_t upstream[t] mu_t` with respect to the mean
    /// parameters, plus the per-step gradient with respect to `h_t`.
    pub fn backward(&self, emb: &Embedding, upstream: &[f64]) -> Result<(MeanParams, Vec<Vec<f64>>)> {
        self.check(emb)?;
        if upstream.len() != emb.len() {
            return Err(Error::DimensionMismatch { expected: emb.len(), found: upstream.len() });
        }
        let mut grads = self.zeros_like();
        let mut dh = Vec::with_capacity(emb.len());
        for (h, &u) in emb.vectors.iter().zip(upstream) {
            match (self, &mut grads) {
                (MeanParams::Mlp(m), MeanParams::Mlp(g)) => {
                    let acts = m.forward_cached(h)?;
                    dh.push(m.backward(&acts, &[u], g));
                }
                (
                    MeanParams::Mixture { gate, experts },
                    MeanParams::Mixture { gate: gg, experts: ge },
                ) => {
                    let gate_acts = gate.forward_cached(h)?;
                    let g = softmax(gate_acts.last().unwrap());
                    let mut means = Vec::with_capacity(experts.len());
                    let mut expert_acts = Vec::with_capacity(experts.len());
                    for e in experts {
                        let acts = e.forward_cached(h)?;
                        means.push(acts.last().unwrap()[0]);
                        expert_acts.push(acts);
                    }
                    let mu: f64 = g.iter().zip(&means).map(|(a, b)| a * b).sum();
                    let dz: Vec<f64> = g.iter().zip(&means).map(|(gk, mk)| u * gk * (mk - mu)).collect();
                    let mut total = gate.backward(&gate_acts, &dz, gg);
                    for j in 0..experts.len() {
                        let dx = experts[j].backward(&expert_acts[j], &[u * g[j]], &mut ge[j]);
                        total.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
                    }
                    dh.push(total);
                }
                _ => unreachable!("gradient container mirrors parameters"),
            }
        }
        Ok((grads, dh))
    }
}

impl ParamView for MeanParams {
    fn for_each_slice(&self, f: &mut dyn FnMut(&[f64])) {
        match self {
            MeanParams::Mlp(m) => m.for_each_slice(f),
            MeanParams::Mixture { gate, experts } => {
                gate.for_each_slice(f);
                experts.iter().for_each(|e| e.for_each_slice(f));
            }
        }
    }

    fn for_each_slice_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        match self {
            MeanParams::Mlp(m) => m.for_each_slice_mut(f),
            MeanParams::Mixture { gate, experts } => {
                gate.for_each_slice_mut(f);
                experts.iter_mut().for_each(|e| e.for_each_slice_mut(f));
            }
        }
    }
}

/// Shared network parameters: embedding weights `v` and mean weights `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub arch: Architecture,
    pub embedding: EmbeddingParams,
    pub mean: MeanParams,
}

/// Gradients share the layout of the parameters they differentiate.
pub type NetworkGradients = NetworkParams;

impl NetworkParams {
    /// Glorot-uniform weights and zero biases from a seeded ChaCha stream.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = EmbeddingParams::init(arch, &mut rng);
        let mean = MeanParams::init(arch, &mut rng);
        Ok(Self { arch: arch.clone(), embedding, mean })
    }

    pub fn zeros(arch: &Architecture) -> Result<Self> {
        let mut p = Self::init(arch, 0)?;
        p.fill(0.0);
        Ok(p)
    }
}

impl ParamView for NetworkParams {
    fn for_each_slice(&self, f: &mut dyn FnMut(&[f64])) {
        self.embedding.for_each_slice(f);
        self.mean.for_each_slice(f);
    }

    fn for_each_slice_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.embedding.for_each_slice_mut(f);
        self.mean.for_each_slice_mut(f);
    }
}

impl ParamView for Mlp {
    fn for_each_slice(&self, f: &mut dyn FnMut(&[f64])) {
        Mlp::for_each_slice(self, f);
    }

    fn for_each_slice_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        Mlp::for_each_slice_mut(self, f);
    }
}

pub fn embed_series(x_seq: &[Vec<f64>], params: &NetworkParams) -> Result<Embedding> {
    params.embedding.embed(x_seq)
}

/// `mu_t = mu(h_t | w)` for every step, for either mean variant.
pub fn mean_series(emb: &Embedding, params: &NetworkParams) -> Result<Vec<f64>> {
    params.mean.evaluate(emb)
}

/// Gate-weighted sum of expert means; fails unless the mean is a mixture.
pub fn mixture_mean_series(emb: &Embedding, params: &NetworkParams) -> Result<Vec<f64>> {
    match params.mean {
        MeanParams::Mixture { .. } => params.mean.evaluate(emb),
        MeanParams::Mlp(_) => Err(Error::InvalidConfig("mean network is not a mixture of experts".into())),
    }
}

/// Exact gradient of `sum_t (mean_grads[t] mu_t + <embedding_grads[t], h_t>)`
/// with respect to every entry of `w` and `v`.
pub fn backprop_series(
    emb: &Embedding,
    upstream_mean_grads: &[f64],
    upstream_embedding_grads: &[Vec<f64>],
    params: &NetworkParams,
) -> Result<NetworkGradients> {
    if !emb.has_trace() && !matches!(params.embedding, EmbeddingParams::Identity { .. }) {
        return Err(Error::TraceMissing);
    }
    if upstream_embedding_grads.len() != emb.len() {
        return Err(Error::DimensionMismatch { expected: emb.len(), found: upstream_embedding_grads.len() });
    }
    let (mean, mut dh) = params.mean.backward(emb, upstream_mean_grads)?;
    for (acc, up) in dh.iter_mut().zip(upstream_embedding_grads) {
        if up.len() != acc.len() {
            return Err(Error::DimensionMismatch { expected: acc.len(), found: up.len() });
        }
        acc.iter_mut().zip(up).for_each(|(a, b)| *a += b);
    }
    let embedding = params.embedding.backward(emb, &dh)?;
    Ok(NetworkParams { arch: params.arch.clone(), embedding, mean })
}
