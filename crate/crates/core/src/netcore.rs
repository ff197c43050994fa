//! Dense feedforward network with hand-written reverse-mode gradients.
//!
//! Each layer computes `z = W x + b` followed by an element-wise activation.
//! Weights are stored row-major with shape `(out_dim, in_dim)`. The final
//! layer's output is the real-valued hash logit vector `f(x)` of length `K`.
//!
//! Gradients are exposed in two flavours: with respect to the input (used
//! by the attacks) and with respect to the parameters (used by training).
//! Both take an `upstream` vector `u` and differentiate the scalar `u · f(x)`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader};
use crate::error::{check_len, Error, Result};

const MAGIC: &[u8; 8] = b"SAATNET\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output `a = act(z)`.
    #[inline]
    fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }

    fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Identity => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// One dense layer: `activation(W x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    in_dim: usize,
    out_dim: usize,
    /// Row-major, shape `(out_dim, in_dim)`.
    weights: Vec<f64>,
    biases: Vec<f64>,
    activation: Activation,
}

impl LayerParams {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        weights: Vec<f64>,
        biases: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::InvalidConfig("layer dims must be > 0".into()));
        }
        check_len("layer weights", in_dim * out_dim, weights.len())?;
        check_len("layer biases", out_dim, biases.len())?;
        if weights.iter().chain(&biases).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("layer parameters".into()));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            biases,
            activation,
        })
    }

    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn random<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let limit = 1.0 / (in_dim.max(1) as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        let biases = (0..out_dim)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self::new(in_dim, out_dim, weights, biases, activation)
    }

    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Result<Self> {
        Self::new(
            in_dim,
            out_dim,
            vec![0.0; in_dim * out_dim],
            vec![0.0; out_dim],
            activation,
        )
    }

    /// Diagonal identity layer mapping every feature of `xs` to zero mean and
    /// unit variance. Standard deviations are floored at `1e-3`.
    pub fn standardizer(xs: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = xs.first() else {
            return Err(Error::EmptyBatch("standardizer needs at least one sample"));
        };
        let d = first.len();
        let n = xs.len() as f64;
        let mut mean = vec![0.0; d];
        for x in xs {
            check_len("standardizer sample", d, x.len())?;
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for x in xs {
            for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let mut weights = vec![0.0; d * d];
        let mut biases = vec![0.0; d];
        for j in 0..d {
            let inv = 1.0 / var[j].sqrt().max(1e-3);
            weights[j * d + j] = inv;
            biases[j] = -mean[j] * inv;
        }
        Self::new(d, d, weights, biases, Activation::Identity)
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [f64] {
        &mut self.biases
    }

    fn affine(&self, x: &[f64], z: &mut [f64]) {
        for (o, zo) in z.iter_mut().enumerate() {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.biases[o];
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            *zo = acc;
        }
    }
}

/// The parameters `θ` of the differentiable hash function.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    layers: Vec<LayerParams>,
}

impl NetworkParams {
    pub fn new(layers: Vec<LayerParams>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Layer {
                    layer: i + 1,
                    message: format!(
                        "in_dim {} does not chain with previous out_dim {}",
                        pair[1].in_dim, pair[0].out_dim
                    ),
                });
            }
        }
        Ok(Self { layers })
    }

    /// Builds `input_dim -> hidden... -> output_dim` with tanh hidden layers and
    /// an identity output layer.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(hidden);
        dims.push(output_dim);
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| {
                let act = if i == last {
                    Activation::Identity
                } else {
                    Activation::Tanh
                };
                LayerParams::random(d[0], d[1], act, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    /// Inserts `layer` before the current first layer.
    pub fn prepend(self, layer: LayerParams) -> Result<Self> {
        let mut layers = Vec::with_capacity(self.layers.len() + 1);
        layers.push(layer);
        layers.extend(self.layers);
        Self::new(layers)
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    /// Hash length `K`.
    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        if x.len() != self.input_dim() {
            return Err(Error::Layer {
                layer: 0,
                message: format!("input has length {}, expected {}", x.len(), self.input_dim()),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = post.last().map_or(x, |v| v.as_slice());
            let mut z = vec![0.0; layer.out_dim];
            layer.affine(input, &mut z);
            let a = z.iter().map(|&v| layer.activation.apply(v)).collect();
            pre.push(z);
            post.push(a);
        }
        Ok(ForwardTrace {
            input: x.to_vec(),
            pre,
            post,
        })
    }

    /// Convenience wrapper returning only `f(x)`.
    pub fn output(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.post.pop().unwrap())
    }

    fn check_trace(&self, trace: &ForwardTrace) -> Result<()> {
        if trace.pre.len() != self.layers.len() || trace.post.len() != self.layers.len() {
            return Err(Error::Layer {
                layer: trace.pre.len().min(self.layers.len()),
                message: format!(
                    "trace has {} layers, network has {}",
                    trace.pre.len(),
                    self.layers.len()
                ),
            });
        }
        if trace.input.len() != self.input_dim() {
            return Err(Error::Layer {
                layer: 0,
                message: "trace input does not match network input_dim".into(),
            });
        }
        for (i, (layer, a)) in self.layers.iter().zip(&trace.post).enumerate() {
            if a.len() != layer.out_dim || trace.pre[i].len() != layer.out_dim {
                return Err(Error::Layer {
                    layer: i,
                    message: "trace width does not match layer out_dim".into(),
                });
            }
        }
        Ok(())
    }

    /// Back-propagates `upstream` to the pre-activation of every layer.
    /// Entry `i` is `d(u · f)/dz_i`.
    fn backprop_deltas(&self, trace: &ForwardTrace, upstream: &[f64]) -> Vec<Vec<f64>> {
        let n = self.layers.len();
        let mut deltas = vec![Vec::new(); n];
        let mut grad_a = upstream.to_vec();
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            let delta: Vec<f64> = grad_a
                .iter()
                .zip(&trace.post[i])
                .map(|(g, &a)| g * layer.activation.derivative(a))
                .collect();
            if i > 0 {
                grad_a = transpose_mul(layer, &delta);
            }
            deltas[i] = delta;
        }
        deltas
    }

    /// `d(upstream · f(x)) / dx`.
    pub fn grad_input(&self, trace: &ForwardTrace, upstream: &[f64]) -> Result<Vec<f64>> {
        self.check_trace(trace)?;
        check_len("upstream gradient", self.output_dim(), upstream.len())?;
        let deltas = self.backprop_deltas(trace, upstream);
        Ok(transpose_mul(&self.layers[0], &deltas[0]))
    }

    /// Sum over the batch of `d(upstream_b · f(x_b)) / dθ`.
    pub fn grad_params(
        &self,
        traces: &[ForwardTrace],
        upstreams: &[Vec<f64>],
    ) -> Result<NetworkGrads> {
        if traces.is_empty() {
            return Err(Error::EmptyBatch("grad_params needs at least one sample"));
        }
        check_len("grad_params upstreams", traces.len(), upstreams.len())?;
        let mut grads = NetworkGrads::zeros_like(self);
        for (trace, up) in traces.iter().zip(upstreams) {
            self.accumulate_params(trace, up, &mut grads)?;
        }
        Ok(grads)
    }

    /// Adds the parameter gradient of one sample into `grads`.
    pub fn accumulate_params(
        &self,
        trace: &ForwardTrace,
        upstream: &[f64],
        grads: &mut NetworkGrads,
    ) -> Result<()> {
        self.check_trace(trace)?;
        check_len("upstream gradient", self.output_dim(), upstream.len())?;
        let deltas = self.backprop_deltas(trace, upstream);
        for (i, (layer, delta)) in self.layers.iter().zip(&deltas).enumerate() {
            let input = if i == 0 {
                &trace.input
            } else {
                &trace.post[i - 1]
            };
            let g = &mut grads.layers[i];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (w, x) in row.iter_mut().zip(input) {
                    *w += d * x;
                }
                g.biases[o] += d;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.num_params() * 8);
        out.extend_from_slice(MAGIC);
        binio::put_u32(&mut out, FORMAT_VERSION);
        binio::put_u32(&mut out, self.layers.len() as u32);
        for layer in &self.layers {
            binio::put_u32(&mut out, layer.in_dim as u32);
            binio::put_u32(&mut out, layer.out_dim as u32);
            out.push(layer.activation.tag());
            for &w in &layer.weights {
                binio::put_f64(&mut out, w);
            }
            for &b in &layer.biases {
                binio::put_f64(&mut out, b);
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return r.fail(format!("unsupported network format version {version}"));
        }
        let count = r.u32()? as usize;
        let mut layers = Vec::with_capacity(count.min(64));
        for i in 0..count {
            let in_dim = r.u32()? as usize;
            let out_dim = r.u32()? as usize;
            let tag = r.u8()?;
            let activation = match Activation::from_tag(tag) {
                Some(a) => a,
                None => return r.fail(format!("layer {i}: unknown activation tag {tag}")),
            };
            let n = in_dim
                .checked_mul(out_dim)
                .and_then(|n| n.checked_add(out_dim))
                .and_then(|n| n.checked_mul(8));
            if n.is_none() {
                return r.fail(format!("layer {i}: dims overflow"));
            }
            let weights = (0..in_dim * out_dim)
                .map(|_| r.f64())
                .collect::<Result<Vec<_>>>()?;
            let biases = (0..out_dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let at = r.offset();
            layers.push(
                LayerParams::new(in_dim, out_dim, weights, biases, activation).map_err(|e| {
                    Error::Format {
                        offset: at,
                        message: format!("layer {i}: {e}"),
                    }
                })?,
            );
        }
        r.finish()?;
        Self::new(layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// `Wᵀ v` for a layer's weight matrix.
fn transpose_mul(layer: &LayerParams, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; layer.in_dim];
    for (o, &vo) in v.iter().enumerate() {
        if vo == 0.0 {
            continue;
        }
        let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
        for (acc, w) in out.iter_mut().zip(row) {
            *acc += w * vo;
        }
    }
    out
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn input(&self) -> &[f64] {
        &self.input
    }

    pub fn pre_activations(&self) -> &[Vec<f64>] {
        &self.pre
    }

    pub fn activations(&self) -> &[Vec<f64>] {
        &self.post
    }

    /// The network output `f(x)`.
    pub fn output(&self) -> &[f64] {
        self.post.last().expect("trace is never empty")
    }

    pub fn len(&self) -> usize {
        self.pre.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pre.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Gradient shaped like [`NetworkParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGrads {
    pub layers: Vec<LayerGrads>,
}

impl NetworkGrads {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weights: vec![0.0; l.weights.len()],
                    biases: vec![0.0; l.biases.len()],
                })
                .collect(),
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases))
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    /// Flattened view in the same order the binary format uses.
    pub fn flatten(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    pub fn scale(&mut self, factor: f64) {
        self.values_mut().for_each(|v| *v *= factor);
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &NetworkGrads, factor: f64) -> Result<()> {
        check_len("gradient layers", self.layers.len(), other.layers.len())?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            check_len("gradient weights", a.weights.len(), b.weights.len())?;
            check_len("gradient biases", a.biases.len(), b.biases.len())?;
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += factor * y;
            }
            for (x, y) in a.biases.iter_mut().zip(&b.biases) {
                *x += factor * y;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.values().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Velocity buffers for momentum SGD.
#[derive(Debug, Clone)]
pub struct SgdState {
    velocity: Option<NetworkGrads>,
}

impl SgdState {
    pub fn new() -> Self {
        Self { velocity: None }
    }

    pub fn velocity(&self) -> Option<&NetworkGrads> {
        self.velocity.as_ref()
    }
}

impl Default for SgdState {
    fn default() -> Self {
        Self::new()
    }
}

/// Classical momentum: `v <- momentum * v + g`, `θ <- θ - lr * v`.
pub fn sgd_step(
    params: &mut NetworkParams,
    grads: &NetworkGrads,
    learning_rate: f64,
    momentum: f64,
    state: &mut SgdState,
) -> Result<()> {
    if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "learning rate must be finite and >= 0, got {learning_rate}"
        )));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::InvalidConfig(format!(
            "momentum must lie in [0, 1), got {momentum}"
        )));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient (training diverged)".into()));
    }
    let velocity = state
        .velocity
        .get_or_insert_with(|| NetworkGrads::zeros_like(params));
    velocity.scale(momentum);
    velocity.add_scaled(grads, 1.0)?;
    for (layer, v) in params.layers.iter_mut().zip(&velocity.layers) {
        check_len("sgd weights", layer.weights.len(), v.weights.len())?;
        for (w, dv) in layer.weights.iter_mut().zip(&v.weights) {
            *w -= learning_rate * dv;
        }
        for (b, dv) in layer.biases.iter_mut().zip(&v.biases) {
            *b -= learning_rate * dv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{fd_grad_input, fd_grad_params, rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_layer(n: usize, act: Activation) -> LayerParams {
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
        LayerParams::new(n, n, w, vec![0.0; n], act).unwrap()
    }

    #[test]
    fn standardizer_centres_and_scales() {
        let xs = vec![vec![0.0, 0.5], vec![1.0, 0.5], vec![0.5, 0.5]];
        let layer = LayerParams::standardizer(&xs).unwrap();
        let net = NetworkParams::new(vec![layer.clone()]).unwrap();
        let out: Vec<Vec<f64>> = xs.iter().map(|x| net.output(x).unwrap()).collect();
        let mean0: f64 = out.iter().map(|o| o[0]).sum::<f64>() / 3.0;
        let var0: f64 = out.iter().map(|o| o[0] * o[0]).sum::<f64>() / 3.0;
        assert!(mean0.abs() < 1e-12 && (var0 - 1.0).abs() < 1e-12);
        // constant feature hits the floor instead of dividing by zero
        assert!(out.iter().all(|o| o[1].abs() < 1e-9));
        assert_eq!(layer.weights()[1], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let deep = NetworkParams::init(2, &[3], 4, &mut rng).unwrap().prepend(layer).unwrap();
        assert_eq!(deep.layers().len(), 3);
        assert!(LayerParams::standardizer(&[]).is_err());
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = NetworkParams::new(vec![identity_layer(2, Activation::Identity)]).unwrap();
        assert_eq!(net.output(&[0.3, -0.7]).unwrap(), vec![0.3, -0.7]);
    }

    #[test]
    fn tanh_of_zero_is_zero() {
        let net = NetworkParams::new(vec![identity_layer(2, Activation::Tanh)]).unwrap();
        assert_eq!(net.output(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    /// Straight-line evaluation of a 2-layer tanh/identity net, written out
    /// with explicit index loops and no shared helpers.
    fn straight_line(net: &NetworkParams, x: &[f64]) -> Vec<f64> {
        let l0 = &net.layers()[0];
        let l1 = &net.layers()[1];
        let mut h = Vec::new();
        for o in 0..l0.out_dim() {
            let mut s = l0.biases()[o];
            for i in 0..l0.in_dim() {
                s += l0.weights()[o * l0.in_dim() + i] * x[i];
            }
            h.push(s.tanh());
        }
        let mut out = Vec::new();
        for o in 0..l1.out_dim() {
            let mut s = l1.biases()[o];
            for i in 0..l1.in_dim() {
                s += l1.weights()[o * l1.in_dim() + i] * h[i];
            }
            out.push(s);
        }
        out
    }

    #[test]
    fn two_layer_matches_straight_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = NetworkParams::init(5, &[4], 3, &mut rng).unwrap();
        let x = [0.1, 0.9, 0.4, 0.2, 0.7];
        let got = net.output(&x).unwrap();
        for (a, b) in got.iter().zip(straight_line(&net, &x)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rejects_bad_input_length() {
        let net = NetworkParams::new(vec![identity_layer(2, Activation::Tanh)]).unwrap();
        match net.forward(&[1.0]) {
            Err(Error::Layer { layer: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn layers_must_chain() {
        let a = LayerParams::zeros(3, 4, Activation::Tanh).unwrap();
        let b = LayerParams::zeros(5, 2, Activation::Identity).unwrap();
        assert!(matches!(
            NetworkParams::new(vec![a, b]),
            Err(Error::Layer { layer: 1, .. })
        ));
    }

    #[test]
    fn replaying_trace_reproduces_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = NetworkParams::init(6, &[5, 4], 3, &mut rng).unwrap();
        let trace = net.forward(&[0.5; 6]).unwrap();
        let mut a = trace.input().to_vec();
        for (layer, stored) in net.layers().iter().zip(trace.activations()) {
            let mut z = vec![0.0; layer.out_dim()];
            layer.affine(&a, &mut z);
            a = z.iter().map(|&v| layer.activation().apply(v)).collect();
            assert_eq!(&a, stored);
        }
        assert_eq!(a.as_slice(), trace.output());
    }

    #[test]
    fn identity_grad_input_is_transpose() {
        let w = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let layer = LayerParams::new(3, 2, w, vec![0.0; 2], Activation::Identity).unwrap();
        let net = NetworkParams::new(vec![layer]).unwrap();
        let trace = net.forward(&[0.2, 0.4, 0.6]).unwrap();
        let g = net.grad_input(&trace, &[1.0, -1.0]).unwrap();
        assert_eq!(g, vec![1.0 - 4.0, 2.0 - 5.0, 3.0 - 6.0]);
        let zero = net.grad_input(&trace, &[0.0, 0.0]).unwrap();
        assert_eq!(zero, vec![0.0; 3]);
    }

    #[test]
    fn grad_input_rejects_foreign_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = NetworkParams::init(4, &[3], 2, &mut rng).unwrap();
        let b = NetworkParams::init(4, &[], 2, &mut rng).unwrap();
        let trace = a.forward(&[0.0; 4]).unwrap();
        assert!(b.grad_input(&trace, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn grad_input_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = NetworkParams::init(6, &[5], 4, &mut rng).unwrap();
        let x: Vec<f64> = (0..6).map(|i| 0.1 + 0.13 * i as f64).collect();
        let up = vec![0.3, -1.2, 0.8, 0.5];
        let trace = net.forward(&x).unwrap();
        let g = net.grad_input(&trace, &up).unwrap();
        let fd = fd_grad_input(&net, &x, &up, 1e-5);
        assert!(rel_err(&g, &fd) < 1e-4, "{}", rel_err(&g, &fd));
    }

    #[test]
    fn grad_params_identity_layer_is_outer_product() {
        let layer = LayerParams::zeros(3, 2, Activation::Identity).unwrap();
        let net = NetworkParams::new(vec![layer]).unwrap();
        let x = [0.5, -1.0, 2.0];
        let up = vec![3.0, -2.0];
        let g = net.grad_params(&[net.forward(&x).unwrap()], &[up.clone()]).unwrap();
        let expected: Vec<f64> = up.iter().flat_map(|u| x.iter().map(move |xi| u * xi)).collect();
        assert_eq!(g.layers[0].weights, expected);
        assert_eq!(g.layers[0].biases, up);
    }

    #[test]
    fn grad_params_zero_upstream_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = NetworkParams::init(4, &[3], 2, &mut rng).unwrap();
        let t = net.forward(&[0.2; 4]).unwrap();
        let g = net.grad_params(&[t.clone(), t], &[vec![0.0; 2], vec![0.0; 2]]).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn grad_params_empty_batch_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = NetworkParams::init(4, &[3], 2, &mut rng).unwrap();
        assert!(matches!(net.grad_params(&[], &[]), Err(Error::EmptyBatch(_))));
    }

    #[test]
    fn grad_params_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let net = NetworkParams::init(4, &[3], 2, &mut rng).unwrap();
        let xs = vec![vec![0.1, 0.5, 0.9, 0.3], vec![0.7, 0.2, 0.4, 0.8]];
        let ups = vec![vec![1.0, -0.5], vec![0.25, 0.75]];
        let traces: Vec<_> = xs.iter().map(|x| net.forward(x).unwrap()).collect();
        let g = net.grad_params(&traces, &ups).unwrap().flatten();
        let fd = fd_grad_params(&net, &xs, &ups, 1e-5);
        assert!(rel_err(&g, &fd) < 1e-4);
    }

    #[test]
    fn grad_params_is_linear_in_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let net = NetworkParams::init(5, &[4], 3, &mut rng).unwrap();
        let t = net.forward(&[0.3; 5]).unwrap();
        let up = vec![0.2, -0.4, 1.1];
        let a = 2.5;
        let scaled: Vec<f64> = up.iter().map(|u| a * u).collect();
        let mut g1 = net.grad_params(&[t.clone()], &[up]).unwrap();
        g1.scale(a);
        let g2 = net.grad_params(&[t], &[scaled]).unwrap();
        for (x, y) in g1.flatten().iter().zip(g2.flatten()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn scalar_net(w: f64) -> NetworkParams {
        let l = LayerParams::new(1, 1, vec![w], vec![0.0], Activation::Identity).unwrap();
        NetworkParams::new(vec![l]).unwrap()
    }

    fn scalar_grad(g: f64) -> NetworkGrads {
        NetworkGrads {
            layers: vec![LayerGrads {
                weights: vec![g],
                biases: vec![0.0],
            }],
        }
    }

    #[test]
    fn sgd_zero_learning_rate_is_noop() {
        let mut net = scalar_net(1.5);
        let before = net.clone();
        sgd_step(&mut net, &scalar_grad(3.0), 0.0, 0.9, &mut SgdState::new()).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn sgd_without_momentum_is_plain_descent() {
        let mut net = scalar_net(1.5);
        sgd_step(&mut net, &scalar_grad(2.0), 0.1, 0.0, &mut SgdState::new()).unwrap();
        assert_eq!(net.layers()[0].weights()[0], 1.5 - 0.1 * 2.0);
    }

    #[test]
    fn sgd_momentum_accumulates_velocity() {
        let mut net = scalar_net(1.0);
        let mut state = SgdState::new();
        sgd_step(&mut net, &scalar_grad(2.0), 0.1, 0.9, &mut state).unwrap();
        // v1 = 2, w1 = 1 - 0.2
        assert_eq!(state.velocity().unwrap().layers[0].weights[0], 2.0);
        sgd_step(&mut net, &scalar_grad(1.0), 0.1, 0.9, &mut state).unwrap();
        // v2 = 0.9 * 2 + 1 = 2.8, w2 = 0.8 - 0.28
        let v2 = state.velocity().unwrap().layers[0].weights[0];
        assert!((v2 - 2.8).abs() < 1e-15);
        assert!((net.layers()[0].weights()[0] - 0.52).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_non_finite_gradient() {
        let mut net = scalar_net(1.0);
        let r = sgd_step(&mut net, &scalar_grad(f64::NAN), 0.1, 0.0, &mut SgdState::new());
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn binary_round_trip_and_truncation() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let net = NetworkParams::init(7, &[5], 4, &mut rng).unwrap();
        let bytes = net.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(NetworkParams::from_bytes(&bytes).unwrap(), net);
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            NetworkParams::from_bytes(cut),
            Err(Error::Format { .. })
        ));
    }
}
