//! Dense layers with hand-written backward passes, and the detection losses.

use rand::Rng;

use crate::error::{Error, Result};

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative at the pre-activation `x`; the ReLU subgradient at 0 is 0.
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Affine layer `act(W x + b)` with `W` stored row-major as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    in_dim: usize,
    out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if weight.len() != in_dim * out_dim {
            return Err(Error::dim(in_dim * out_dim, weight.len(), "dense weight"));
        }
        if bias.len() != out_dim {
            return Err(Error::dim(out_dim, bias.len(), "dense bias"));
        }
        if weight.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Range("dense layer has non-finite parameters".into()));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weight,
            bias,
            activation,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    /// Glorot-uniform weights in `+-sqrt(6 / (in + out))`, zero bias.
    pub fn glorot(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    fn pre_activation(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.in_dim.max(1))
            .take(self.out_dim)
            .zip(&self.bias)
            .map(|(row, b)| {
                if self.in_dim == 0 {
                    *b
                } else {
                    b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
                }
            })
            .collect()
    }
}

/// Intermediate values of one forward pass, needed by [`DenseStack::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct StackTrace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl StackTrace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

/// A chain of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseStack {
    layers: Vec<Dense>,
}

impl DenseStack {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("a dense stack needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].out_dim != w[1].in_dim {
                return Err(Error::dim(w[0].out_dim, w[1].in_dim, "adjacent layer widths"));
            }
        }
        Ok(Self { layers })
    }

    /// Layer widths `dims[0] -> dims[1] -> ...`, ReLU between layers and
    /// `last` on the output, Glorot-initialized.
    pub fn glorot(dims: &[usize], last: Activation, rng: &mut impl Rng) -> Result<Self> {
        Self::build(dims, last, |i, o, a| Dense::glorot(i, o, a, rng))
    }

    pub fn zeros(dims: &[usize], last: Activation) -> Result<Self> {
        Self::build(dims, last, Dense::zeros)
    }

    fn build(
        dims: &[usize],
        last: Activation,
        mut make: impl FnMut(usize, usize, Activation) -> Dense,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(format!("stack widths {dims:?} need at least two entries")));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|k| {
                let act = if k + 1 == n { last } else { Activation::Relu };
                make(dims[k], dims[k + 1], act)
            })
            .collect();
        Self::new(layers)
    }

    /// Single identity layer.
    pub fn identity(dim: usize) -> Self {
        let mut d = Dense::zeros(dim, dim, Activation::Identity);
        for i in 0..dim {
            d.weight[i * dim + i] = 1.0;
        }
        Self::new(vec![d]).expect("one layer")
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    /// Same shape, all parameters zero; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |p| *p = 0.0);
        z
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(x)?.output)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<StackTrace> {
        if x.len() != self.input_dim() {
            return Err(Error::dim(self.input_dim(), x.len(), "stack input"));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        for layer in &self.layers {
            let z = layer.pre_activation(&cur);
            let out = z.iter().map(|&v| layer.activation.apply(v)).collect();
            inputs.push(std::mem::replace(&mut cur, out));
            pre.push(z);
        }
        Ok(StackTrace {
            inputs,
            pre,
            output: cur,
        })
    }

    /// Gradients of `upstream . f(x)` with respect to the parameters and the input.
    pub fn backward(&self, trace: &StackTrace, upstream: &[f64]) -> Result<(DenseStack, Vec<f64>)> {
        let mut grads = self.zeros_like();
        let dx = self.backward_into(trace, upstream, &mut grads)?;
        Ok((grads, dx))
    }

    /// Like [`Self::backward`] but adds the parameter gradients into `grads`.
    pub fn backward_into(
        &self,
        trace: &StackTrace,
        upstream: &[f64],
        grads: &mut DenseStack,
    ) -> Result<Vec<f64>> {
        if upstream.len() != self.output_dim() {
            return Err(Error::dim(self.output_dim(), upstream.len(), "stack upstream gradient"));
        }
        if trace.inputs.len() != self.layers.len() {
            return Err(Error::dim(self.layers.len(), trace.inputs.len(), "stack trace depth"));
        }
        let mut delta = upstream.to_vec();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let g = &mut grads.layers[k];
            let x = &trace.inputs[k];
            for (o, d) in delta.iter_mut().enumerate() {
                *d *= layer.activation.derivative(trace.pre[k][o]);
            }
            let mut dx = vec![0.0; layer.in_dim];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = o * layer.in_dim;
                for i in 0..layer.in_dim {
                    g.weight[row + i] += d * x[i];
                    dx[i] += d * layer.weight[row + i];
                }
            }
            delta = dx;
        }
        Ok(delta)
    }
}

/// Flat access to trainable parameters.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(f64));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut f64));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_| n += 1);
        n
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p));
        out
    }

    fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        let n = self.num_params();
        if values.len() != n {
            return Err(Error::dim(n, values.len(), "flat parameter vector"));
        }
        let mut it = values.iter();
        self.visit_mut(&mut |p| *p = *it.next().expect("length checked"));
        Ok(())
    }

    /// Plain gradient-descent step `p -= lr * g`.
    fn sgd_step(&mut self, grads: &Self, lr: f64)
    where
        Self: Sized,
    {
        let g = grads.to_flat();
        let mut it = g.iter();
        self.visit_mut(&mut |p| *p -= lr * it.next().expect("same shape"));
    }

    /// `self += other`, elementwise.
    fn add_assign(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let g = other.to_flat();
        let mut it = g.iter();
        self.visit_mut(&mut |p| *p += it.next().expect("same shape"));
    }
}

impl Parameters for DenseStack {
    fn visit(&self, f: &mut dyn FnMut(f64)) {
        for l in &self.layers {
            l.weight.iter().chain(l.bias.iter()).for_each(|&p| f(p));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        for l in &mut self.layers {
            l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(&mut *f);
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub smooth_l1_beta: f64,
    /// Adds the symmetric background term `-(1 - alpha) p^gamma log(1 - p)`.
    pub focal_background: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            smooth_l1_beta: 1.0,
            focal_background: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return Err(Error::Config(format!("focal_alpha {} not in (0, 1)", self.focal_alpha)));
        }
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return Err(Error::Config(format!("focal_gamma {} must be >= 0", self.focal_gamma)));
        }
        if !(self.smooth_l1_beta > 0.0 && self.smooth_l1_beta.is_finite()) {
            return Err(Error::Config(format!(
                "smooth_l1_beta {} must be > 0",
                self.smooth_l1_beta
            )));
        }
        Ok(())
    }
}

fn smooth_l1_term(x: f64, beta: f64) -> (f64, f64) {
    if x.abs() < beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (x.abs() - 0.5 * beta, x.signum())
    }
}

/// Summed smooth-L1 of `pred - target`.
pub fn smooth_l1(pred: &[f64], target: &[f64], beta: f64) -> Result<f64> {
    Ok(smooth_l1_grad(pred, target, beta)?.0)
}

/// Smooth-L1 and its gradient with respect to `pred`.
pub fn smooth_l1_grad(pred: &[f64], target: &[f64], beta: f64) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::dim(target.len(), pred.len(), "smooth-L1 operands"));
    }
    if !(beta > 0.0) {
        return Err(Error::Range(format!("smooth-L1 beta {beta} must be positive")));
    }
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let (l, g) = smooth_l1_term(p - t, beta);
            loss += l;
            g
        })
        .collect();
    Ok((loss, grad))
}

/// Focal segmentation loss over predicted foreground probabilities, normalized
/// by the number of foreground entries.
pub fn focal_loss(p_hat: &[f64], foreground: &[bool], cfg: &LossConfig) -> Result<f64> {
    Ok(focal_loss_grad(p_hat, foreground, cfg)?.0)
}

/// Focal loss and its gradient with respect to each probability.
pub fn focal_loss_grad(
    p_hat: &[f64],
    foreground: &[bool],
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    if p_hat.len() != foreground.len() {
        return Err(Error::dim(p_hat.len(), foreground.len(), "focal loss mask"));
    }
    if let Some(p) = p_hat.iter().find(|p| !(**p >= 0.0 && **p <= 1.0)) {
        return Err(Error::Range(format!("probability {p} outside [0, 1]")));
    }
    let n_pos = foreground.iter().filter(|&&m| m).count();
    if n_pos == 0 {
        log::warn!("focal loss evaluated without foreground entries; returning 0");
        return Ok((0.0, vec![0.0; p_hat.len()]));
    }
    let norm = n_pos as f64;
    let (a, g) = (cfg.focal_alpha, cfg.focal_gamma);
    let mut loss = 0.0;
    let grad = p_hat
        .iter()
        .zip(foreground)
        .map(|(&raw, &fg)| {
            let p = raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
            let live = if p == raw { 1.0 } else { 0.0 };
            if fg {
                let q = 1.0 - p;
                loss += -a * q.powf(g) * p.ln();
                let d = if g == 0.0 {
                    -a / p
                } else {
                    a * (g * q.powf(g - 1.0) * p.ln() - q.powf(g) / p)
                };
                live * d / norm
            } else if cfg.focal_background {
                let q = 1.0 - p;
                loss += -(1.0 - a) * p.powf(g) * q.ln();
                let d = if g == 0.0 {
                    (1.0 - a) / q
                } else {
                    -(1.0 - a) * (g * p.powf(g - 1.0) * q.ln() - p.powf(g) / q)
                };
                live * d / norm
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss / norm, grad))
}

/// Focal loss on logits (`p = sigmoid(logit)`), with the gradient in logit space.
pub fn focal_loss_logits(
    logits: &[f64],
    foreground: &[bool],
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    let p: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let (loss, dp) = focal_loss_grad(&p, foreground, cfg)?;
    let dz = dp.iter().zip(&p).map(|(d, p)| d * p * (1.0 - p)).collect();
    Ok((loss, dz))
}

/// Smooth-L1 between predicted and target center offsets over the masked
/// (interior) points, divided by their count.
pub fn offset_loss(
    pred: &[[f64; 3]],
    target: &[[f64; 3]],
    mask: &[bool],
    beta: f64,
) -> Result<f64> {
    Ok(offset_loss_grad(pred, target, mask, beta)?.0)
}

pub fn offset_loss_grad(
    pred: &[[f64; 3]],
    target: &[[f64; 3]],
    mask: &[bool],
    beta: f64,
) -> Result<(f64, Vec<[f64; 3]>)> {
    if pred.len() != target.len() {
        return Err(Error::dim(target.len(), pred.len(), "offset targets"));
    }
    if pred.len() != mask.len() {
        return Err(Error::dim(pred.len(), mask.len(), "offset mask"));
    }
    let n_pos = mask.iter().filter(|&&m| m).count();
    let mut grad = vec![[0.0; 3]; pred.len()];
    if n_pos == 0 {
        return Ok((0.0, grad));
    }
    let norm = n_pos as f64;
    let mut loss = 0.0;
    for i in (0..pred.len()).filter(|&i| mask[i]) {
        let (l, g) = smooth_l1_grad(&pred[i], &target[i], beta)?;
        loss += l;
        for c in 0..3 {
            grad[i][c] = g[c] / norm;
        }
    }
    Ok((loss / norm, grad))
}

/// Unweighted sum of the four loss terms.
pub fn total_loss(l_rpn: f64, l_gnn: f64, l_offset: f64, l_seg: f64) -> f64 {
    l_rpn + l_gnn + l_offset + l_seg
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_stack_gives_zero() {
        let s = DenseStack::zeros(&[3, 2], Activation::Identity).unwrap();
        let t = s.forward_trace(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(t.output(), &[0.0, 0.0]);
        let (_, dx) = s.backward(&t, &[1.0, 1.0]).unwrap();
        assert_eq!(dx, vec![0.0; 3]);
    }

    #[test]
    fn identity_stack_passes_through() {
        let s = DenseStack::identity(4);
        let x = [1.0, -2.0, 0.5, 3.0];
        let t = s.forward_trace(&x).unwrap();
        assert_eq!(t.output(), &x);
        let up = [0.1, 0.2, 0.3, 0.4];
        let (_, dx) = s.backward(&t, &up).unwrap();
        assert_eq!(dx, up.to_vec());
    }

    #[test]
    fn dims_must_chain_and_match() {
        let a = Dense::zeros(3, 4, Activation::Relu);
        let b = Dense::zeros(5, 1, Activation::Identity);
        assert!(DenseStack::new(vec![a, b]).is_err());
        let s = DenseStack::zeros(&[3, 2], Activation::Identity).unwrap();
        assert!(s.forward(&[1.0]).is_err());
        let t = s.forward_trace(&[1.0, 2.0, 3.0]).unwrap();
        assert!(s.backward(&t, &[1.0]).is_err());
    }

    #[test]
    fn relu_subgradient_at_zero() {
        let s = DenseStack::identity(1);
        let mut relu = s.clone();
        relu.layers_mut()[0].activation = Activation::Relu;
        let t = relu.forward_trace(&[0.0]).unwrap();
        let (g, dx) = relu.backward(&t, &[1.0]).unwrap();
        assert_eq!(dx, vec![0.0]);
        assert_eq!(g.to_flat(), vec![0.0, 0.0]);
    }

    #[test]
    fn glorot_bounds_and_determinism() {
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let a = DenseStack::glorot(&[10, 6, 2], Activation::Identity, &mut r1).unwrap();
        let b = DenseStack::glorot(&[10, 6, 2], Activation::Identity, &mut r2).unwrap();
        assert_eq!(a, b);
        let lim = (6.0f64 / 16.0).sqrt();
        assert!(a.layers()[0].weight.iter().all(|w| w.abs() <= lim));
    }

    #[test]
    fn flat_params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = DenseStack::glorot(&[3, 4, 2], Activation::Relu, &mut rng).unwrap();
        let mut b = a.zeros_like();
        b.set_flat(&a.to_flat()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_params(), 3 * 4 + 4 + 4 * 2 + 2);
        assert!(b.set_flat(&[1.0]).is_err());
    }

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(&[1.0, 2.0], &[1.0, 2.0], 1.0).unwrap(), 0.0);
        assert_eq!(smooth_l1(&[0.5], &[0.0], 1.0).unwrap(), 0.125);
        assert_eq!(smooth_l1(&[2.0], &[0.0], 1.0).unwrap(), 1.5);
        assert_eq!(smooth_l1(&[-2.0], &[0.0], 1.0).unwrap(), 1.5);
        assert!(smooth_l1(&[1.0], &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn focal_single_foreground() {
        let cfg = LossConfig::default();
        let l = focal_loss(&[0.5], &[true], &cfg).unwrap();
        let want = 0.25 * 0.25 * std::f64::consts::LN_2;
        assert!((l - want).abs() < 1e-12);
        assert!((l - 0.04332).abs() < 1e-5);
    }

    #[test]
    fn focal_limits_and_degenerations() {
        let cfg = LossConfig::default();
        let near_one = focal_loss(&[1.0 - 1e-9, 1.0 - 1e-9], &[true, true], &cfg).unwrap();
        assert!(near_one < 1e-12);
        let ce = LossConfig {
            focal_alpha: 1.0,
            focal_gamma: 0.0,
            ..cfg
        };
        let p = [0.3, 0.8, 0.1];
        let mask = [true, true, false];
        let l = focal_loss(&p, &mask, &ce).unwrap();
        let want = -(0.3f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((l - want).abs() < 1e-12);
        assert_eq!(focal_loss(&[0.3], &[false], &cfg).unwrap(), 0.0);
    }

    #[test]
    fn focal_background_flag() {
        let on = LossConfig {
            focal_background: true,
            ..LossConfig::default()
        };
        let l_off = focal_loss(&[0.4, 0.7], &[true, false], &LossConfig::default()).unwrap();
        let l_on = focal_loss(&[0.4, 0.7], &[true, false], &on).unwrap();
        let bg = -0.75 * 0.49 * 0.3f64.ln();
        assert!((l_on - l_off - bg).abs() < 1e-12);
    }

    #[test]
    fn focal_rejects_bad_input() {
        let cfg = LossConfig::default();
        assert!(focal_loss(&[1.5], &[true], &cfg).is_err());
        assert!(focal_loss(&[0.5], &[true, false], &cfg).is_err());
    }

    #[test]
    fn focal_decreases_in_foreground_probability() {
        let cfg = LossConfig::default();
        let mut prev = f64::INFINITY;
        for i in 1..100 {
            let p = f64::from(i) / 100.0;
            let l = focal_loss(&[p, 0.3], &[true, true], &cfg).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn offset_loss_values() {
        let mask = [true, false];
        let a = [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        assert_eq!(offset_loss(&a, &a, &mask, 1.0).unwrap(), 0.0);
        let b = [[0.5, 0.0, 0.0], [9.0, 9.0, 9.0]];
        let z = [[0.0; 3]; 2];
        assert_eq!(offset_loss(&b, &z, &mask, 1.0).unwrap(), 0.125);
        assert_eq!(offset_loss(&b, &z, &[false, false], 1.0).unwrap(), 0.0);
    }

    #[test]
    fn total_is_plain_sum() {
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0), 0.0);
        assert_eq!(total_loss(1.0, 2.0, 3.0, 4.0), 10.0);
    }

    #[test]
    fn loss_config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            focal_alpha: 1.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
