//! Feed-forward encoder towers with exact manual backpropagation.
//!
//! A forward pass can optionally record the input activations of every layer
//! (the matrices whose null space the projector protects) together with the
//! pre-activations needed for the backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, NORM_EPS};

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Gelu => {
                let u = GELU_K * (x + GELU_C * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Gelu => {
                let u = GELU_K * (x + GELU_C * x * x * x);
                let t = u.tanh();
                let du = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
        }
    }
}

/// One affine layer followed by an elementwise activation.
///
/// The bias is fixed at construction; there is no API that mutates it.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub weight: Matrix,
    bias: Vec<f64>,
    pub activation: Activation,
    pub trainable: bool,
}

impl EncoderLayer {
    pub fn new(weight: Matrix, bias: Vec<f64>, activation: Activation, trainable: bool) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(Error::InvalidArgument(format!(
                "bias length {} does not match layer width {}",
                bias.len(),
                weight.cols()
            )));
        }
        Ok(Self {
            weight,
            bias,
            activation,
            trainable,
        })
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }

    /// `O = XW + b`
    pub fn preactivation(&self, x: &Matrix) -> Result<Matrix> {
        let mut o = linalg::matmul(x, &self.weight)?;
        for i in 0..o.rows() {
            for (v, b) in o.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(o)
    }

    /// Returns `(O, σ(O))`.
    pub fn apply(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let o = self.preactivation(x)?;
        let act = self.activation;
        let out = match act {
            Activation::Identity => o.clone(),
            Activation::Gelu => o.map(|v| act.apply(v)),
        };
        Ok((o, out))
    }
}

/// An ordered chain of layers, optionally L2-normalizing its output.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStack {
    pub layers: Vec<EncoderLayer>,
    pub normalize_output: bool,
}

impl EncoderStack {
    pub fn new(layers: Vec<EncoderLayer>, normalize_output: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("encoder stack"));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].d_out() != pair[1].d_in() {
                return Err(Error::InvalidArgument(format!(
                    "layer {k} outputs {} features but layer {} expects {}",
                    pair[0].d_out(),
                    k + 1,
                    pair[1].d_in()
                )));
            }
        }
        if layers.last().map(|l| l.activation) != Some(Activation::Identity) {
            return Err(Error::InvalidArgument(
                "final layer must use the identity activation".into(),
            ));
        }
        Ok(Self {
            layers,
            normalize_output,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].d_out()
    }

    /// Input width of every layer, i.e. the size of its gram matrix.
    pub fn layer_input_dims(&self) -> Vec<usize> {
        self.layers.iter().map(EncoderLayer::d_in).collect()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for l in &mut self.layers {
            l.trainable = trainable;
        }
    }

    pub fn embed(&self, batch: &Matrix) -> Result<Matrix> {
        forward(self, batch, false).map(|(e, _)| e)
    }
}

/// Builds a stack over the given layer sizes with Glorot-uniform weights and
/// zero biases. Hidden layers use `activation`; the last layer is linear.
pub fn init_stack(dims: &[usize], activation: Activation, seed: u64) -> Result<EncoderStack> {
    if dims.len() < 2 {
        return Err(Error::Empty("layer dims"));
    }
    if dims.contains(&0) {
        return Err(Error::InvalidArgument(format!("layer dims must be positive: {dims:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_layers = dims.len() - 1;
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(k, w)| {
            let (d_in, d_out) = (w[0], w[1]);
            let bound = (6.0 / (d_in + d_out) as f64).sqrt();
            let weight = Matrix::from_fn(d_in, d_out, |_, _| rng.random_range(-bound..=bound));
            let act = if k + 1 == n_layers {
                Activation::Identity
            } else {
                activation
            };
            EncoderLayer::new(weight, vec![0.0; d_out], act, true)
        })
        .collect::<Result<Vec<_>>>()?;
    EncoderStack::new(layers, true)
}

/// Activations recorded by a capturing forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Input to each layer; `layer_inputs[0]` is the raw batch.
    pub layer_inputs: Vec<Matrix>,
    pub preactivations: Vec<Matrix>,
    pub pre_norm_output: Matrix,
}

pub fn forward(stack: &EncoderStack, batch: &Matrix, capture: bool) -> Result<(Matrix, Option<ForwardTrace>)> {
    if batch.cols() != stack.input_dim() {
        return Err(Error::ShapeMismatch {
            op: "forward",
            left: batch.shape(),
            right: stack.layers[0].weight.shape(),
        });
    }
    let n = stack.layers.len();
    let mut inputs = Vec::with_capacity(if capture { n } else { 0 });
    let mut pres = Vec::with_capacity(if capture { n } else { 0 });
    let mut x = batch.clone();
    for layer in &stack.layers {
        let (pre, out) = layer.apply(&x)?;
        if capture {
            inputs.push(x);
            pres.push(pre);
        }
        x = out;
    }
    let embeddings = if stack.normalize_output {
        linalg::l2_normalize_rows(&x, NORM_EPS)
    } else {
        x.clone()
    };
    let trace = capture.then_some(ForwardTrace {
        layer_inputs: inputs,
        preactivations: pres,
        pre_norm_output: x,
    });
    Ok((embeddings, trace))
}

/// Per-layer weight gradients. Biases are frozen, so none are produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Matrix>,
}

impl Gradients {
    pub fn zeros_like(stack: &EncoderStack) -> Self {
        Self {
            layers: stack
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.d_in(), l.d_out()))
                .collect(),
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &Gradients) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::InvalidArgument("gradient layer counts differ".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.axpy(alpha, b)?;
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.layers.iter().fold(0.0, |m, g| m.max(g.max_abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Matrix::is_finite)
    }
}

/// Backward pass through row-wise L2 normalization: `(I − uuᵀ)/‖x‖` per row.
/// Rows with norm below `NORM_EPS` get zero gradient.
pub fn l2_normalize_backward(x: &Matrix, upstream: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let row = x.row(i);
        let norm = linalg::dot(row, row).sqrt();
        if norm < NORM_EPS {
            continue;
        }
        let g = upstream.row(i);
        let proj = linalg::dot(row, g) / (norm * norm);
        for ((o, &xi), &gi) in out.row_mut(i).iter_mut().zip(row).zip(g) {
            *o = (gi - xi * proj) / norm;
        }
    }
    out
}

/// Reverse-mode gradients of `⟨embeddings, d_embeddings⟩` with respect to
/// every trainable weight. Frozen layers receive zero-filled entries.
pub fn backward(stack: &EncoderStack, trace: &ForwardTrace, d_embeddings: &Matrix) -> Result<Gradients> {
    let n = stack.layers.len();
    if trace.layer_inputs.len() != n || trace.preactivations.len() != n {
        return Err(Error::InvalidArgument(format!(
            "trace has {} layers, stack has {n}",
            trace.layer_inputs.len()
        )));
    }
    if d_embeddings.shape() != trace.pre_norm_output.shape() {
        return Err(Error::ShapeMismatch {
            op: "backward",
            left: d_embeddings.shape(),
            right: trace.pre_norm_output.shape(),
        });
    }
    let mut grads = Gradients::zeros_like(stack);
    let mut d_out = if stack.normalize_output {
        l2_normalize_backward(&trace.pre_norm_output, d_embeddings)
    } else {
        d_embeddings.clone()
    };
    // Layers below the lowest trainable one need no gradient at all.
    let lowest = stack.layers.iter().position(|l| l.trainable).unwrap_or(n);
    for k in (lowest..n).rev() {
        let layer = &stack.layers[k];
        let pre = &trace.preactivations[k];
        if pre.shape() != d_out.shape() {
            return Err(Error::ShapeMismatch {
                op: "backward",
                left: pre.shape(),
                right: d_out.shape(),
            });
        }
        let d_pre = match layer.activation {
            Activation::Identity => d_out,
            act => {
                let mut d = d_out;
                for (g, &p) in d.data_mut().iter_mut().zip(pre.data()) {
                    *g *= act.derivative(p);
                }
                d
            }
        };
        if layer.trainable {
            grads.layers[k] = linalg::matmul_tn(&trace.layer_inputs[k], &d_pre)?;
        }
        if k > lowest {
            d_out = linalg::matmul_nt(&d_pre, &layer.weight)?;
        } else {
            break;
        }
    }
    Ok(grads)
}

/// Central-difference gradient of `loss_fn` over every trainable weight entry.
/// Each perturbed entry is restored to its exact original value.
pub fn finite_diff_grad<F>(stack: &mut EncoderStack, mut loss_fn: F, epsilon: f64) -> Gradients
where
    F: FnMut(&EncoderStack) -> f64,
{
    let mut grads = Gradients::zeros_like(stack);
    for k in 0..stack.layers.len() {
        if !stack.layers[k].trainable {
            continue;
        }
        let len = stack.layers[k].weight.data().len();
        for idx in 0..len {
            let original = stack.layers[k].weight.data()[idx];
            stack.layers[k].weight.data_mut()[idx] = original + epsilon;
            let plus = loss_fn(stack);
            stack.layers[k].weight.data_mut()[idx] = original - epsilon;
            let minus = loss_fn(stack);
            stack.layers[k].weight.data_mut()[idx] = original;
            grads.layers[k].data_mut()[idx] = (plus - minus) / (2.0 * epsilon);
        }
    }
    grads
}

/// Architecture of the image and text towers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub image_dims: Vec<usize>,
    pub text_dims: Vec<usize>,
    pub temperature: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            image_dims: vec![32, 64, 64, 16],
            text_dims: vec![16, 64, 16],
            temperature: 0.07,
        }
    }
}

/// Image tower (trainable) and text tower (frozen) sharing one embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    pub image_encoder: EncoderStack,
    pub text_encoder: EncoderStack,
    temperature: f64,
}

impl DualEncoder {
    pub fn new(image_encoder: EncoderStack, mut text_encoder: EncoderStack, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        if image_encoder.output_dim() != text_encoder.output_dim() {
            return Err(Error::InvalidArgument(format!(
                "image embedding dim {} != text embedding dim {}",
                image_encoder.output_dim(),
                text_encoder.output_dim()
            )));
        }
        text_encoder.set_trainable(false);
        Ok(Self {
            image_encoder,
            text_encoder,
            temperature,
        })
    }

    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let image = init_stack(&spec.image_dims, Activation::Gelu, seed)?;
        let text = init_stack(&spec.text_dims, Activation::Gelu, seed ^ 0x7e47_7e47_7e47_7e47)?;
        Self::new(image, text, spec.temperature)
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn embed_images(&self, images: &Matrix) -> Result<Matrix> {
        self.image_encoder.embed(images)
    }

    pub fn embed_texts(&self, texts: &Matrix) -> Result<Matrix> {
        self.text_encoder.embed(texts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_stack(&[4, 4], Activation::Gelu, 9).unwrap();
        let b = init_stack(&[4, 4], Activation::Gelu, 9).unwrap();
        assert_eq!(a, b);
        let bound = (6.0f64 / 8.0).sqrt();
        assert!(a.layers[0].weight.data().iter().all(|w| w.abs() <= bound));
        assert!(a.layers[0].bias().iter().all(|&b| b == 0.0));
        assert!(init_stack(&[], Activation::Gelu, 0).is_err());
        assert!(init_stack(&[3, 0, 2], Activation::Gelu, 0).is_err());
    }

    #[test]
    fn init_final_layer_is_linear() {
        let s = init_stack(&[5, 7, 3], Activation::Gelu, 1).unwrap();
        assert_eq!(s.layers[0].activation, Activation::Gelu);
        assert_eq!(s.layers[1].activation, Activation::Identity);
    }

    fn identity_stack(d: usize, act: Activation, normalize: bool) -> EncoderStack {
        let layer = EncoderLayer::new(Matrix::identity(d), vec![0.0; d], act, true).unwrap();
        EncoderStack {
            layers: vec![layer],
            normalize_output: normalize,
        }
    }

    #[test]
    fn identity_network_passes_batch_through() {
        let stack = identity_stack(3, Activation::Identity, false);
        let batch = Matrix::from_rows(&[[1.0, -2.0, 3.5], [0.0, 4.0, -1.0]]);
        let (out, trace) = forward(&stack, &batch, true).unwrap();
        assert_eq!(out, batch);
        assert_eq!(trace.unwrap().layer_inputs[0], batch);
    }

    #[test]
    fn normalized_output_has_unit_rows() {
        let stack = init_stack(&[6, 8, 4], Activation::Gelu, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = Matrix::from_fn(7, 6, |_, _| rng.random_range(-2.0..2.0));
        let (out, _) = forward(&stack, &batch, false).unwrap();
        for n in linalg::row_norms(&out) {
            assert!((n - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn gelu_saturates() {
        let stack = identity_stack(1, Activation::Gelu, false);
        let (out, _) = forward(&stack, &Matrix::from_rows(&[[-100.0]]), false).unwrap();
        assert!(out.get(0, 0).abs() < 1e-12);
        assert!((Activation::Gelu.apply(100.0) - 100.0).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let stack = init_stack(&[4, 2], Activation::Gelu, 0).unwrap();
        assert!(forward(&stack, &Matrix::zeros(2, 3), false).is_err());
    }

    #[test]
    fn trace_replay_is_bitwise() {
        let stack = init_stack(&[5, 9, 9, 3], Activation::Gelu, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let batch = Matrix::from_fn(4, 5, |_, _| rng.random_range(-1.0..1.0));
        let (emb, trace) = forward(&stack, &batch, true).unwrap();
        let trace = trace.unwrap();
        for (k, layer) in stack.layers.iter().enumerate() {
            let (_, out) = layer.apply(&trace.layer_inputs[k]).unwrap();
            let next = trace.layer_inputs.get(k + 1).unwrap_or(&trace.pre_norm_output);
            assert_eq!(&out, next);
        }
        assert_eq!(linalg::l2_normalize_rows(&trace.pre_norm_output, NORM_EPS), emb);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let stack = init_stack(&[3, 4, 2], Activation::Gelu, 1).unwrap();
        let batch = Matrix::from_rows(&[[1.0, 2.0, 3.0]]);
        let (_, trace) = forward(&stack, &batch, true).unwrap();
        let g = backward(&stack, &trace.unwrap(), &Matrix::zeros(1, 2)).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn single_linear_layer_gradient_is_xt_dy() {
        let mut stack = init_stack(&[3, 2], Activation::Gelu, 1).unwrap();
        stack.normalize_output = false;
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]]);
        let dy = Matrix::from_rows(&[[0.5, -1.0], [2.0, 1.0]]);
        let (_, trace) = forward(&stack, &x, true).unwrap();
        let g = backward(&stack, &trace.unwrap(), &dy).unwrap();
        assert_eq!(g.layers[0], linalg::matmul(&x.transpose(), &dy).unwrap());
    }

    #[test]
    fn frozen_layers_get_zero_gradient() {
        let mut stack = init_stack(&[3, 4, 2], Activation::Gelu, 1).unwrap();
        stack.layers[1].trainable = false;
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0]]);
        let (_, trace) = forward(&stack, &x, true).unwrap();
        let g = backward(&stack, &trace.unwrap(), &Matrix::from_rows(&[[1.0, -1.0]])).unwrap();
        assert_eq!(g.layers[1].max_abs(), 0.0);
        assert!(g.layers[0].max_abs() > 0.0);
    }

    #[test]
    fn finite_diff_examples() {
        let mut stack = init_stack(&[3, 2], Activation::Gelu, 8).unwrap();
        let before = stack.clone();
        let g = finite_diff_grad(&mut stack, |_| 4.2, 1e-5);
        assert_eq!(g.max_abs(), 0.0);
        assert_eq!(stack, before);

        let g = finite_diff_grad(&mut stack, |s| s.layers[0].weight.data().iter().sum(), 1e-3);
        assert!(g.layers[0].data().iter().all(|&v| (v - 1.0).abs() < 1e-10));

        let g = finite_diff_grad(
            &mut stack,
            |s| 0.5 * s.layers[0].weight.data().iter().map(|w| w * w).sum::<f64>(),
            1e-4,
        );
        let diff = g.layers[0].sub(&stack.layers[0].weight).unwrap().max_abs();
        assert!(diff < 1e-8, "{diff}");
        assert_eq!(stack, before);
    }

    fn check_against_finite_differences(stack: &mut EncoderStack, batch: &Matrix, upstream: &Matrix) {
        let (_, trace) = forward(stack, batch, true).unwrap();
        let analytic = backward(stack, &trace.unwrap(), upstream).unwrap();
        let numeric = finite_diff_grad(
            stack,
            |s| {
                let (e, _) = forward(s, batch, false).unwrap();
                linalg::dot(e.data(), upstream.data())
            },
            1e-5,
        );
        for (a, n) in analytic.layers.iter().zip(&numeric.layers) {
            for (&x, &y) in a.data().iter().zip(n.data()) {
                if x.abs() > 1e-6 {
                    assert!(((x - y) / x).abs() <= 1e-4, "analytic {x} numeric {y}");
                } else {
                    assert!((x - y).abs() <= 1e-7, "analytic {x} numeric {y}");
                }
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0xBAC4);
        for trial in 0..50 {
            let depth = rng.random_range(1..=3);
            let dims: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..=16)).collect();
            let mut stack = init_stack(&dims, Activation::Gelu, trial).unwrap();
            stack.normalize_output = trial % 2 == 0;
            if depth > 1 && trial % 5 == 0 {
                stack.layers[0].trainable = false;
            }
            let b = rng.random_range(1..=8);
            let batch = Matrix::from_fn(b, dims[0], |_, _| rng.random_range(-2.0..2.0));
            let up = Matrix::from_fn(b, dims[depth], |_, _| rng.random_range(-1.0..1.0));
            check_against_finite_differences(&mut stack, &batch, &up);
        }
    }

    #[test]
    fn dual_encoder_validation() {
        let spec = ModelSpec::default();
        let m = DualEncoder::init(&spec, 3).unwrap();
        assert!(m.text_encoder.layers.iter().all(|l| !l.trainable));
        assert!(m.image_encoder.layers.iter().all(|l| l.trainable));
        let img = init_stack(&[4, 3], Activation::Gelu, 0).unwrap();
        let txt = init_stack(&[4, 5], Activation::Gelu, 0).unwrap();
        assert!(DualEncoder::new(img.clone(), txt, 0.07).is_err());
        assert!(DualEncoder::new(img.clone(), img, 0.0).is_err());
    }
}
