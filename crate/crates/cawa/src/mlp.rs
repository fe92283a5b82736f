//! Small fully-connected decoder networks.
//!
//! Parameters live in one flat `Vec<f64>` (per layer: weight matrix row-major,
//! then bias) so the optimizer and checkpoint code can treat every net as a
//! plain parameter slice. Forward passes record the activations needed for an
//! exact hand-derived backward pass; [`MlpTrace`] doubles as a scratch buffer
//! so per-sample evaluation does not allocate.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp bound of the exponential output head.
pub const EXP_CLAMP: f64 = 15.0;

/// Output activation; hidden layers are always relu.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// exp(t) with t clamped to [−15, 15].
    ExpClamped,
    Sigmoid,
    Identity,
}

/// Network shape: `hidden_layers` relu layers of width `hidden` between the
/// input and output affine maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub output: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.output == 0 {
            return Err(Error::Config("mlp widths must be >= 1".into()));
        }
        if self.hidden_layers > 0 && self.hidden == 0 {
            return Err(Error::Config("hidden width must be >= 1".into()));
        }
        Ok(())
    }

    /// (fan_in, fan_out) of each affine layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers + 1);
        let mut prev = self.input;
        for _ in 0..self.hidden_layers {
            dims.push((prev, self.hidden));
            prev = self.hidden;
        }
        dims.push((prev, self.output));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|&(i, o)| o * (i + 1)).sum()
    }
}

/// Flat parameter storage for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    spec: MlpSpec,
    data: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        Ok(MlpParams { data: vec![0.0; spec.param_count()], spec })
    }

    /// Glorot-uniform weights, zero biases; deterministic per seed.
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut off = 0;
        for (fan_in, fan_out) in spec.layer_dims() {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in &mut params.data[off..off + fan_out * fan_in] {
                *w = rng.gen_range(-limit..=limit);
            }
            off += fan_out * (fan_in + 1);
        }
        Ok(params)
    }

    pub fn from_data(spec: MlpSpec, data: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if data.len() != spec.param_count() {
            return Err(Error::Mismatch(format!(
                "mlp parameter count {} does not match spec {}",
                data.len(),
                spec.param_count()
            )));
        }
        Ok(MlpParams { spec, data })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Forward-pass record: the input and every post-relu activation, plus the
/// output-layer preactivation. Reused across samples to avoid allocation.
#[derive(Debug, Clone, Default)]
pub struct MlpTrace {
    /// activations[0] is the input; activations[l+1] the output of hidden
    /// layer l.
    activations: Vec<Vec<f64>>,
    preact: Vec<f64>,
    pub output: Vec<f64>,
    /// Backward scratch, one delta buffer per affine layer.
    deltas: Vec<Vec<f64>>,
}

/// Evaluates the network, filling `trace` (including `trace.output`).
///
/// Panics if `x` does not match the configured input width.
pub fn mlp_forward(params: &MlpParams, x: &[f64], trace: &mut MlpTrace) {
    let spec = params.spec;
    assert_eq!(x.len(), spec.input, "mlp input width");
    let dims = spec.layer_dims();
    trace.activations.resize(dims.len(), Vec::new());
    trace.deltas.resize(dims.len(), Vec::new());
    trace.activations[0].clear();
    trace.activations[0].extend_from_slice(x);

    let mut off = 0;
    for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let (w, rest) = params.data[off..].split_at(fan_out * fan_in);
        let b = &rest[..fan_out];
        off += fan_out * (fan_in + 1);
        let last = l + 1 == dims.len();

        // Write into preact for the output layer, the next activation slot
        // otherwise; the borrow split keeps the input slice readable.
        let (head, tail) = trace.activations.split_at_mut(l + 1);
        let input = &head[l];
        let out: &mut Vec<f64> = if last { &mut trace.preact } else { &mut tail[0] };
        out.clear();
        out.reserve(fan_out);
        for (row, &bi) in w.chunks_exact(fan_in).zip(b) {
            let mut acc = bi;
            for (wij, xj) in row.iter().zip(input) {
                acc += wij * xj;
            }
            out.push(if last { acc } else { acc.max(0.0) });
        }
    }

    trace.output.clear();
    trace.output.extend(trace.preact.iter().map(|&t| match spec.activation {
        Activation::ExpClamped => t.clamp(-EXP_CLAMP, EXP_CLAMP).exp(),
        Activation::Sigmoid => 1.0 / (1.0 + (-t).exp()),
        Activation::Identity => t,
    }));
}

/// Exact reverse pass. Accumulates parameter gradients into `grad_data`
/// (same layout as [`MlpParams::data`]) and input gradients into
/// `grad_input`; callers zero the buffers when they want plain gradients.
///
/// Panics on any shape mismatch with the forward trace.
pub fn mlp_backward(
    params: &MlpParams,
    trace: &mut MlpTrace,
    grad_output: &[f64],
    grad_data: &mut [f64],
    grad_input: &mut [f64],
) {
    let spec = params.spec;
    assert_eq!(grad_output.len(), spec.output, "grad_output width");
    assert_eq!(grad_data.len(), params.data.len(), "grad_data length");
    assert_eq!(grad_input.len(), spec.input, "grad_input width");
    let dims = spec.layer_dims();
    assert_eq!(trace.activations.len(), dims.len(), "trace layer count");

    // Output activation backward into the last delta buffer.
    {
        let delta = &mut trace.deltas[dims.len() - 1];
        delta.clear();
        delta.extend(grad_output.iter().enumerate().map(|(i, &g)| {
            let t = trace.preact[i];
            match spec.activation {
                Activation::ExpClamped => {
                    if t.abs() < EXP_CLAMP {
                        g * trace.output[i]
                    } else {
                        0.0
                    }
                }
                Activation::Sigmoid => {
                    let s = trace.output[i];
                    g * s * (1.0 - s)
                }
                Activation::Identity => g,
            }
        }));
    }

    let mut off_end = params.data.len();
    for l in (0..dims.len()).rev() {
        let (fan_in, fan_out) = dims[l];
        let off = off_end - fan_out * (fan_in + 1);
        let w = &params.data[off..off + fan_out * fan_in];
        let (gw, gb) = grad_data[off..off_end].split_at_mut(fan_out * fan_in);
        off_end = off;

        let (lower, upper) = trace.deltas.split_at_mut(l);
        let delta = &upper[0];
        let input = &trace.activations[l];
        assert_eq!(input.len(), fan_in, "trace activation width");

        // dL/dW = delta x^T, dL/db = delta.
        for (grow, &di) in gw.chunks_exact_mut(fan_in).zip(delta.iter()) {
            for (g, &xj) in grow.iter_mut().zip(input) {
                *g += di * xj;
            }
        }
        for (g, &di) in gb.iter_mut().zip(delta.iter()) {
            *g += di;
        }

        // dL/dx = W^T delta, masked by the relu of the layer below.
        if l == 0 {
            for (j, g) in grad_input.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (i, &di) in delta.iter().enumerate() {
                    acc += w[i * fan_in + j] * di;
                }
                *g += acc;
            }
        } else {
            let prev = &mut lower[l - 1];
            prev.clear();
            prev.resize(fan_in, 0.0);
            for (i, &di) in delta.iter().enumerate() {
                let row = &w[i * fan_in..(i + 1) * fan_in];
                for (p, &wij) in prev.iter_mut().zip(row) {
                    *p += wij * di;
                }
            }
            for (p, &a) in prev.iter_mut().zip(&trace.activations[l]) {
                if a <= 0.0 {
                    *p = 0.0;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Field decoders
// ---------------------------------------------------------------------------

/// Width of [`direction_encoding`] output: the raw direction plus two
/// sin/cos harmonic pairs per axis.
pub const DIR_ENCODING_LEN: usize = 15;

/// Componentwise direction features: (d, sin d, cos d, sin 2d, cos 2d per axis).
pub fn direction_encoding(d: &[f64; 3]) -> Vec<f64> {
    let mut out = Vec::with_capacity(DIR_ENCODING_LEN);
    out.extend_from_slice(d);
    for &c in d {
        out.push(c.sin());
        out.push(c.cos());
        out.push((2.0 * c).sin());
        out.push((2.0 * c).cos());
    }
    out
}

/// Density decode: σ = exp(clamp(out₀)) and the raw output vector as the
/// geometry features handed to the color head (channel 0 included).
#[derive(Debug, Clone, Default)]
pub struct DensityOut {
    pub sigma: f64,
    pub geometry: Vec<f64>,
}

/// Runs the density net (identity head) on noisy encoded features.
pub fn decode_density(net: &MlpParams, y_noisy: &[f64], trace: &mut MlpTrace, out: &mut DensityOut) {
    assert_eq!(net.spec.activation, Activation::Identity, "density net head");
    mlp_forward(net, y_noisy, trace);
    out.sigma = trace.output[0].clamp(-EXP_CLAMP, EXP_CLAMP).exp();
    out.geometry.clear();
    out.geometry.extend_from_slice(&trace.output);
}

/// Backward through [`decode_density`]: folds `grad_sigma` and the geometry
/// gradient into one output gradient and runs the net's reverse pass.
#[allow(clippy::too_many_arguments)]
pub fn decode_density_backward(
    net: &MlpParams,
    trace: &mut MlpTrace,
    out: &DensityOut,
    grad_sigma: f64,
    grad_geometry: &[f64],
    grad_data: &mut [f64],
    grad_input: &mut [f64],
    grad_out_buf: &mut Vec<f64>,
) {
    grad_out_buf.clear();
    grad_out_buf.extend_from_slice(grad_geometry);
    if trace.output[0].abs() < EXP_CLAMP {
        grad_out_buf[0] += grad_sigma * out.sigma;
    }
    mlp_backward(net, trace, grad_out_buf, grad_data, grad_input);
}

/// Runs the color net (sigmoid head) on geometry features and an encoded
/// direction; output is rgb in [0,1]³.
pub fn decode_color(
    net: &MlpParams,
    geometry: &[f64],
    dir_enc: &[f64],
    input_buf: &mut Vec<f64>,
    trace: &mut MlpTrace,
) {
    assert_eq!(net.spec.activation, Activation::Sigmoid, "color net head");
    input_buf.clear();
    input_buf.extend_from_slice(geometry);
    input_buf.extend_from_slice(dir_enc);
    mlp_forward(net, input_buf, trace);
}
