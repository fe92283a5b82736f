//! Learned probability model over feature values and rate machinery.
//!
//! A single global [`DistributionParams`] (Laplace or Cauchy location/scale,
//! scale kept positive through a softplus reparameterization) models the
//! distribution of all stored features. [`rate_loss`] scores noise-perturbed
//! features by the negative log probability mass of their quantization bin and
//! returns analytic gradients for the features and both model parameters.
//! [`quantize`] implements the two export quantizers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound on any bin's probability mass. Caps a single feature's rate
/// contribution at 40 bits so far-tail outliers cannot overflow the loss.
pub const MASS_FLOOR: f64 = 1.0 / (1u64 << 40) as f64;

/// Distribution family of the feature model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistKind {
    Laplace,
    Cauchy,
}

impl DistKind {
    /// Export quantizer conventionally paired with the family: the Laplace
    /// model uses the non-centered mid-rise grid, the Cauchy model the
    /// centered mid-tread grid.
    pub fn default_quantizer(self) -> Quantizer {
        match self {
            DistKind::Laplace => Quantizer::MidRise,
            DistKind::Cauchy => Quantizer::MidTread,
        }
    }
}

/// Scalar uniform quantizer placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantizer {
    /// k = ceil(x/Δ), reconstruction Δ(k − ½). No bin is centered on zero.
    MidRise,
    /// k = floor(x/Δ + ½), reconstruction Δk. Bin 0 is centered on zero.
    MidTread,
}

/// Numerically stable ln(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`]: ln(e^y − 1) for y > 0.
pub fn softplus_inv(y: f64) -> f64 {
    // ln(expm1(y)) is stable for small y; the rewrite y + ln(1 - e^-y)
    // avoids overflow of e^y for large y.
    if y > 20.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

/// d softplus / dx, the logistic sigmoid.
pub fn softplus_deriv(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Location and scale of the learned feature distribution.
///
/// The scale is stored as the unconstrained `b_raw` with b = softplus(b_raw),
/// so gradient steps can never drive b nonpositive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionParams {
    pub kind: DistKind,
    pub mu: f64,
    pub b_raw: f64,
}

impl DistributionParams {
    /// Constructs from the natural scale b > 0.
    pub fn new(kind: DistKind, mu: f64, b: f64) -> Result<Self> {
        if !(b.is_finite() && b > 0.0) {
            return Err(Error::InputDomain(format!("scale b must be positive, got {b}")));
        }
        let params = DistributionParams { kind, mu, b_raw: softplus_inv(b) };
        params.validate()?;
        Ok(params)
    }

    pub fn from_raw(kind: DistKind, mu: f64, b_raw: f64) -> Result<Self> {
        let params = DistributionParams { kind, mu, b_raw };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mu.is_finite() {
            return Err(Error::InputDomain(format!("mu must be finite, got {}", self.mu)));
        }
        if !self.b_raw.is_finite() {
            return Err(Error::InputDomain(format!("b_raw must be finite, got {}", self.b_raw)));
        }
        Ok(())
    }

    /// The positive scale b = softplus(b_raw).
    pub fn b(&self) -> f64 {
        softplus(self.b_raw)
    }
}

/// Quantization step and grid placement used for noise, rate and export.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSpec {
    pub delta: f64,
    pub quantizer: Quantizer,
}

impl QuantSpec {
    pub fn new(delta: f64, quantizer: Quantizer) -> Result<Self> {
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::InputDomain(format!("delta must be positive, got {delta}")));
        }
        Ok(QuantSpec { delta, quantizer })
    }

    /// The default quantizer binding for a distribution family.
    pub fn default_for(kind: DistKind, delta: f64) -> Result<Self> {
        Self::new(delta, kind.default_quantizer())
    }
}

// ---------------------------------------------------------------------------
// Distribution functions
// ---------------------------------------------------------------------------

/// Cumulative distribution function, monotone in x and saturating at 0/1.
pub fn cdf(params: &DistributionParams, x: f64) -> f64 {
    let b = params.b();
    let z = x - params.mu;
    match params.kind {
        DistKind::Laplace => 0.5 + 0.5 * z.signum() * (1.0 - (-z.abs() / b).exp()),
        DistKind::Cauchy => 0.5 + (z / b).atan() / std::f64::consts::PI,
    }
}

/// Probability density function.
pub fn pdf(params: &DistributionParams, x: f64) -> f64 {
    let b = params.b();
    let z = x - params.mu;
    match params.kind {
        DistKind::Laplace => (-z.abs() / b).exp() / (2.0 * b),
        DistKind::Cauchy => b / (std::f64::consts::PI * (z * z + b * b)),
    }
}

/// d cdf / db at fixed x, shared closed form for both families.
fn cdf_scale_deriv(params: &DistributionParams, x: f64) -> f64 {
    let b = params.b();
    -pdf(params, x) * (x - params.mu) / b
}

/// Probability mass of the Δ-wide bin around v, floored at [`MASS_FLOOR`].
pub fn bin_mass(params: &DistributionParams, v: f64, delta: f64) -> f64 {
    let h = 0.5 * delta;
    (cdf(params, v + h) - cdf(params, v - h)).max(MASS_FLOOR)
}

/// Bin mass together with its partial derivatives. Derivatives are zero when
/// the floor is active (the loss is flat there).
struct MassGrad {
    mass: f64,
    d_v: f64,
    d_mu: f64,
    d_b: f64,
}

fn bin_mass_grad(params: &DistributionParams, v: f64, delta: f64) -> MassGrad {
    let h = 0.5 * delta;
    let raw = cdf(params, v + h) - cdf(params, v - h);
    if raw <= MASS_FLOOR {
        return MassGrad { mass: MASS_FLOOR, d_v: 0.0, d_mu: 0.0, d_b: 0.0 };
    }
    let dp = pdf(params, v + h) - pdf(params, v - h);
    MassGrad {
        mass: raw,
        d_v: dp,
        d_mu: -dp,
        d_b: cdf_scale_deriv(params, v + h) - cdf_scale_deriv(params, v - h),
    }
}

// ---------------------------------------------------------------------------
// Rate loss
// ---------------------------------------------------------------------------

/// Rate estimate in bits per feature with analytic gradients.
#[derive(Debug, Clone)]
pub struct RateLoss {
    /// R, the mean of −log₂ bin_mass over all features.
    pub bits_per_feature: f64,
    /// dR/dθ per feature value, aligned with the input slice.
    pub grad_values: Vec<f64>,
    pub grad_mu: f64,
    pub grad_b_raw: f64,
}

/// Rate of noise-perturbed features with the noise passed in explicitly.
///
/// Each feature is scored at θ + noise; the noise is treated as a constant
/// by the gradients. This is the deterministic core used by training (which
/// draws noise from its own stream) and by finite-difference tests (which
/// freeze it). Panics if the slices differ in length; `values` must be
/// non-empty.
pub fn rate_loss_with_noise(
    values: &[f64],
    noise: &[f64],
    params: &DistributionParams,
    delta: f64,
) -> RateLoss {
    assert_eq!(values.len(), noise.len(), "noise length");
    assert!(!values.is_empty(), "rate of an empty table");
    let n = values.len() as f64;
    let ln2 = std::f64::consts::LN_2;
    let mut bits = 0.0;
    let mut grad_values = vec![0.0; values.len()];
    let mut grad_mu = 0.0;
    let mut grad_b = 0.0;
    for (i, (&v, &u)) in values.iter().zip(noise).enumerate() {
        let g = bin_mass_grad(params, v + u, delta);
        bits -= g.mass.log2();
        // d(−log2 m)/dX = −(dm/dX)/(m ln 2); dv̂/dθ = 1.
        let coeff = -1.0 / (g.mass * ln2 * n);
        grad_values[i] = coeff * g.d_v;
        grad_mu += coeff * g.d_mu;
        grad_b += coeff * g.d_b;
    }
    RateLoss {
        bits_per_feature: bits / n,
        grad_values,
        grad_mu,
        grad_b_raw: grad_b * softplus_deriv(params.b_raw),
    }
}

/// Rate of the stored features with fresh uniform noise drawn from `rng`.
pub fn rate_loss(
    values: &[f64],
    params: &DistributionParams,
    quant: &QuantSpec,
    rng: &mut impl Rng,
) -> RateLoss {
    let noise: Vec<f64> = values.iter().map(|_| draw_noise(quant.delta, rng)).collect();
    rate_loss_with_noise(values, &noise, params, quant.delta)
}

/// Noise-free rate in bits per feature, forward only. Used to score already
/// quantized values at their bin centers.
pub fn rate_bits(values: &[f64], params: &DistributionParams, delta: f64) -> f64 {
    assert!(!values.is_empty(), "rate of an empty table");
    let sum: f64 = values.iter().map(|&v| -bin_mass(params, v, delta).log2()).sum();
    sum / values.len() as f64
}

#[inline]
fn draw_noise(delta: f64, rng: &mut impl Rng) -> f64 {
    if delta == 0.0 {
        0.0
    } else {
        rng.gen_range(-0.5 * delta..=0.5 * delta)
    }
}

/// Adds i.i.d. U[−Δ/2, Δ/2] noise to every element in place.
pub fn inject_noise(y: &mut [f64], delta: f64, rng: &mut impl Rng) {
    for v in y {
        *v += draw_noise(delta, rng);
    }
}

/// Draws one value from the continuous distribution by inverse-CDF sampling.
pub fn sample_value(params: &DistributionParams, rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.gen_range(0.0..1.0) - 0.5;
    let b = params.b();
    match params.kind {
        DistKind::Laplace => params.mu - b * u.signum() * (1.0 - 2.0 * u.abs()).ln(),
        DistKind::Cauchy => params.mu + b * (std::f64::consts::PI * u).tan(),
    }
}

// ---------------------------------------------------------------------------
// Quantizers
// ---------------------------------------------------------------------------

/// Quantizes a scalar to its integer bin index and reconstruction value.
///
/// Mid-rise: k = ceil(x/Δ), value Δ(k − ½). Mid-tread: k = floor(x/Δ + ½),
/// value Δk. Both satisfy |value − x| ≤ Δ/2 with ties resolved by the stated
/// rounding; a one-bin correction absorbs the rare case where float rounding
/// of x/Δ lands the raw ceil or floor on the wrong side.
pub fn quantize(x: f64, quant: &QuantSpec) -> Result<(i64, f64)> {
    if !x.is_finite() {
        return Err(Error::InputDomain(format!("cannot quantize non-finite value {x}")));
    }
    let d = quant.delta;
    let mut k = match quant.quantizer {
        Quantizer::MidRise => (x / d).ceil() as i64,
        Quantizer::MidTread => (x / d + 0.5).floor() as i64,
    };
    let half = 0.5 * d;
    if dequantize(k, quant) - x > half {
        k -= 1;
    } else if x - dequantize(k, quant) > half {
        k += 1;
    }
    Ok((k, dequantize(k, quant)))
}

/// Reconstruction value of bin k.
pub fn dequantize(k: i64, quant: &QuantSpec) -> f64 {
    match quant.quantizer {
        Quantizer::MidRise => quant.delta * (k as f64 - 0.5),
        Quantizer::MidTread => quant.delta * k as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn laplace(mu: f64, b: f64) -> DistributionParams {
        DistributionParams::new(DistKind::Laplace, mu, b).unwrap()
    }

    fn cauchy(mu: f64, b: f64) -> DistributionParams {
        DistributionParams::new(DistKind::Cauchy, mu, b).unwrap()
    }

    #[test]
    fn softplus_roundtrip_and_reference_value() {
        for b in [1e-4, 0.01, 0.05, 1.0, 10.0, 50.0] {
            let back = softplus(softplus_inv(b));
            assert!((back - b).abs() / b < 1e-12, "b {b} -> {back}");
        }
        // ln(e^0.01 - 1), evaluated independently.
        assert!((softplus_inv(0.01) - -4.600166019324897).abs() < 1e-12);
        assert!((softplus_deriv(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cdf_at_location_is_half() {
        for p in [laplace(0.3, 0.01), cauchy(0.3, 0.01)] {
            assert!((cdf(&p, 0.3) - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn cdf_reference_values() {
        // 1 - e^{-7.5}/2 and 1/2 + atan(7.5)/pi, evaluated independently.
        assert!((cdf(&laplace(0.0, 0.01), 0.075) - 0.9997234578149261).abs() < 1e-14);
        assert!((cdf(&cauchy(0.0, 0.01), 0.075) - 0.9578075368411587).abs() < 1e-14);
    }

    #[test]
    fn cdf_saturates() {
        let p = laplace(0.0, 0.01);
        assert_eq!(cdf(&p, 1e6), 1.0);
        assert_eq!(cdf(&p, -1e6), 0.0);
        let c = cauchy(0.0, 0.01);
        assert!(cdf(&c, 1e12) <= 1.0 && cdf(&c, 1e12) > 1.0 - 1e-12);
        assert!(cdf(&c, -1e12) >= 0.0 && cdf(&c, -1e12) < 1e-12);
    }

    #[test]
    fn bin_mass_reference_values() {
        // 1 - e^{-7.5} and (2/pi) atan(7.5), evaluated independently.
        assert!((bin_mass(&laplace(0.0, 0.01), 0.0, 0.15) - 0.9994469156298522).abs() < 1e-14);
        assert!((bin_mass(&cauchy(0.0, 0.01), 0.0, 0.15) - 0.9156150736823173).abs() < 1e-14);
    }

    #[test]
    fn bin_mass_wide_bin_approaches_one() {
        for p in [laplace(0.1, 0.05), cauchy(0.1, 0.05)] {
            assert!(bin_mass(&p, 0.1, 1e9) > 1.0 - 1e-9);
        }
    }

    #[test]
    fn bin_mass_floor_in_far_tail() {
        let p = laplace(0.0, 0.001);
        assert_eq!(bin_mass(&p, 500.0, 0.15), MASS_FLOOR);
        // Floored region contributes exactly 40 bits and zero gradient.
        let r = rate_loss_with_noise(&[500.0], &[0.0], &p, 0.15);
        assert!((r.bits_per_feature - 40.0).abs() < 1e-12);
        assert_eq!(r.grad_values[0], 0.0);
        assert_eq!(r.grad_mu, 0.0);
        assert_eq!(r.grad_b_raw, 0.0);
    }

    #[test]
    fn rate_reference_value_wide_scale() {
        // All features at mu with b = 10: mass = 1 - e^{-0.0075}, R = 7.0643
        // bits, evaluated independently. Noise moves it by < 0.01 bits.
        let p = laplace(0.2, 10.0);
        let values = vec![0.2; 4000];
        let zero = vec![0.0; 4000];
        let exact = rate_loss_with_noise(&values, &zero, &p, 0.15);
        assert!((exact.bits_per_feature - 7.064300414141982).abs() < 1e-10);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let quant = QuantSpec::default_for(DistKind::Laplace, 0.15).unwrap();
        let noisy = rate_loss(&values, &p, &quant, &mut rng);
        assert!((noisy.bits_per_feature - exact.bits_per_feature).abs() < 0.01);
    }

    #[test]
    fn rate_gradient_zero_at_mode_center() {
        // A feature sitting exactly at mu sees a symmetric bin.
        let p = cauchy(0.05, 0.02);
        let r = rate_loss_with_noise(&[0.05], &[0.0], &p, 0.15);
        assert!(r.grad_values[0].abs() < 1e-15);
        assert!(r.grad_mu.abs() < 1e-15);
        // The scale gradient is nonzero: widening b flattens the bin.
        assert!(r.grad_b_raw.abs() > 1e-6);
    }

    #[test]
    fn rate_gradients_match_finite_differences() {
        for kind in [DistKind::Laplace, DistKind::Cauchy] {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let params = DistributionParams::new(kind, 0.01, 0.04).unwrap();
            let delta = 0.15;
            let values: Vec<f64> = (0..100).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let noise: Vec<f64> =
                (0..100).map(|_| rng.gen_range(-0.5 * delta..=0.5 * delta)).collect();
            let r = rate_loss_with_noise(&values, &noise, &params, delta);

            let h = 1e-6;
            let eval = |vals: &[f64], p: &DistributionParams| {
                rate_loss_with_noise(vals, &noise, p, delta).bits_per_feature
            };
            let check = |fd: f64, an: f64, what: &str| {
                let scale = fd.abs().max(an.abs()).max(1e-10);
                assert!((fd - an).abs() / scale < 1e-5, "{kind:?} {what}: fd {fd} vs {an}");
            };

            for i in (0..values.len()).step_by(9) {
                let mut vp = values.clone();
                vp[i] += h;
                let mut vm = values.clone();
                vm[i] -= h;
                check((eval(&vp, &params) - eval(&vm, &params)) / (2.0 * h), r.grad_values[i], "theta");
            }
            let mut pp = params;
            pp.mu += h;
            let mut pm = params;
            pm.mu -= h;
            check((eval(&values, &pp) - eval(&values, &pm)) / (2.0 * h), r.grad_mu, "mu");
            let mut bp = params;
            bp.b_raw += h;
            let mut bm = params;
            bm.b_raw -= h;
            check((eval(&values, &bp) - eval(&values, &bm)) / (2.0 * h), r.grad_b_raw, "b_raw");
        }
    }

    #[test]
    fn rate_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let quant = QuantSpec::default_for(DistKind::Cauchy, 0.15).unwrap();
        for _ in 0..50 {
            let p = cauchy(rng.gen_range(-1.0..1.0), rng.gen_range(1e-3..2.0));
            let values: Vec<f64> = (0..64).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let r = rate_loss(&values, &p, &quant, &mut rng);
            assert!(r.bits_per_feature >= 0.0);
        }
    }

    #[test]
    fn bin_masses_normalize() {
        let delta = 0.15f64;
        // Laplace tails decay fast enough that 40 scales suffice.
        let p = laplace(0.03, 0.05);
        let k_span = (40.0 * 0.05 / delta).ceil() as i64 + 2;
        let center_k = (p.mu / delta).round() as i64;
        let sum: f64 = (center_k - k_span..=center_k + k_span)
            .map(|k| bin_mass(&p, delta * k as f64, delta))
            .sum();
        assert!(sum >= 1.0 - 1e-6, "laplace sum {sum}");

        // Cauchy tails are heavy; the same coverage needs a far wider window.
        let c = cauchy(0.03, 0.05);
        let k_span = (2e6 * 0.05 / delta).ceil() as i64;
        let sum: f64 = (center_k - k_span..=center_k + k_span)
            .map(|k| bin_mass(&c, delta * k as f64, delta))
            .sum();
        assert!(sum >= 1.0 - 1e-6, "cauchy sum {sum}");
    }

    #[test]
    fn discretized_self_information_consistency() {
        // Features drawn from the model itself, quantized to bin centers:
        // the mean rate must match the analytic entropy of the discretized
        // distribution.
        let params = laplace(0.0, 0.05);
        let quant = QuantSpec::default_for(DistKind::Laplace, 0.15).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let centers: Vec<f64> = (0..20_000)
            .map(|_| quantize(sample_value(&params, &mut rng), &quant).unwrap().1)
            .collect();
        let empirical = rate_bits(&centers, &params, quant.delta);

        let mut entropy = 0.0;
        for k in -4000..=4000i64 {
            let m = bin_mass(&params, dequantize(k, &quant), quant.delta);
            if m > MASS_FLOOR {
                entropy -= m * m.log2();
            }
        }
        let rel = (empirical - entropy).abs() / entropy;
        assert!(rel < 0.02, "empirical {empirical} vs entropy {entropy} (rel {rel})");
    }

    #[test]
    fn inject_noise_bounded_and_deterministic() {
        let base: Vec<f64> = (0..256).map(|i| i as f64 * 0.01).collect();
        let mut a = base.clone();
        let mut b = base.clone();
        inject_noise(&mut a, 0.15, &mut ChaCha8Rng::seed_from_u64(9));
        inject_noise(&mut b, 0.15, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert!(a.iter().zip(&base).any(|(x, y)| x != y));
        for (x, y) in a.iter().zip(&base) {
            assert!((x - y).abs() <= 0.075 + 1e-15);
        }
        let mut c = base.clone();
        inject_noise(&mut c, 0.0, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(c, base);
    }

    #[test]
    fn quantizer_reference_points() {
        let rise = QuantSpec::new(0.15, Quantizer::MidRise).unwrap();
        let tread = QuantSpec::new(0.15, Quantizer::MidTread).unwrap();
        assert_eq!(quantize(0.07, &tread).unwrap(), (0, 0.0));
        let (k, v) = quantize(0.0, &rise).unwrap();
        assert_eq!(k, 0);
        assert!((v - -0.075).abs() < 1e-15);
        let (k, v) = quantize(-0.08, &tread).unwrap();
        assert_eq!(k, -1);
        assert!((v - -0.15).abs() < 1e-15);
    }

    #[test]
    fn quantize_rejects_non_finite() {
        let q = QuantSpec::new(0.15, Quantizer::MidRise).unwrap();
        assert!(quantize(f64::NAN, &q).is_err());
        assert!(quantize(f64::INFINITY, &q).is_err());
    }

    #[test]
    fn default_quantizer_binding() {
        assert_eq!(DistKind::Laplace.default_quantizer(), Quantizer::MidRise);
        assert_eq!(DistKind::Cauchy.default_quantizer(), Quantizer::MidTread);
    }

    #[test]
    fn params_reject_bad_scale() {
        assert!(DistributionParams::new(DistKind::Laplace, 0.0, 0.0).is_err());
        assert!(DistributionParams::new(DistKind::Laplace, 0.0, -1.0).is_err());
        assert!(DistributionParams::new(DistKind::Laplace, f64::NAN, 0.01).is_err());
        assert!(QuantSpec::new(0.0, Quantizer::MidRise).is_err());
    }
}
