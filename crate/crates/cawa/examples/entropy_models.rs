//! Tours the probability side of the codec: the two symbol distributions,
//! their bin masses under a uniform quantizer, and the matching rate
//! estimates used during training.
//!
//!     cargo run --release --example entropy_models

use cawa::entropy::{
    dequantize, quantize, rate_bits, sample_value, DistKind, DistributionParams, QuantSpec,
    Quantizer,
};
use cawa::error::Result;
use rand::SeedableRng;

fn main() -> Result<()> {
    let delta = 0.15;
    let laplace = DistributionParams::new(DistKind::Laplace, 0.0, 0.1)?;
    let cauchy = DistributionParams::new(DistKind::Cauchy, 0.0, 0.1)?;

    // Self-information per bin center: the Cauchy's heavy tails charge less
    // for outliers, the Laplace less for the near-mode bins.
    println!("bits to code a feature whose bin center is x (delta {delta}):");
    println!("{:>8} {:>10} {:>10}", "x", "laplace", "cauchy");
    for k in -4i64..=4 {
        let quant = QuantSpec::new(delta, Quantizer::MidTread)?;
        let x = dequantize(k, &quant);
        let bits_l = rate_bits(&[x], &laplace, delta);
        let bits_c = rate_bits(&[x], &cauchy, delta);
        println!("{x:>8.3} {bits_l:>10.3} {bits_c:>10.3}");
    }

    // Mid-rise reconstructs half-integer multiples of delta, mid-tread whole
    // ones; both stay within delta/2 of the input.
    println!("\nquantizer behaviour on a few values:");
    println!("{:>8} {:>18} {:>18}", "x", "mid-rise (k, x')", "mid-tread (k, x')");
    for x in [-0.31, -0.08, 0.0, 0.074, 0.076, 0.5] {
        let (kr, vr) = quantize(x, &QuantSpec::new(delta, Quantizer::MidRise)?)?;
        let (kt, vt) = quantize(x, &QuantSpec::new(delta, Quantizer::MidTread)?)?;
        println!("{x:>8.3} {:>18} {:>18}", format!("({kr}, {vr:.3})"), format!("({kt}, {vt:.3})"));
    }

    // Average rate of a synthetic table drawn from each model: the matched
    // model is cheapest, a mismatched spread costs bits.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let draws: Vec<f64> = (0..20_000).map(|_| sample_value(&laplace, &mut rng)).collect();
    println!("\n20k features drawn from the laplace model:");
    for (label, params) in [("laplace b=0.1", &laplace), ("cauchy  b=0.1", &cauchy)] {
        println!("  coded against {label}: {:.4} bits/feature", rate_bits(&draws, params, delta));
    }
    let narrow = DistributionParams::new(DistKind::Laplace, 0.0, 0.02)?;
    println!(
        "  coded against laplace b=0.02: {:.4} bits/feature (mismatch is expensive)",
        rate_bits(&draws, &narrow, delta)
    );
    Ok(())
}
