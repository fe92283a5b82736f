//! Ray generation, sampling, transmittance compositing and the analytic
//! oracle scene.
//!
//! Rays march through the unit cube; per-sample densities and colors are
//! accumulated with the standard emission-absorption model over a black
//! background. [`composite_backward`] is the exact division-free adjoint.
//! [`AnalyticScene`] is a closed-form density/color field whose dense
//! reference renders serve as volumetric ground truth.

use rand::Rng;

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: &Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// A ray r(t) = o + t d with unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

/// Pinhole camera. Rows of `rotation` are the world-space right, up and
/// forward axes; `fov` is the full vertical field of view in radians.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub position: Vec3,
    pub rotation: [Vec3; 3],
    pub fov: f64,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    pub fn new(position: Vec3, rotation: [Vec3; 3], fov: f64, width: u32, height: u32) -> Result<Self> {
        if !(fov > 0.0 && fov < std::f64::consts::PI) {
            return Err(Error::InputDomain(format!("fov {fov} outside (0, pi)")));
        }
        if width == 0 || height == 0 {
            return Err(Error::InputDomain("image dimensions must be >= 1".into()));
        }
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                let got = dot(&rotation[i], &rotation[j]);
                if (got - want).abs() > 1e-9 {
                    return Err(Error::InputDomain(format!(
                        "rotation rows {i},{j} not orthonormal: dot = {got}"
                    )));
                }
            }
        }
        Ok(Camera { position, rotation, fov, width, height })
    }

    /// Camera at `position` looking toward `target`.
    pub fn look_at(
        position: Vec3,
        target: Vec3,
        up_hint: Vec3,
        fov: f64,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let forward = sub(&target, &position);
        if norm(&forward) < 1e-12 {
            return Err(Error::InputDomain("camera position equals target".into()));
        }
        let forward = normalize(&forward);
        let right = cross(&up_hint, &forward);
        if norm(&right) < 1e-9 {
            return Err(Error::InputDomain("up hint parallel to view direction".into()));
        }
        let right = normalize(&right);
        let up = cross(&forward, &right);
        Camera::new(position, [right, up, forward], fov, width, height)
    }

    pub fn right(&self) -> &Vec3 {
        &self.rotation[0]
    }

    pub fn up(&self) -> &Vec3 {
        &self.rotation[1]
    }

    pub fn forward(&self) -> &Vec3 {
        &self.rotation[2]
    }

    /// Ray through fractional pixel coordinates; (w/2, h/2) is the image
    /// center, +py points down the image.
    pub fn pixel_ray(&self, px: f64, py: f64) -> Ray {
        let tan_y = (0.5 * self.fov).tan();
        let tan_x = tan_y * self.width as f64 / self.height as f64;
        let u = (2.0 * px / self.width as f64 - 1.0) * tan_x;
        let v = (1.0 - 2.0 * py / self.height as f64) * tan_y;
        let dir = [
            u * self.rotation[0][0] + v * self.rotation[1][0] + self.rotation[2][0],
            u * self.rotation[0][1] + v * self.rotation[1][1] + self.rotation[2][1],
            u * self.rotation[0][2] + v * self.rotation[1][2] + self.rotation[2][2],
        ];
        Ray { origin: self.position, dir: normalize(&dir) }
    }
}

/// Rays through the centers of the listed pixels.
pub fn generate_rays(camera: &Camera, pixels: &[(u32, u32)]) -> Result<Vec<Ray>> {
    pixels
        .iter()
        .map(|&(px, py)| {
            if px >= camera.width || py >= camera.height {
                return Err(Error::InputDomain(format!(
                    "pixel ({px},{py}) outside {}x{} image",
                    camera.width, camera.height
                )));
            }
            Ok(camera.pixel_ray(px as f64 + 0.5, py as f64 + 0.5))
        })
        .collect()
}

/// Entry/exit distances of a ray through [0,1]^3, entry clamped to t >= 0.
/// None when the ray misses the cube.
pub fn unit_cube_span(ray: &Ray) -> Option<(f64, f64)> {
    let mut t_near = 0.0f64;
    let mut t_far = f64::INFINITY;
    for a in 0..3 {
        if ray.dir[a].abs() < 1e-15 {
            if !(0.0..=1.0).contains(&ray.origin[a]) {
                return None;
            }
            continue;
        }
        let inv = 1.0 / ray.dir[a];
        let (t0, t1) = {
            let ta = (0.0 - ray.origin[a]) * inv;
            let tb = (1.0 - ray.origin[a]) * inv;
            if ta <= tb { (ta, tb) } else { (tb, ta) }
        };
        t_near = t_near.max(t0);
        t_far = t_far.min(t1);
    }
    (t_near < t_far).then_some((t_near, t_far))
}

/// Per-ray sample buffer: positions and spacings from [`sample_along`],
/// densities and colors filled in by the field decoder.
#[derive(Debug, Clone, Default)]
pub struct RaySamples {
    pub positions: Vec<Vec3>,
    pub deltas: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub colors: Vec<Vec3>,
}

impl RaySamples {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Places `n` samples on [t_near, t_far]: bin midpoints, or one uniform
/// draw per bin when `stratified`. Spacings are forward differences with the
/// final spacing set to the bin width. Positions are clamped to the unit
/// cube against float drift at the faces.
pub fn sample_along(
    ray: &Ray,
    t_near: f64,
    t_far: f64,
    n: usize,
    stratified: bool,
    rng: &mut impl Rng,
    out: &mut RaySamples,
) {
    assert!(n >= 1, "at least one sample");
    assert!(t_far > t_near && t_near >= 0.0, "t span [{t_near}, {t_far}]");
    let w = (t_far - t_near) / n as f64;
    out.positions.clear();
    out.deltas.clear();
    out.sigmas.clear();
    out.colors.clear();

    let mut ts: Vec<f64> = Vec::with_capacity(n);
    for i in 0..n {
        let offset = if stratified { rng.gen_range(0.0..1.0) } else { 0.5 };
        ts.push(t_near + (i as f64 + offset) * w);
    }
    for i in 0..n {
        let t = ts[i];
        out.positions.push([
            (ray.origin[0] + t * ray.dir[0]).clamp(0.0, 1.0),
            (ray.origin[1] + t * ray.dir[1]).clamp(0.0, 1.0),
            (ray.origin[2] + t * ray.dir[2]).clamp(0.0, 1.0),
        ]);
        out.deltas.push(if i + 1 < n { ts[i + 1] - ts[i] } else { w });
    }
    out.sigmas.resize(n, 0.0);
    out.colors.resize(n, [0.0; 3]);
}

/// Composited ray color and per-sample weights w_i = T_i alpha_i.
#[derive(Debug, Clone, Default)]
pub struct CompositeOut {
    pub color: Vec3,
    pub weights: Vec<f64>,
}

/// Front-to-back emission-absorption over a black background:
/// alpha_i = 1 − exp(−sigma_i delta_i), T_i the exclusive survival product.
pub fn composite(samples: &RaySamples, out: &mut CompositeOut) {
    out.color = [0.0; 3];
    out.weights.clear();
    let mut transmittance = 1.0;
    for i in 0..samples.len() {
        let alpha = 1.0 - (-samples.sigmas[i] * samples.deltas[i]).exp();
        let w = transmittance * alpha;
        out.weights.push(w);
        for ch in 0..3 {
            out.color[ch] += w * samples.colors[i][ch];
        }
        transmittance *= 1.0 - alpha;
    }
}

/// Exact adjoint of [`composite`]. The color gradient is w_i · grad
/// directly; the density gradient uses the suffix recurrence
/// B_i = alpha_i c_i + (1 − alpha_i) B_{i+1}, for which
/// dC/dalpha_i = T_i (c_i − B_{i+1}), avoiding division by transmittance.
pub fn composite_backward(
    samples: &RaySamples,
    grad_color: &Vec3,
    grad_sigma: &mut Vec<f64>,
    grad_sample_color: &mut Vec<Vec3>,
) {
    let n = samples.len();
    grad_sigma.clear();
    grad_sigma.resize(n, 0.0);
    grad_sample_color.clear();
    grad_sample_color.resize(n, [0.0; 3]);

    let mut alphas = vec![0.0; n];
    let mut trans = vec![0.0; n];
    let mut t = 1.0;
    for i in 0..n {
        alphas[i] = 1.0 - (-samples.sigmas[i] * samples.deltas[i]).exp();
        trans[i] = t;
        t *= 1.0 - alphas[i];
    }

    let mut suffix = [0.0f64; 3];
    for i in (0..n).rev() {
        let w = trans[i] * alphas[i];
        let mut d_alpha = 0.0;
        for ch in 0..3 {
            grad_sample_color[i][ch] = w * grad_color[ch];
            d_alpha += grad_color[ch] * trans[i] * (samples.colors[i][ch] - suffix[ch]);
        }
        // dalpha/dsigma = delta exp(−sigma delta) = delta (1 − alpha).
        grad_sigma[i] = d_alpha * samples.deltas[i] * (1.0 - alphas[i]);
        for ch in 0..3 {
            suffix[ch] = alphas[i] * samples.colors[i][ch] + (1.0 - alphas[i]) * suffix[ch];
        }
    }
}

/// Closed-form test scene: a constant-density sphere in the unit cube whose
/// color field is the clamped position itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticScene {
    pub center: Vec3,
    pub radius: f64,
    pub sigma0: f64,
}

impl AnalyticScene {
    pub fn new(center: Vec3, radius: f64, sigma0: f64) -> Result<Self> {
        if !(radius > 0.0 && sigma0 > 0.0) {
            return Err(Error::InputDomain(format!(
                "radius {radius} and sigma0 {sigma0} must be positive"
            )));
        }
        for &c in &center {
            if c - radius < 0.0 || c + radius > 1.0 {
                return Err(Error::InputDomain("sphere leaves the unit cube".into()));
            }
        }
        Ok(AnalyticScene { center, radius, sigma0 })
    }

    /// The canonical scene used across tests and examples.
    pub fn default_sphere() -> Self {
        AnalyticScene { center: [0.5, 0.5, 0.5], radius: 0.3, sigma0: 60.0 }
    }

    /// Density and color at a point of the unit cube.
    pub fn eval(&self, x: &Vec3) -> (f64, Vec3) {
        let d = sub(x, &self.center);
        let sigma = if dot(&d, &d) < self.radius * self.radius { self.sigma0 } else { 0.0 };
        (sigma, [x[0].clamp(0.0, 1.0), x[1].clamp(0.0, 1.0), x[2].clamp(0.0, 1.0)])
    }
}

/// Densely marches the analytic scene for every pixel, deterministic
/// midpoint sampling. Returns row-major rgb values in [0,1].
pub fn render_reference(scene: &AnalyticScene, camera: &Camera, n_dense: usize) -> Vec<Vec3> {
    assert!(n_dense >= 1, "sample count");
    let mut image = Vec::with_capacity((camera.width * camera.height) as usize);
    let mut samples = RaySamples::default();
    let mut out = CompositeOut::default();
    // The rng is unused in midpoint mode; any fixed source satisfies the API.
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    for py in 0..camera.height {
        for px in 0..camera.width {
            let ray = camera.pixel_ray(px as f64 + 0.5, py as f64 + 0.5);
            match unit_cube_span(&ray) {
                None => image.push([0.0; 3]),
                Some((t0, t1)) => {
                    sample_along(&ray, t0, t1, n_dense, false, &mut rng, &mut samples);
                    for i in 0..samples.len() {
                        let (sigma, color) = scene.eval(&samples.positions[i]);
                        samples.sigmas[i] = sigma;
                        samples.colors[i] = color;
                    }
                    composite(&samples, &mut out);
                    image.push(out.color);
                }
            }
        }
    }
    image
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn transmittance_and_weights_invariants(
            sigmas in proptest::collection::vec(0.0f64..20.0, 1..12),
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = sigmas.len();
            let samples = RaySamples {
                positions: vec![[0.5; 3]; n],
                deltas: (0..n).map(|_| rng.gen_range(0.01..1.0)).collect(),
                sigmas,
                colors: vec![[0.3, 0.5, 0.7]; n],
            };
            let mut out = CompositeOut::default();
            composite(&samples, &mut out);

            let mut t = 1.0;
            for i in 0..n {
                let alpha = 1.0 - (-samples.sigmas[i] * samples.deltas[i]).exp();
                prop_assert!((0.0..1.0).contains(&alpha));
                // T is non-increasing and w_i = T_i alpha_i.
                let next = t * (1.0 - alpha);
                prop_assert!(next <= t + 1e-15);
                prop_assert!((out.weights[i] - t * alpha).abs() < 1e-12);
                t = next;
            }
            let wsum: f64 = out.weights.iter().sum();
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&wsum));
        }
    }
}
