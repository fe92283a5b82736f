//! Ray-marches the analytic test scene from a ring of cameras and writes one
//! frame per view. No training involved: this is the ground truth the
//! volumetric trainer consumes.
//!
//!     cargo run --release --example render_sphere

use std::path::Path;

use cawa::error::{Error, Result};
use cawa::ppm::{save_ppm, Image};
use cawa::render::{render_reference, AnalyticScene};
use cawa::trainer::orbit_camera;

fn main() -> Result<()> {
    let scene = AnalyticScene::default_sphere();
    let size = 96;
    let fov = 40f64.to_radians();
    let out = Path::new("example-output/render_sphere");
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    for (i, azimuth_deg) in [0.0f64, 45.0, 90.0, 135.0].into_iter().enumerate() {
        let camera = orbit_camera(1.3, azimuth_deg.to_radians(), 0.35, fov, size, size)?;
        let pixels = render_reference(&scene, &camera, 512);
        let mean: f64 =
            pixels.iter().map(|p| (p[0] + p[1] + p[2]) / 3.0).sum::<f64>() / pixels.len() as f64;
        let path = out.join(format!("view_{i}.ppm"));
        save_ppm(&path, &Image::new(size, size, pixels)?)?;
        println!("azimuth {azimuth_deg:>5.1} deg: mean radiance {mean:.4}, wrote {}", path.display());
    }
    Ok(())
}
