//! Trains a small radiance field on orbit views of the analytic sphere and
//! renders the held-out view next to its ray-marched ground truth.
//!
//!     cargo run --release --example fit_volume

use std::path::Path;

use cawa::error::{Error, Result};
use cawa::grid::GridConfig;
use cawa::ppm::{save_ppm, Image};
use cawa::render::AnalyticScene;
use cawa::trainer::{TaskData, TaskKind, TrainConfig, Trainer};

fn main() -> Result<()> {
    let size = 48;
    let config = TrainConfig {
        task: TaskKind::Volume,
        grid: GridConfig {
            levels: 6,
            log2_table_size: 11,
            features_per_entry: 2,
            n_min: 16,
            n_max: 64,
            dims: 3,
        },
        density_hidden: 16,
        density_hidden_layers: 1,
        geometry_features: 8,
        color_hidden: 16,
        color_hidden_layers: 1,
        iterations: 1000,
        batch: 128,
        samples_per_ray: 24,
        seed: 1,
        ..TrainConfig::default()
    };

    let data = TaskData::synthetic_volume(AnalyticScene::default_sphere(), 6, size)?;
    let mut trainer = Trainer::new(config.clone(), data)?;
    let outcome = trainer.run()?;
    for m in outcome.metrics.iter().step_by(3) {
        println!("step {:>4}: l_rgb {:.3e}", m.step, m.l_rgb);
    }
    println!("held-out view psnr {:.3} dB after {:.1}s", outcome.final_psnr, outcome.train_seconds);

    let out = Path::new("example-output/fit_volume");
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    if let TaskData::Volume { holdout, .. } = trainer.data() {
        let truth = Image::new(size, size, holdout.targets.clone())?;
        let pred = trainer.model().render_view(&holdout.camera, config.samples_per_ray);
        save_ppm(&out.join("holdout_truth.ppm"), &truth)?;
        save_ppm(&out.join("holdout_prediction.ppm"), &Image::new(size, size, pred)?)?;
    }
    println!("wrote {}", out.display());
    Ok(())
}
