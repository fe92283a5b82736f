//! Fits the built-in synthetic photo with a multi-resolution feature grid
//! and writes the target and the reconstruction side by side.
//!
//!     cargo run --release --example fit_image

use std::path::Path;

use cawa::error::Result;
use cawa::grid::GridConfig;
use cawa::objective::LambdaSchedule;
use cawa::ppm::{save_ppm, Image};
use cawa::trainer::{TaskData, TaskKind, TrainConfig, Trainer};

fn main() -> Result<()> {
    let config = TrainConfig {
        task: TaskKind::Image,
        grid: GridConfig {
            levels: 8,
            log2_table_size: 12,
            features_per_entry: 2,
            n_min: 8,
            n_max: 32,
            dims: 2,
        },
        schedule: LambdaSchedule::Fixed { lambda: 0.0 },
        iterations: 1200,
        batch: 96,
        seed: 1,
        ..TrainConfig::default()
    };

    let data = TaskData::synthetic_image(64, 64);
    let mut trainer = Trainer::new(config, data)?;
    println!("step     l_rgb      psnr");
    let outcome = trainer.run()?;
    for m in outcome.metrics.iter().step_by(3) {
        println!("{:>4}  {:.3e}  {:>6.2} dB", m.step, m.l_rgb, m.psnr);
    }
    println!("holdout psnr {:.3} dB after {:.1}s", outcome.final_psnr, outcome.train_seconds);

    let out = Path::new("example-output/fit_image");
    std::fs::create_dir_all(out).map_err(|e| cawa::error::Error::io(out, e))?;
    if let TaskData::Image(target) = trainer.data() {
        save_ppm(&out.join("target.ppm"), target)?;
        let pred = trainer.model().render_image(target.width, target.height);
        save_ppm(&out.join("prediction.ppm"), &Image::new(target.width, target.height, pred)?)?;
    }
    println!("wrote {}", out.display());
    Ok(())
}
