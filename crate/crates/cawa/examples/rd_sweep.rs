//! Sweeps the rate weight over the image task and tabulates the resulting
//! rate-distortion front: compressed size falls as lambda grows, quality
//! degrades gracefully.
//!
//!     cargo run --release --example rd_sweep

use std::io::Write;
use std::path::Path;

use cawa::codec::{export_container, import_container};
use cawa::error::{Error, Result};
use cawa::grid::GridConfig;
use cawa::objective::LambdaSchedule;
use cawa::trainer::{TaskData, TaskKind, TrainConfig, Trainer};

fn main() -> Result<()> {
    let base = TrainConfig {
        task: TaskKind::Image,
        grid: GridConfig {
            levels: 8,
            log2_table_size: 12,
            features_per_entry: 2,
            n_min: 8,
            n_max: 32,
            dims: 2,
        },
        dist: cawa::entropy::DistKind::Cauchy,
        iterations: 800,
        batch: 96,
        lr_dist: 1e-4,
        b_init: 0.08,
        seed: 1,
        ..TrainConfig::default()
    };

    let out = Path::new("example-output/rd_sweep");
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut csv = String::from("lambda,psnr_db,compressed_bytes\n");

    println!("{:>8}  {:>9}  {:>7}  size", "lambda", "psnr", "bytes");
    for lambda in [0.0, 3e-4, 1e-3, 5e-3] {
        let mut config = base.clone();
        config.schedule = LambdaSchedule::Fixed { lambda };
        let quant = config.quant();
        let mut trainer = Trainer::new(config, TaskData::synthetic_image(64, 64))?;
        trainer.run()?;

        // Quality is judged on what a reader of the container would see.
        let mut container = Vec::new();
        export_container(&mut container, &trainer.model().table, &trainer.model().dist, &quant)?;
        let (imported, _) = import_container(&mut &container[..])?;
        let psnr = trainer.eval_psnr_with_table(Some(&imported));

        let bar = "#".repeat(container.len() / 150);
        println!("{lambda:>8}  {psnr:>6.2} dB  {:>7}  {bar}", container.len());
        csv.push_str(&format!("{lambda},{psnr},{}\n", container.len()));
    }

    let csv_path = out.join("rd.csv");
    let mut f = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    f.write_all(csv.as_bytes()).map_err(|e| Error::io(&csv_path, e))?;
    println!("wrote {}", csv_path.display());
    Ok(())
}
