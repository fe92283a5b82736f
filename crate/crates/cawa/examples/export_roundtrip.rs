//! Exports a trained grid to the compressed container format, reads it back,
//! and shows that the decoded table is bit-for-bit the quantized original.
//!
//!     cargo run --release --example export_roundtrip

use std::path::Path;

use cawa::codec::{export_container, import_container, quantized_table};
use cawa::error::{Error, Result};
use cawa::grid::GridConfig;
use cawa::objective::LambdaSchedule;
use cawa::trainer::{TaskData, TaskKind, TrainConfig, Trainer};

fn main() -> Result<()> {
    let config = TrainConfig {
        task: TaskKind::Image,
        grid: GridConfig {
            levels: 6,
            log2_table_size: 10,
            features_per_entry: 2,
            n_min: 8,
            n_max: 32,
            dims: 2,
        },
        schedule: LambdaSchedule::Fixed { lambda: 1e-3 },
        iterations: 600,
        batch: 96,
        seed: 1,
        ..TrainConfig::default()
    };
    let quant = config.quant();
    let mut trainer = Trainer::new(config, TaskData::synthetic_image(64, 64))?;
    trainer.run()?;

    let out = Path::new("example-output/export_roundtrip");
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("table.cawf");
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut writer = std::io::BufWriter::new(file);
    let written = export_container(&mut writer, &trainer.model().table, &trainer.model().dist, &quant)?;
    drop(writer);

    let mut reader = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let (imported, meta) = import_container(&mut reader)?;
    let expected = quantized_table(&trainer.model().table, &quant)?;
    let exact = imported
        .values()
        .iter()
        .zip(expected.values())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    assert!(exact, "imported table must equal the quantized table bit-exactly");

    let raw_bytes = trainer.model().table.total_features() * 4;
    println!("container {} ({} B, delta {})", path.display(), written, meta.quant.delta as f32);
    println!("raw f32 table would be {raw_bytes} B: {:.1}x smaller", raw_bytes as f64 / written as f64);
    println!("raw model psnr       {:.3} dB", trainer.eval_psnr());
    println!("quantized model psnr {:.3} dB (bit-exact after import)", trainer.eval_psnr_with_table(Some(&imported)));
    Ok(())
}
