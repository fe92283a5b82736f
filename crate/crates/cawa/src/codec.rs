//! Compressed feature container and quantization helpers.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "CAWF" | version u16 | dims u8 | levels u8 | features u8 |
//! log2_table_size u8 | dist kind u8 | quantizer u8 | n_min u32 | n_max u32 |
//! delta f32 | mu f32 | b f32 | per-level entry count u32 x levels |
//! DEFLATE(payload)
//! ```
//!
//! The payload is one i16 quantization index per stored feature in table
//! storage order (level-major, entry-major, feature-major). Dequantization
//! always goes through [`reconstruct`] with the f32 header step size, so an
//! imported table and an in-memory quantized table are bit-identical.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use flate2::write::DeflateEncoder;
use flate2::Compression;

use crate::entropy::{quantize, softplus_inv, DistKind, DistributionParams, QuantSpec, Quantizer};
use crate::error::{Error, Result};
use crate::grid::{FeatureTable, GridConfig};

pub const CONTAINER_MAGIC: &[u8; 4] = b"CAWF";
pub const CONTAINER_VERSION: u16 = 1;

/// Canonical dequantization of a container index. The step size is the f32
/// the header carries; doing the arithmetic from that value everywhere keeps
/// import and in-memory quantization bit-identical.
pub fn reconstruct(k: i64, delta: f32, quantizer: Quantizer) -> f64 {
    let d = delta as f64;
    match quantizer {
        Quantizer::MidRise => d * (k as f64 - 0.5),
        Quantizer::MidTread => d * k as f64,
    }
}

/// Quantization index of every stored feature, in storage order. Indices
/// outside the i16 payload range are an error, reported with their count.
pub fn quantize_indices(table: &FeatureTable, quant: &QuantSpec) -> Result<Vec<i16>> {
    let mut out = Vec::with_capacity(table.total_features());
    let mut overflow = 0usize;
    for &v in table.values() {
        let (k, _) = quantize(v, quant)?;
        if let Ok(k16) = i16::try_from(k) {
            out.push(k16);
        } else {
            overflow += 1;
        }
    }
    if overflow > 0 {
        return Err(Error::InputDomain(format!(
            "{overflow} feature(s) quantize outside the i16 index range at delta {}",
            quant.delta
        )));
    }
    Ok(out)
}

/// The table with every feature snapped to its reconstruction level, exactly
/// as an importer of the exported container would see it.
pub fn quantized_table(table: &FeatureTable, quant: &QuantSpec) -> Result<FeatureTable> {
    let ks = quantize_indices(table, quant)?;
    let delta32 = quant.delta as f32;
    let values = ks.iter().map(|&k| reconstruct(k as i64, delta32, quant.quantizer)).collect();
    FeatureTable::from_values(*table.config(), values)
}

fn kind_code(kind: DistKind) -> u8 {
    match kind {
        DistKind::Laplace => 0,
        DistKind::Cauchy => 1,
    }
}

fn quantizer_code(q: Quantizer) -> u8 {
    match q {
        Quantizer::MidRise => 0,
        Quantizer::MidTread => 1,
    }
}

fn u8_field(value: usize, what: &str) -> Result<u8> {
    u8::try_from(value).map_err(|_| Error::Format(format!("{what} {value} exceeds header range")))
}

/// Writes the container; returns total bytes written.
pub fn export_container(
    w: &mut impl Write,
    table: &FeatureTable,
    dist: &DistributionParams,
    quant: &QuantSpec,
) -> Result<u64> {
    let cfg = table.config();
    let ks = quantize_indices(table, quant)?;

    let mut header = Vec::new();
    header.extend_from_slice(CONTAINER_MAGIC);
    header.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    header.push(u8_field(cfg.dims, "dims")?);
    header.push(u8_field(cfg.levels, "levels")?);
    header.push(u8_field(cfg.features_per_entry, "features_per_entry")?);
    header.push(cfg.log2_table_size);
    header.push(kind_code(dist.kind));
    header.push(quantizer_code(quant.quantizer));
    header.extend_from_slice(&cfg.n_min.to_le_bytes());
    header.extend_from_slice(&cfg.n_max.to_le_bytes());
    header.extend_from_slice(&(quant.delta as f32).to_le_bytes());
    header.extend_from_slice(&(dist.mu as f32).to_le_bytes());
    header.extend_from_slice(&(dist.b() as f32).to_le_bytes());
    for &n in table.level_entries() {
        let n = u32::try_from(n)
            .map_err(|_| Error::Format(format!("entry count {n} exceeds header range")))?;
        header.extend_from_slice(&n.to_le_bytes());
    }

    let mut raw = Vec::with_capacity(ks.len() * 2);
    for k in &ks {
        raw.extend_from_slice(&k.to_le_bytes());
    }
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::default());
    enc.write_all(&raw).map_err(|e| Error::Format(format!("compress payload: {e}")))?;
    let payload = enc.finish().map_err(|e| Error::Format(format!("compress payload: {e}")))?;

    let io_err = |e: std::io::Error| Error::Format(format!("container write: {e}"));
    w.write_all(&header).map_err(io_err)?;
    w.write_all(&payload).map_err(io_err)?;
    Ok((header.len() + payload.len()) as u64)
}

/// Everything an importer recovers besides the table itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContainerMeta {
    pub dist: DistributionParams,
    pub quant: QuantSpec,
}

/// Reads a container back into a dequantized feature table. Every header
/// field is validated against the grid geometry it implies.
pub fn import_container(r: &mut impl Read) -> Result<(FeatureTable, ContainerMeta)> {
    let fmt = |msg: String| Error::Format(msg);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| fmt(format!("container magic: {e}")))?;
    if &magic != CONTAINER_MAGIC {
        return Err(fmt(format!("bad container magic {magic:?}")));
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2).map_err(|e| fmt(format!("container version: {e}")))?;
    let version = u16::from_le_bytes(b2);
    if version != CONTAINER_VERSION {
        return Err(fmt(format!("unsupported container version {version}")));
    }
    let mut b6 = [0u8; 6];
    r.read_exact(&mut b6).map_err(|e| fmt(format!("container header: {e}")))?;
    let [dims, levels, features, log2t, kind_code, quant_code] = b6;
    let kind = match kind_code {
        0 => DistKind::Laplace,
        1 => DistKind::Cauchy,
        other => return Err(fmt(format!("unknown distribution code {other}"))),
    };
    let quantizer = match quant_code {
        0 => Quantizer::MidRise,
        1 => Quantizer::MidTread,
        other => return Err(fmt(format!("unknown quantizer code {other}"))),
    };
    let mut b4 = [0u8; 4];
    let mut read_u32 = |r: &mut dyn Read, what: &str| -> Result<u32> {
        r.read_exact(&mut b4).map_err(|e| fmt(format!("container {what}: {e}")))?;
        Ok(u32::from_le_bytes(b4))
    };
    let n_min = read_u32(r, "n_min")?;
    let n_max = read_u32(r, "n_max")?;
    let delta = f32::from_bits(read_u32(r, "delta")?);
    let mu = f32::from_bits(read_u32(r, "mu")?);
    let b_scale = f32::from_bits(read_u32(r, "b")?);
    let mut level_counts = Vec::with_capacity(levels as usize);
    for _ in 0..levels {
        level_counts.push(read_u32(r, "entry count")? as usize);
    }

    let config = GridConfig {
        levels: levels as usize,
        log2_table_size: log2t,
        features_per_entry: features as usize,
        n_min,
        n_max,
        dims: dims as usize,
    };
    config.validate().map_err(|e| fmt(format!("container grid header: {e}")))?;
    if !(delta.is_finite() && delta > 0.0) {
        return Err(fmt(format!("container delta {delta} must be > 0")));
    }
    if !(b_scale.is_finite() && b_scale > 0.0) {
        return Err(fmt(format!("container scale {b_scale} must be > 0")));
    }
    let expected: Vec<usize> = config
        .level_resolutions()
        .iter()
        .map(|&n| config.level_entry_count(n))
        .collect();
    if level_counts != expected {
        return Err(fmt(format!(
            "entry counts {level_counts:?} disagree with grid geometry {expected:?}"
        )));
    }

    let total = level_counts.iter().sum::<usize>() * config.features_per_entry;
    let mut raw = Vec::with_capacity(total * 2);
    let mut dec = flate2::read::DeflateDecoder::new(r);
    dec.read_to_end(&mut raw).map_err(|e| fmt(format!("container payload: {e}")))?;
    if raw.len() != total * 2 {
        return Err(fmt(format!(
            "payload holds {} indices, grid needs {total}",
            raw.len() / 2
        )));
    }
    let values: Vec<f64> = raw
        .chunks_exact(2)
        .map(|c| reconstruct(i16::from_le_bytes([c[0], c[1]]) as i64, delta, quantizer))
        .collect();
    let table = FeatureTable::from_values(config, values)?;
    let meta = ContainerMeta {
        dist: DistributionParams::from_raw(kind, mu as f64, softplus_inv(b_scale as f64))?,
        quant: QuantSpec::new(delta as f64, quantizer)?,
    };
    Ok((table, meta))
}

/// Counts of each quantization index over the whole table, sorted by index.
pub fn histogram(table: &FeatureTable, quant: &QuantSpec) -> Result<BTreeMap<i64, u64>> {
    let mut hist = BTreeMap::new();
    for &v in table.values() {
        let (k, _) = quantize(v, quant)?;
        *hist.entry(k).or_insert(0u64) += 1;
    }
    Ok(hist)
}

pub fn write_histogram_csv(w: &mut impl Write, hist: &BTreeMap<i64, u64>) -> std::io::Result<()> {
    writeln!(w, "k,count")?;
    for (k, count) in hist {
        writeln!(w, "{k},{count}")?;
    }
    Ok(())
}
