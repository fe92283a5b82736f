//! Multi-resolution hash-grid feature storage.
//!
//! A [`FeatureTable`] holds one trainable table per resolution level. Coarse
//! levels whose full voxel-corner grid fits in the table are addressed
//! densely (row-major); finer levels fall back to the prime-XOR spatial hash.
//! [`FeatureTable::encode`] gathers the `2^d` cell corners per level and
//! d-linearly interpolates them; [`encode_backward`] is its exact adjoint,
//! scattering output gradients back onto the touched table rows.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Multipliers of the XOR spatial hash. The first coordinate is multiplied
/// by 1 so purely axial corners map to their own coordinate value.
pub const HASH_PRIMES: [u64; 3] = [1, 2_654_435_761, 805_459_861];

/// Feature values are initialized i.i.d. uniform in `[-INIT_RANGE, INIT_RANGE]`.
pub const INIT_RANGE: f64 = 1e-4;

/// Shape of a multi-resolution feature grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Number of resolution levels L.
    pub levels: usize,
    /// log2 of the per-level table size T.
    pub log2_table_size: u8,
    /// Features stored per table entry F.
    pub features_per_entry: usize,
    /// Coarsest resolution in cells per axis.
    pub n_min: u32,
    /// Finest resolution in cells per axis.
    pub n_max: u32,
    /// Spatial dimension, 2 or 3.
    pub dims: usize,
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.levels == 0 {
            return fail("levels must be >= 1".into());
        }
        if self.features_per_entry == 0 {
            return fail("features_per_entry must be >= 1".into());
        }
        if self.n_min == 0 {
            return fail("n_min must be >= 1".into());
        }
        if self.n_max < self.n_min {
            return fail(format!("n_max {} < n_min {}", self.n_max, self.n_min));
        }
        if self.n_max > 1 << 20 {
            return fail(format!("n_max {} exceeds 2^20", self.n_max));
        }
        if !(2..=3).contains(&self.dims) {
            return fail(format!("dims must be 2 or 3, got {}", self.dims));
        }
        if self.log2_table_size > 30 {
            return fail(format!("log2_table_size {} exceeds 30", self.log2_table_size));
        }
        let g = self.growth_factor();
        if !g.is_finite() || g < 1.0 {
            return fail(format!("growth factor {g} must be finite and >= 1"));
        }
        Ok(())
    }

    /// Table size T.
    pub fn table_size(&self) -> usize {
        1usize << self.log2_table_size
    }

    /// Per-level geometric growth factor g; 1 when there is a single level.
    pub fn growth_factor(&self) -> f64 {
        if self.levels <= 1 {
            return 1.0;
        }
        let span = (self.n_max as f64).ln() - (self.n_min as f64).ln();
        (span / (self.levels - 1) as f64).exp()
    }

    /// Resolutions `N_l = floor(n_min * g^l)`, computed in ratio-power form so
    /// the endpoints land exactly on `n_min` and `n_max`.
    pub fn level_resolutions(&self) -> Vec<u32> {
        let denom = self.levels.saturating_sub(1).max(1) as f64;
        let ratio = self.n_max as f64 / self.n_min as f64;
        (0..self.levels)
            .map(|l| {
                let r = self.n_min as f64 * ratio.powf(l as f64 / denom);
                (r.floor() as u32).max(1)
            })
            .collect()
    }

    /// Corners of one interpolation cell, `2^d`.
    pub fn cell_corners(&self) -> usize {
        1usize << self.dims
    }

    /// Length of one encoded feature vector, `L * F`.
    pub fn encoded_len(&self) -> usize {
        self.levels * self.features_per_entry
    }

    /// Entry count of a level at resolution `n`: `min(T, (n+1)^d)`.
    pub fn level_entry_count(&self, resolution: u32) -> usize {
        let side = resolution as u64 + 1;
        let full = side.saturating_pow(self.dims as u32);
        full.min(self.table_size() as u64) as usize
    }
}

/// Maps a voxel-corner coordinate to its table row for a level.
///
/// Levels whose full corner grid fits in the table use the dense row-major
/// index (first coordinate fastest); all others hash with [`HASH_PRIMES`]
/// and reduce modulo T.
pub fn spatial_hash(corner: &[u32], resolution: u32, config: &GridConfig) -> Result<usize> {
    assert_eq!(corner.len(), config.dims, "corner coordinate count");
    for &c in corner {
        if c > resolution {
            return Err(Error::InputDomain(format!(
                "corner coordinate {c} outside [0, {resolution}]"
            )));
        }
    }
    let side = resolution as u64 + 1;
    let dense = side.saturating_pow(config.dims as u32) <= config.table_size() as u64;
    Ok(corner_index(corner, side, dense, config.table_size() as u64))
}

#[inline]
fn corner_index(corner: &[u32], side: u64, dense: bool, table_size: u64) -> usize {
    if dense {
        let mut idx = 0u64;
        for &c in corner.iter().rev() {
            idx = idx * side + c as u64;
        }
        idx as usize
    } else {
        let mut h = 0u64;
        for (a, &c) in corner.iter().enumerate() {
            h ^= c as u64 * HASH_PRIMES[a];
        }
        (h % table_size) as usize
    }
}

/// Per-level record of one encode: touched table rows, interpolation weights
/// and the interpolated output, reusable across calls to avoid allocation.
#[derive(Debug, Clone, Default)]
pub struct EncodeTrace {
    corners_per_cell: usize,
    /// Flat index of the first feature of each touched table row,
    /// `levels * 2^d` entries in level-major order.
    pub corner_base: Vec<usize>,
    /// Interpolation weight per touched corner, aligned with `corner_base`.
    pub weights: Vec<f64>,
    /// Interpolated features, `L * F` values in level order.
    pub output: Vec<f64>,
}

impl EncodeTrace {
    pub fn corners_per_cell(&self) -> usize {
        self.corners_per_cell
    }

    /// Weights of one level's cell corners.
    pub fn level_weights(&self, level: usize) -> &[f64] {
        let c = self.corners_per_cell;
        &self.weights[level * c..(level + 1) * c]
    }

    fn reset(&mut self, levels: usize, corners: usize, features: usize) {
        self.corners_per_cell = corners;
        self.corner_base.clear();
        self.weights.clear();
        self.corner_base.reserve(levels * corners);
        self.weights.reserve(levels * corners);
        self.output.clear();
        self.output.resize(levels * features, 0.0);
    }
}

/// The trainable multi-resolution feature grids.
///
/// Values are stored flat in level-major, entry-major, feature-major order;
/// gradients and optimizer state use the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    config: GridConfig,
    resolutions: Vec<u32>,
    level_entries: Vec<usize>,
    /// Offset of each level's first value in `values` (units of f64).
    level_offsets: Vec<usize>,
    values: Vec<f64>,
}

impl FeatureTable {
    /// An all-zero table of the configured shape.
    pub fn zeros(config: GridConfig) -> Result<Self> {
        config.validate()?;
        let resolutions = config.level_resolutions();
        let level_entries: Vec<usize> = resolutions
            .iter()
            .map(|&n| config.level_entry_count(n))
            .collect();
        let mut level_offsets = Vec::with_capacity(config.levels);
        let mut total = 0usize;
        for &e in &level_entries {
            level_offsets.push(total);
            total += e * config.features_per_entry;
        }
        Ok(FeatureTable {
            config,
            resolutions,
            level_entries,
            level_offsets,
            values: vec![0.0; total],
        })
    }

    /// A table seeded i.i.d. uniform on `[-1e-4, 1e-4]`; deterministic per seed.
    pub fn init(config: GridConfig, seed: u64) -> Result<Self> {
        let mut table = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut table.values {
            *v = rng.gen_range(-INIT_RANGE..=INIT_RANGE);
        }
        Ok(table)
    }

    /// Rebuilds a table from raw values in storage order.
    pub fn from_values(config: GridConfig, values: Vec<f64>) -> Result<Self> {
        let mut table = Self::zeros(config)?;
        if values.len() != table.values.len() {
            return Err(Error::Mismatch(format!(
                "value count {} does not match table size {}",
                values.len(),
                table.values.len()
            )));
        }
        table.values = values;
        Ok(table)
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn resolutions(&self) -> &[u32] {
        &self.resolutions
    }

    pub fn level_entries(&self) -> &[usize] {
        &self.level_entries
    }

    pub fn level_offsets(&self) -> &[usize] {
        &self.level_offsets
    }

    /// Number of stored feature values, `sum_l entries_l * F`.
    pub fn total_features(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_level_dense(&self, level: usize) -> bool {
        let side = self.resolutions[level] as u64 + 1;
        side.saturating_pow(self.config.dims as u32) <= self.config.table_size() as u64
    }

    /// Encodes a position in `[0,1]^d`, filling `trace` (including its
    /// interpolated `output`).
    pub fn encode(&self, x: &[f64], trace: &mut EncodeTrace) -> Result<()> {
        let d = self.config.dims;
        assert_eq!(x.len(), d, "position dim");
        for &c in x {
            if !c.is_finite() {
                return Err(Error::InputDomain(format!("non-finite position {c}")));
            }
        }
        let features = self.config.features_per_entry;
        let corners = self.config.cell_corners();
        trace.reset(self.config.levels, corners, features);

        for level in 0..self.config.levels {
            let n = self.resolutions[level] as f64;
            let side = self.resolutions[level] as u64 + 1;
            let dense = self.is_level_dense(level);
            let table_size = self.level_entries[level] as u64;
            let offset = self.level_offsets[level];

            // Cell containing x*n; x = 1 falls in the last cell with local
            // coordinate 1 so grid-boundary positions stay in range.
            let mut cell = [0u32; 3];
            let mut local = [0f64; 3];
            for a in 0..d {
                let p = x[a] * n;
                let c = p.floor().clamp(0.0, n - 1.0);
                cell[a] = c as u32;
                local[a] = p - c;
            }

            let out_base = level * features;
            for corner in 0..corners {
                let mut coords = [0u32; 3];
                let mut w = 1.0;
                for a in 0..d {
                    if corner >> a & 1 == 1 {
                        coords[a] = cell[a] + 1;
                        w *= local[a];
                    } else {
                        coords[a] = cell[a];
                        w *= 1.0 - local[a];
                    }
                }
                let idx = corner_index(&coords[..d], side, dense, table_size);
                let base = offset + idx * features;
                trace.corner_base.push(base);
                trace.weights.push(w);
                for f in 0..features {
                    trace.output[out_base + f] += w * self.values[base + f];
                }
            }
        }
        Ok(())
    }

    /// Convenience wrapper returning a fresh output vector and trace.
    pub fn encode_owned(&self, x: &[f64]) -> Result<(Vec<f64>, EncodeTrace)> {
        let mut trace = EncodeTrace::default();
        self.encode(x, &mut trace)?;
        Ok((trace.output.clone(), trace))
    }
}

/// Exact adjoint of [`FeatureTable::encode`]: accumulates
/// `weight_c * grad_y[l,f]` into the traced corner rows of `grad_table`.
///
/// `grad_table` must use the table's flat value layout. Panics if `grad_y`
/// does not match the traced output length.
pub fn encode_backward(trace: &EncodeTrace, grad_y: &[f64], grad_table: &mut [f64]) {
    assert_eq!(grad_y.len(), trace.output.len(), "gradient length");
    let corners = trace.corners_per_cell;
    let features = if trace.corner_base.is_empty() {
        0
    } else {
        trace.output.len() * corners / trace.corner_base.len()
    };
    let levels = trace.corner_base.len() / corners.max(1);
    for level in 0..levels {
        let out_base = level * features;
        for corner in 0..corners {
            let slot = level * corners + corner;
            let base = trace.corner_base[slot];
            let w = trace.weights[slot];
            for f in 0..features {
                grad_table[base + f] += w * grad_y[out_base + f];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(levels: usize, log2_t: u8, features: usize, n_min: u32, n_max: u32, dims: usize) -> GridConfig {
        GridConfig {
            levels,
            log2_table_size: log2_t,
            features_per_entry: features,
            n_min,
            n_max,
            dims,
        }
    }

    #[test]
    fn level_resolutions_reference_config() {
        let c = cfg(16, 19, 2, 16, 2048, 3);
        let res = c.level_resolutions();
        assert_eq!(res[0], 16);
        assert_eq!(res[15], 2048);
        assert!((c.growth_factor() - 1.38191).abs() < 1e-5);
        for w in res.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn level_resolutions_degenerate() {
        assert_eq!(cfg(1, 10, 1, 16, 16, 2).level_resolutions(), vec![16]);
        assert_eq!(cfg(2, 10, 1, 16, 32, 2).level_resolutions(), vec![16, 32]);
    }

    #[test]
    fn hash_zero_and_axial_corners() {
        let c = cfg(1, 19, 2, 600, 600, 3);
        // 601^3 > 2^19 so this level hashes.
        assert_eq!(spatial_hash(&[0, 0, 0], 600, &c).unwrap(), 0);
        assert_eq!(spatial_hash(&[3, 0, 0], 600, &c).unwrap(), 3);
    }

    #[test]
    fn hash_matches_scalar_expression() {
        let c = cfg(1, 3, 1, 100, 100, 2);
        // (1*1 XOR 1*2654435761) mod 8, evaluated independently.
        let (x, y) = (1u64, 1u64);
        let expected = ((x * HASH_PRIMES[0]) ^ (y * HASH_PRIMES[1])) % 8;
        assert_eq!(expected, 0);
        assert_eq!(spatial_hash(&[1, 1], 100, &c).unwrap(), expected as usize);
    }

    #[test]
    fn hash_rejects_out_of_range_corner() {
        let c = cfg(1, 10, 1, 4, 4, 2);
        assert!(spatial_hash(&[5, 0], 4, &c).is_err());
        assert!(spatial_hash(&[4, 4], 4, &c).is_ok());
    }

    #[test]
    fn indices_in_range_exhaustive() {
        // One dense level (5^2 = 25 <= 64) and one hashed (9^2 = 81 > 16).
        for (log2_t, n) in [(6u8, 4u32), (4, 8)] {
            let c = cfg(1, log2_t, 1, n, n, 2);
            let entries = c.level_entry_count(n);
            let mut seen = vec![false; entries];
            for x in 0..=n {
                for y in 0..=n {
                    let idx = spatial_hash(&[x, y], n, &c).unwrap();
                    assert!(idx < entries, "index {idx} out of range {entries}");
                    seen[idx] = true;
                }
            }
            if (n as usize + 1).pow(2) <= c.table_size() {
                // Dense addressing is a bijection onto [0, entries).
                assert!(seen.iter().all(|&s| s));
            }
        }
    }

    #[test]
    fn encode_at_corner_returns_stored_features() {
        let c = cfg(2, 10, 2, 4, 8, 2);
        let mut table = FeatureTable::init(c, 3).unwrap();
        // Overwrite the corner (1,2) of level 0 (resolution 4, dense).
        let idx = spatial_hash(&[1, 2], 4, &c).unwrap();
        let base = table.level_offsets()[0] + idx * 2;
        table.values_mut()[base] = 0.25;
        table.values_mut()[base + 1] = -0.5;
        let (y, _) = table.encode_owned(&[0.25, 0.5]).unwrap();
        assert!((y[0] - 0.25).abs() < 1e-15);
        assert!((y[1] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn encode_at_cell_center_averages_corners() {
        let c = cfg(1, 10, 1, 2, 2, 2);
        let mut table = FeatureTable::zeros(c).unwrap();
        // Cell [0,1)x[0,1) of a 2x2 grid; its corners are (0,0),(1,0),(0,1),(1,1).
        let vals = [0.1, 0.2, 0.3, 0.4];
        for (corner, v) in [[0u32, 0], [1, 0], [0, 1], [1, 1]].iter().zip(vals) {
            let idx = spatial_hash(corner, 2, &c).unwrap();
            table.values_mut()[idx] = v;
        }
        let (y, trace) = table.encode_owned(&[0.25, 0.25]).unwrap();
        let mean = vals.iter().sum::<f64>() / 4.0;
        assert!((y[0] - mean).abs() < 1e-15);
        for &w in trace.level_weights(0) {
            assert!((w - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn encode_zero_table_is_zero() {
        let c = cfg(3, 8, 2, 2, 8, 3);
        let table = FeatureTable::zeros(c).unwrap();
        let (y, _) = table.encode_owned(&[0.3, 0.7, 0.9]).unwrap();
        assert_eq!(y.len(), c.encoded_len());
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_rejects_non_finite() {
        let table = FeatureTable::zeros(cfg(1, 8, 1, 2, 2, 2)).unwrap();
        assert!(table.encode_owned(&[f64::NAN, 0.5]).is_err());
        assert!(table.encode_owned(&[0.5, f64::INFINITY]).is_err());
    }

    #[test]
    fn backward_zero_gradient_is_noop() {
        let c = cfg(2, 8, 2, 2, 4, 2);
        let table = FeatureTable::init(c, 9).unwrap();
        let (_, trace) = table.encode_owned(&[0.4, 0.6]).unwrap();
        let mut grad = vec![0.0; table.total_features()];
        encode_backward(&trace, &vec![0.0; c.encoded_len()], &mut grad);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_concentrates_at_corner() {
        let c = cfg(2, 10, 1, 4, 8, 2);
        let table = FeatureTable::zeros(c).unwrap();
        // x exactly on a shared grid corner of both levels.
        let (_, trace) = table.encode_owned(&[0.5, 0.5]).unwrap();
        let mut grad = vec![0.0; table.total_features()];
        encode_backward(&trace, &vec![1.0; c.encoded_len()], &mut grad);
        for level in 0..2 {
            let lo = table.level_offsets()[level];
            let hi = lo + table.level_entries()[level];
            let touched: Vec<f64> = grad[lo..hi].iter().copied().filter(|&g| g != 0.0).collect();
            assert_eq!(touched, vec![1.0], "level {level}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let c = cfg(3, 6, 2, 2, 8, 3);
        let mut table = FeatureTable::init(c, 17).unwrap();
        let x = [0.37, 0.61, 0.83];
        let (y0, trace) = table.encode_owned(&x).unwrap();

        // Scalar objective <v, y> with random direction v.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v: Vec<f64> = (0..y0.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut grad = vec![0.0; table.total_features()];
        encode_backward(&trace, &v, &mut grad);

        let h = 1e-6;
        for k in (0..table.total_features()).step_by(7) {
            let orig = table.values()[k];
            table.values_mut()[k] = orig + h;
            let (yp, _) = table.encode_owned(&x).unwrap();
            table.values_mut()[k] = orig - h;
            let (ym, _) = table.encode_owned(&x).unwrap();
            table.values_mut()[k] = orig;
            let fd: f64 = yp
                .iter()
                .zip(&ym)
                .zip(&v)
                .map(|((p, m), vi)| vi * (p - m) / (2.0 * h))
                .sum();
            let scale = fd.abs().max(grad[k].abs()).max(1e-9);
            assert!(
                (fd - grad[k]).abs() / scale < 1e-6,
                "entry {k}: fd {fd} vs analytic {}",
                grad[k]
            );
        }
    }

    #[test]
    fn adjoint_dot_product_identity() {
        let c = cfg(2, 6, 2, 2, 6, 2);
        let table = FeatureTable::init(c, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let x = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            let (y, trace) = table.encode_owned(&x).unwrap();
            let g: Vec<f64> = (0..y.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let dt: Vec<f64> = (0..table.total_features())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();

            // <g, encode(theta + dt)(x) - encode(theta)(x)> == <scatter(g), dt>
            let mut shifted = table.clone();
            for (v, d) in shifted.values_mut().iter_mut().zip(&dt) {
                *v += d;
            }
            let (y2, _) = shifted.encode_owned(&x).unwrap();
            let lhs: f64 = g.iter().zip(y2.iter().zip(&y)).map(|(gi, (a, b))| gi * (a - b)).sum();

            let mut scat = vec![0.0; table.total_features()];
            encode_backward(&trace, &g, &mut scat);
            let rhs: f64 = scat.iter().zip(&dt).map(|(s, d)| s * d).sum();
            let scale = lhs.abs().max(rhs.abs()).max(1e-12);
            assert!((lhs - rhs).abs() / scale < 1e-10, "trial {trial}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let c = cfg(4, 12, 2, 4, 32, 2);
        let a = FeatureTable::init(c, 42).unwrap();
        let b = FeatureTable::init(c, 42).unwrap();
        assert_eq!(a.values(), b.values());
        let other = FeatureTable::init(c, 43).unwrap();
        assert_ne!(a.values(), other.values());
        assert!(a.values().iter().all(|v| v.abs() <= INIT_RANGE));
    }

    #[test]
    fn init_mean_matches_uniform_moments() {
        // All levels hash at full table size: 8 * 2^17 values >= 1e6,
        // so |mean| < 3 * sigma / sqrt(n) = 1.7e-7.
        let c = cfg(8, 17, 1, 400, 2048, 2);
        let table = FeatureTable::init(c, 7).unwrap();
        let n = table.total_features();
        assert!(n >= 1_000_000, "want >= 1e6 entries, got {n}");
        let mean = table.values().iter().sum::<f64>() / n as f64;
        let bound = 3.0 * (2.0 * INIT_RANGE / 12f64.sqrt()) / (n as f64).sqrt();
        assert!(mean.abs() < bound, "mean {mean} exceeds {bound}");
    }

    #[test]
    fn total_feature_count_matches_level_sum() {
        let c = cfg(5, 8, 3, 2, 64, 2);
        let table = FeatureTable::zeros(c).unwrap();
        let expect: usize = table
            .level_entries()
            .iter()
            .map(|e| e * c.features_per_entry)
            .sum();
        assert_eq!(table.total_features(), expect);
        // Hashed levels cap at T.
        assert!(table.level_entries().iter().all(|&e| e <= c.table_size()));
    }
}
