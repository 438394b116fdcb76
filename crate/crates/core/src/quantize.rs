//! Bin tables for the four expressive parameters and the score durations.
//!
//! Beat period and articulation use log-spaced grids. Timing uses a signed
//! log grid: a single bin straddling zero plus mirrored log-spaced magnitude
//! bins on each side. Velocity is split into even bins over 0..=127.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::expressive::ExpressiveParams;

pub const TICKS_PER_BEAT: u32 = 24;
pub const BEAT_PERIOD_BINS: usize = 161;
pub const TIMING_BINS: usize = 41;
pub const ARTICULATION_BINS: usize = 81;
pub const VELOCITY_BINS: usize = 32;
pub const DURATION_TOKENS: usize = 51;

const VELOCITY_WIDTH: u32 = 128 / VELOCITY_BINS as u32;

/// Value ranges of the quantization grids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantizationConfig {
    /// Seconds per beat.
    pub beat_period: (f64, f64),
    pub articulation: (f64, f64),
    /// Magnitude range in beats of the non-zero timing bins.
    pub timing_magnitude: (f64, f64),
}

impl Default for QuantizationConfig {
    fn default() -> Self {
        Self {
            beat_period: (1.0 / 16.0, 16.0),
            articulation: (1.0 / 8.0, 8.0),
            timing_magnitude: (1.0 / 96.0, 2.0),
        }
    }
}

/// The four performance sub-tokens as zero-based bin indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PerfBins {
    pub beat_period: usize,
    pub velocity: usize,
    pub timing: usize,
    pub articulation: usize,
}

impl PerfBins {
    pub fn as_array(&self) -> [usize; 4] {
        [self.beat_period, self.velocity, self.timing, self.articulation]
    }

    pub fn from_array(a: [usize; 4]) -> Self {
        Self {
            beat_period: a[0],
            velocity: a[1],
            timing: a[2],
            articulation: a[3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum Scale {
    Log,
    SignedLog,
}

/// Strictly increasing bin edges; bin `i` is `[edges[i], edges[i + 1])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinEdges {
    edges: Vec<f64>,
    scale: Scale,
}

impl BinEdges {
    fn log(lo: f64, hi: f64, bins: usize) -> Self {
        Self {
            edges: log_space(lo, hi, bins + 1),
            scale: Scale::Log,
        }
    }

    fn signed_log(lo: f64, hi: f64, bins_per_side: usize) -> Self {
        let magnitudes = log_space(lo, hi, bins_per_side + 1);
        let mut edges: Vec<f64> = magnitudes.iter().rev().map(|m| -m).collect();
        edges.extend_from_slice(&magnitudes);
        Self {
            edges,
            scale: Scale::SignedLog,
        }
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn bins(&self) -> usize {
        self.edges.len() - 1
    }

    /// Index of the bin containing `x`; values outside the grid clamp to the
    /// end bins.
    pub fn bin_of(&self, x: f64) -> usize {
        let above = self.edges.partition_point(|&e| e <= x);
        above.saturating_sub(1).min(self.bins() - 1)
    }

    pub fn width(&self, bin: usize) -> f64 {
        self.edges[bin + 1] - self.edges[bin]
    }

    /// Geometric midpoint of the bin; the bin that straddles zero maps to 0.
    pub fn representative(&self, bin: usize) -> f64 {
        let (lo, hi) = (self.edges[bin], self.edges[bin + 1]);
        match self.scale {
            Scale::Log => (lo * hi).sqrt(),
            Scale::SignedLog if lo < 0.0 && hi > 0.0 => 0.0,
            Scale::SignedLog => lo.signum() * (lo * hi).sqrt(),
        }
    }
}

fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    let step = (b - a) / (n - 1) as f64;
    (0..n).map(|i| (a + step * i as f64).exp()).collect()
}

/// Every table needed to map expressive parameters and durations to token ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizationSpec {
    pub beat_period: BinEdges,
    pub timing: BinEdges,
    pub articulation: BinEdges,
    /// Duration table in ticks, ascending.
    pub durations: Vec<u32>,
    pub ticks_per_beat: u32,
}

fn duration_table() -> Vec<u32> {
    let mut table: Vec<u32> = (1..=24).collect();
    table.extend((26..=48).step_by(2));
    table.extend((52..=96).step_by(4));
    table.extend([104, 112, 120]);
    table
}

impl QuantizationSpec {
    pub fn new(config: &QuantizationConfig) -> Result<Self> {
        for (name, (lo, hi)) in [
            ("beat_period", config.beat_period),
            ("articulation", config.articulation),
            ("timing_magnitude", config.timing_magnitude),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo < hi) {
                return Err(Error::Config(format!(
                    "{name} range must satisfy 0 < min < max, got ({lo}, {hi})"
                )));
            }
        }
        let (tl, th) = config.timing_magnitude;
        Ok(Self {
            beat_period: BinEdges::log(config.beat_period.0, config.beat_period.1, BEAT_PERIOD_BINS),
            timing: BinEdges::signed_log(tl, th, (TIMING_BINS - 1) / 2),
            articulation: BinEdges::log(
                config.articulation.0,
                config.articulation.1,
                ARTICULATION_BINS,
            ),
            durations: duration_table(),
            ticks_per_beat: TICKS_PER_BEAT,
        })
    }

    pub fn velocity_bin(velocity: f64) -> usize {
        let v = velocity.clamp(0.0, 127.0);
        ((v / VELOCITY_WIDTH as f64).floor() as usize).min(VELOCITY_BINS - 1)
    }

    /// Midpoint of the velocity bin `[4b, 4b + 4)`.
    pub fn velocity_representative(bin: usize) -> u8 {
        (bin as u32 * VELOCITY_WIDTH + VELOCITY_WIDTH / 2).min(127) as u8
    }

    pub fn timing_zero_bin(&self) -> usize {
        (TIMING_BINS - 1) / 2
    }

    pub fn quantize(&self, p: &ExpressiveParams) -> PerfBins {
        PerfBins {
            beat_period: self.beat_period.bin_of(p.beat_period),
            velocity: Self::velocity_bin(p.velocity as f64),
            timing: self.timing.bin_of(p.timing),
            articulation: self.articulation.bin_of(p.articulation),
        }
    }

    pub fn dequantize(&self, bins: &PerfBins) -> Result<ExpressiveParams> {
        let limits = [
            BEAT_PERIOD_BINS,
            VELOCITY_BINS,
            TIMING_BINS,
            ARTICULATION_BINS,
        ];
        for (bin, limit) in bins.as_array().into_iter().zip(limits) {
            if bin >= limit {
                return Err(Error::IdOutOfRange(format!("bin {bin} >= {limit}")));
            }
        }
        Ok(ExpressiveParams {
            beat_period: self.beat_period.representative(bins.beat_period),
            velocity: Self::velocity_representative(bins.velocity),
            timing: self.timing.representative(bins.timing),
            articulation: self.articulation.representative(bins.articulation),
        })
    }

    /// Index of the table entry nearest to `ticks`; ties go to the shorter entry.
    pub fn duration_index(&self, ticks: f64) -> usize {
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for (i, &d) in self.durations.iter().enumerate() {
            let dist = (d as f64 - ticks).abs();
            if dist < best_dist {
                best = i;
                best_dist = dist;
            }
        }
        best
    }

    pub fn duration_ticks(&self, index: usize) -> Option<u32> {
        self.durations.get(index).copied()
    }

    /// Hex SHA-256 of the serialized tables. Checkpoints store it so that a
    /// model is never paired with a different vocabulary.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

impl Default for QuantizationSpec {
    fn default() -> Self {
        Self::new(&QuantizationConfig::default()).expect("default config is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(bp: f64, v: u8, t: f64, a: f64) -> ExpressiveParams {
        ExpressiveParams {
            beat_period: bp,
            velocity: v,
            timing: t,
            articulation: a,
        }
    }

    #[test]
    fn default_bin_counts() {
        let spec = QuantizationSpec::default();
        assert_eq!(spec.beat_period.bins(), 161);
        assert_eq!(spec.timing.bins(), 41);
        assert_eq!(spec.articulation.bins(), 81);
        assert_eq!(spec.durations.len(), 51);
        assert_eq!(spec.durations[0], 1);
        assert_eq!(*spec.durations.last().unwrap(), 120);
        assert_eq!(spec.ticks_per_beat, 24);
        assert_eq!(128 / VELOCITY_BINS, 4);
    }

    #[test]
    fn edges_strictly_increasing() {
        let spec = QuantizationSpec::default();
        for grid in [&spec.beat_period, &spec.timing, &spec.articulation] {
            assert!(grid.edges().windows(2).all(|w| w[0] < w[1]));
        }
        assert!(spec.durations.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn beat_period_edges_match_log_linspace() {
        let spec = QuantizationSpec::default();
        let (lo, hi) = ((1.0f64 / 16.0).ln(), 16.0f64.ln());
        let edges = spec.beat_period.edges();
        assert_eq!(edges.len(), 162);
        for (i, e) in edges.iter().enumerate() {
            let expected = (lo + (hi - lo) * i as f64 / 161.0).exp();
            assert!((e - expected).abs() <= 1e-12 * expected);
        }
        let ratio = edges[1] / edges[0];
        for w in edges.windows(2) {
            assert!((w[1] / w[0] - ratio).abs() < 1e-9);
        }
    }

    #[test]
    fn timing_grid_is_symmetric() {
        let spec = QuantizationSpec::default();
        let e = spec.timing.edges();
        for i in 0..e.len() {
            assert_eq!(e[i], -e[e.len() - 1 - i]);
        }
        assert_eq!(spec.timing.bin_of(0.0), 20);
        assert_eq!(spec.timing.representative(20), 0.0);
        assert!((e[21] - 1.0 / 96.0).abs() < 1e-15);
    }

    #[test]
    fn spec_examples() {
        let spec = QuantizationSpec::default();
        let bins = spec.quantize(&params(1.0, 64, 0.0, 1.0));
        assert_eq!(bins.velocity, 16);
        assert_eq!(bins.beat_period, 80);
        assert_eq!(bins.timing, 20);
        assert_eq!(bins.articulation, 40);
        // direct edge search
        let e = spec.beat_period.edges();
        assert!(e[80] <= 1.0 && 1.0 < e[81]);

        let back = spec.dequantize(&bins).unwrap();
        assert_eq!(back.velocity, 66);
        assert_eq!(back.timing, 0.0);
    }

    #[test]
    fn extremes_clamp() {
        let spec = QuantizationSpec::default();
        let lo = spec.quantize(&params(1e-6, 0, -1e6, 1e-9));
        let hi = spec.quantize(&params(1e6, 127, 1e6, 1e9));
        assert_eq!(lo.as_array(), [0, 0, 0, 0]);
        assert_eq!(hi.as_array(), [160, 31, 40, 80]);
    }

    #[test]
    fn invalid_ranges_rejected() {
        let mut cfg = QuantizationConfig::default();
        cfg.beat_period = (2.0, 1.0);
        assert!(QuantizationSpec::new(&cfg).is_err());
        let mut cfg = QuantizationConfig::default();
        cfg.timing_magnitude = (0.0, 1.0);
        assert!(QuantizationSpec::new(&cfg).is_err());
    }

    #[test]
    fn duration_snapping() {
        let spec = QuantizationSpec::default();
        assert_eq!(spec.durations[spec.duration_index(24.0)], 24);
        assert_eq!(spec.durations[spec.duration_index(25.0)], 24);
        assert_eq!(spec.durations[spec.duration_index(27.0)], 26);
        assert_eq!(spec.durations[spec.duration_index(500.0)], 120);
        assert_eq!(spec.durations[spec.duration_index(0.1)], 1);
    }

    #[test]
    fn fingerprint_tracks_config() {
        let a = QuantizationSpec::default();
        let mut cfg = QuantizationConfig::default();
        cfg.articulation = (0.1, 10.0);
        let b = QuantizationSpec::new(&cfg).unwrap();
        assert_eq!(a.fingerprint(), QuantizationSpec::default().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn dequantize_is_a_fixed_point(bp in 0usize..161, v in 0usize..32, t in 0usize..41, a in 0usize..81) {
                let spec = QuantizationSpec::default();
                let bins = PerfBins { beat_period: bp, velocity: v, timing: t, articulation: a };
                let p = spec.dequantize(&bins).unwrap();
                prop_assert_eq!(spec.quantize(&p), bins);
            }

            #[test]
            fn quantize_is_total_and_monotone(
                x in -1e7f64..1e7, y in -1e7f64..1e7,
                vx in 0u8..=127, vy in 0u8..=127,
            ) {
                let spec = QuantizationSpec::default();
                let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
                let (vlo, vhi) = if vx <= vy { (vx, vy) } else { (vy, vx) };
                let a = spec.quantize(&params(lo.abs().max(1e-300), vlo, lo, lo.abs().max(1e-300)));
                let b = spec.quantize(&params(hi.abs().max(1e-300), vhi, hi, hi.abs().max(1e-300)));
                prop_assert!(a.timing <= b.timing);
                prop_assert!(a.velocity <= b.velocity);
                prop_assert!(b.timing < 41 && b.velocity < 32 && b.beat_period < 161 && b.articulation < 81);
                let (plo, phi) = (lo.abs().min(hi.abs()), lo.abs().max(hi.abs()));
                let c = spec.quantize(&params(plo, 0, 0.0, plo));
                let d = spec.quantize(&params(phi, 0, 0.0, phi));
                prop_assert!(c.beat_period <= d.beat_period);
                prop_assert!(c.articulation <= d.articulation);
            }
        }
    }
}
