//! Analytic cycle, latency, FLOP and DSP models for the engine, plus the
//! benchmark harness.

mod bench;
pub mod table;

pub use bench::{
    load_fixtures, parse_fixtures, run_benchmark, BenchError, BenchOptions, BenchReport, BenchRow,
    Fixture, NetworkSummary, BUILTIN_SUITE,
};

use crate::winograd::tiling_dims;
use crate::winograd::Strategy;

/// Parameters of the modeled accelerator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerfConfig {
    pub freq_hz: f64,
    /// Processing elements per compute unit.
    pub pe_count: usize,
    pub cu_count: usize,
    /// Cycles to fill the PE pipeline.
    pub pipeline_fill: u64,
}

impl Default for PerfConfig {
    fn default() -> Self {
        Self {
            freq_hz: 2.0e8,
            pe_count: 4,
            cu_count: 2,
            pipeline_fill: 32,
        }
    }
}

/// Dimensions of one 3×3 same-size convolution layer and its tile grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerWork {
    pub n: usize,
    pub c_in: usize,
    pub k_out: usize,
    pub h: usize,
    pub w: usize,
    /// Channel groups; `c_in` and `k_out` are totals across groups.
    pub groups: usize,
    /// Tile rows per input plane.
    pub p: usize,
    /// Tiles per row after padding to a multiple of eight.
    pub q: usize,
}

impl LayerWork {
    pub fn new(n: usize, c_in: usize, k_out: usize, h: usize, w: usize) -> Self {
        let (p, q) = tiling_dims(h, w);
        Self {
            n,
            c_in,
            k_out,
            h,
            w,
            groups: 1,
            p,
            q,
        }
    }

    pub fn with_groups(self, groups: usize) -> Self {
        Self { groups, ..self }
    }

    /// Input channels seen by each filter.
    pub fn channels_per_group(&self) -> usize {
        self.c_in / self.groups
    }
}

/// Cycles to produce one output feature map: `ceil(C·P·Q / PEs) + D`.
pub fn cycles_per_output_map(work: &LayerWork, cfg: &PerfConfig) -> u64 {
    let tiles = (work.channels_per_group() * work.p * work.q) as u64;
    tiles.div_ceil(cfg.pe_count as u64) + cfg.pipeline_fill
}

/// Cycles for one image through the whole layer.
pub fn layer_cycles(work: &LayerWork, cfg: &PerfConfig) -> u64 {
    work.k_out as u64 * cycles_per_output_map(work, cfg)
}

/// `T = (C · N) / (F · CUs)` in seconds.
pub fn total_latency(total_cycles: u64, n_images: usize, cfg: &PerfConfig) -> f64 {
    (total_cycles as f64 * n_images as f64) / (cfg.freq_hz * cfg.cu_count as f64)
}

/// Modeled latency of a whole layer for its batch, in seconds.
pub fn modeled_layer_latency(work: &LayerWork, cfg: &PerfConfig) -> f64 {
    total_latency(layer_cycles(work, cfg), work.n, cfg)
}

/// Direct-convolution operation count, multiplies and adds counted separately.
pub fn effective_flops(work: &LayerWork) -> u64 {
    work.n as u64
        * 2
        * work.k_out as u64
        * work.channels_per_group() as u64
        * 9
        * work.h as u64
        * work.w as u64
}

/// Effective throughput in GFLOPS for `flops` done in `seconds`.
pub fn effective_gflops(flops: u64, seconds: f64) -> f64 {
    flops as f64 / seconds / 1e9
}

/// DSP slices consumed per floating-point operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DspCostModel {
    pub dsp_per_add: u64,
    pub dsp_per_mul: u64,
}

impl Default for DspCostModel {
    fn default() -> Self {
        Self {
            dsp_per_add: 2,
            dsp_per_mul: 3,
        }
    }
}

/// DSP saving between Case 2 and Case 3 measured after place and route.
pub const MEASURED_CASE2_CASE3_DSP_SAVING: u64 = 61;

/// DSPs spent on input-transform logic in one compute unit.
pub fn dsp_estimate(strategy: Strategy, cfg: &PerfConfig, model: &DspCostModel) -> u64 {
    let adds_per_partial = crate::winograd::ADDS_PER_PARTIAL;
    let pe = cfg.pe_count as u64;
    let partials = match strategy {
        // one full transform (eight partials) ahead of the PEs
        Strategy::FullPreTransform => 8,
        // one full transform per PE
        Strategy::FullInPe => pe * 8,
        // eight column partials in the input stage, four row partials per PE
        Strategy::PartialInPe => 8 + pe * 4,
    };
    partials * adds_per_partial * model.dsp_per_add
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DspComparison {
    pub case1: u64,
    pub case2: u64,
    pub case3: u64,
    /// Modeled Case 2 minus Case 3.
    pub saving: u64,
    /// The saving observed in synthesis, for comparison.
    pub measured_saving: u64,
}

pub fn dsp_comparison(cfg: &PerfConfig, model: &DspCostModel) -> DspComparison {
    let case1 = dsp_estimate(Strategy::FullPreTransform, cfg, model);
    let case2 = dsp_estimate(Strategy::FullInPe, cfg, model);
    let case3 = dsp_estimate(Strategy::PartialInPe, cfg, model);
    DspComparison {
        case1,
        case2,
        case3,
        saving: case2 - case3,
        measured_saving: MEASURED_CASE2_CASE3_DSP_SAVING,
    }
}

/// Geometric mean of positive values.
pub fn geometric_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    (values.iter().map(|v| v.ln()).sum::<f64>() / values.len() as f64).exp()
}
