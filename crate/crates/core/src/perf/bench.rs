use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use super::table::PublishedRow;
use super::{effective_flops, geometric_mean, modeled_layer_latency, LayerWork, PerfConfig};
use crate::device::{Device, DeviceConfig, DeviceError, KernelBinary};
use crate::tensor::{Shape, Tensor4D};
use crate::winograd::{Strategy, WinogradConv, WinogradError};

/// The shipped convnet-benchmarks 3×3 layer shapes.
pub const BUILTIN_SUITE: &str = include_str!("../../fixtures/convnet_3x3.csv");

const BENCH_BINARY: &str = "winograd_bench";
const BENCH_KERNEL: &str = "conv3x3_winograd";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("fixture parse error: {0}")]
    Csv(#[from] csv::Error),
    #[error("fixture {network}/{layer}: {reason}")]
    InvalidFixture {
        network: String,
        layer: String,
        reason: String,
    },
    #[error("batch scale must be positive and finite, got {0}")]
    BadScale(f64),
    #[error(transparent)]
    Winograd(#[from] WinogradError),
    #[error(transparent)]
    Device(#[from] DeviceError),
}

/// One 3×3 stride-1 layer of a benchmark network.
#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
pub struct Fixture {
    pub network: String,
    pub layer: String,
    pub batch: usize,
    pub c: usize,
    pub k: usize,
    pub h: usize,
    pub w: usize,
    #[serde(default = "one")]
    pub groups: usize,
}

fn one() -> usize {
    1
}

impl Fixture {
    pub fn work(&self, n: usize) -> LayerWork {
        LayerWork::new(n, self.c, self.k, self.h, self.w).with_groups(self.groups)
    }

    fn validate(&self) -> Result<(), BenchError> {
        let bad = |reason: &str| BenchError::InvalidFixture {
            network: self.network.clone(),
            layer: self.layer.clone(),
            reason: reason.to_string(),
        };
        if self.batch == 0 || self.c == 0 || self.k == 0 || self.h == 0 || self.w == 0 {
            return Err(bad("dimensions must be positive"));
        }
        if self.groups == 0 || self.c % self.groups != 0 || self.k % self.groups != 0 {
            return Err(bad("groups must divide both c and k"));
        }
        Ok(())
    }
}

/// Parse fixture CSV text. Lines starting with `#` are comments.
pub fn parse_fixtures(text: &str) -> Result<Vec<Fixture>, BenchError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in reader.deserialize() {
        let f: Fixture = rec?;
        f.validate()?;
        out.push(f);
    }
    Ok(out)
}

pub fn load_fixtures(path: &Path) -> Result<Vec<Fixture>, BenchError> {
    let text = std::fs::read_to_string(path).map_err(|source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_fixtures(&text)
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    /// Multiplier applied to every fixture batch; the result is rounded and
    /// clamped to at least one image.
    pub batch_scale: f64,
    pub strategy: Strategy,
    /// Seed for the random inputs and weights.
    pub seed: u64,
    /// Model parameters; `cu_count` also sets the simulated device's units.
    pub perf: PerfConfig,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            batch_scale: 1.0,
            strategy: Strategy::default(),
            seed: 0x5eed,
            perf: PerfConfig::default(),
        }
    }
}

impl BenchOptions {
    pub fn scaled_batch(&self, batch: usize) -> usize {
        ((batch as f64 * self.batch_scale).round() as usize).max(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub network: String,
    pub layer: String,
    pub n: usize,
    pub c: usize,
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub groups: usize,
    pub flops: u64,
    pub wall_ms: f64,
    pub modeled_ms: f64,
    pub eff_gflops: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSummary {
    pub network: String,
    pub images: usize,
    pub flops: u64,
    pub wall_ms: f64,
    pub modeled_ms: f64,
    pub eff_gflops: f64,
    pub modeled_gflops: f64,
    pub published: Option<PublishedRow>,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub options: BenchOptions,
    pub rows: Vec<BenchRow>,
    pub networks: Vec<NetworkSummary>,
    /// Programming latency charged once before the first layer, in ms.
    pub program_ms: f64,
}

impl BenchReport {
    pub fn write_csv(&self, w: impl Write) -> Result<(), BenchError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "network",
            "layer",
            "n",
            "c",
            "k",
            "h",
            "w",
            "wall_ms",
            "modeled_ms",
            "eff_gflops",
        ])?;
        for r in &self.rows {
            out.write_record([
                r.network.clone(),
                r.layer.clone(),
                r.n.to_string(),
                r.c.to_string(),
                r.k.to_string(),
                r.h.to_string(),
                r.w.to_string(),
                format!("{:.3}", r.wall_ms),
                format!("{:.3}", r.modeled_ms),
                format!("{:.3}", r.eff_gflops),
            ])?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Geometric means over networks of (wall ms, GFLOPS, modeled ms, modeled GFLOPS).
    pub fn geometric_average(&self) -> (f64, f64, f64, f64) {
        let col = |f: fn(&NetworkSummary) -> f64| {
            geometric_mean(&self.networks.iter().map(f).collect::<Vec<_>>())
        };
        (
            col(|n| n.wall_ms),
            col(|n| n.eff_gflops),
            col(|n| n.modeled_ms),
            col(|n| n.modeled_gflops),
        )
    }

    /// Aligned text report: per-layer rows, then one row per network with the
    /// published FPGA figures alongside.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let o = &self.options;
        let _ = writeln!(
            s,
            "strategy {}  batch scale {}  {} CUs x {} PEs @ {:.0} MHz  program {:.1} ms (not included below)",
            o.strategy,
            o.batch_scale,
            o.perf.cu_count,
            o.perf.pe_count,
            o.perf.freq_hz / 1e6,
            self.program_ms
        );
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<10} {:<14} {:>4} {:>5} {:>5} {:>4} {:>10} {:>11} {:>8}",
            "network", "layer", "n", "c", "k", "hw", "wall ms", "modeled ms", "GFLOPS"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<10} {:<14} {:>4} {:>5} {:>5} {:>4} {:>10.2} {:>11.2} {:>8.2}",
                r.network, r.layer, r.n, r.c, r.k, r.h, r.wall_ms, r.modeled_ms, r.eff_gflops
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<18} {:>6} {:>9} {:>10} {:>8} {:>11} {:>9} {:>8} {:>12} {:>10}",
            "network",
            "images",
            "GFLOP",
            "wall ms",
            "GFLOPS",
            "modeled ms",
            "mod GFLOPS",
            "pub imgs",
            "pub FPGA ms",
            "pub GFLOPS"
        );
        for n in &self.networks {
            let (pi, pm, pg) = n.published.map_or(
                ("-".to_string(), "-".to_string(), "-".to_string()),
                |p| {
                    (
                        p.images.to_string(),
                        format!("{:.1}", p.fpga_ms),
                        format!("{:.1}", p.fpga_gflops),
                    )
                },
            );
            let _ = writeln!(
                s,
                "{:<18} {:>6} {:>9.2} {:>10.2} {:>8.2} {:>11.2} {:>9.2} {:>8} {:>12} {:>10}",
                n.network,
                n.images,
                n.flops as f64 / 1e9,
                n.wall_ms,
                n.eff_gflops,
                n.modeled_ms,
                n.modeled_gflops,
                pi,
                pm,
                pg
            );
        }
        if !self.networks.is_empty() {
            let (wm, wg, mm, mg) = self.geometric_average();
            let p = super::table::PUBLISHED_GEOMEAN;
            let _ = writeln!(
                s,
                "{:<18} {:>6} {:>9} {:>10.2} {:>8.2} {:>11.2} {:>9.2} {:>8} {:>12.1} {:>10.1}",
                "Geometric Average", "", "", wm, wg, mm, mg, "", p.fpga_ms, p.fpga_gflops
            );
        }
        s
    }
}

/// Run every fixture through the Winograd engine on seeded random data,
/// spreading each batch across the simulated device's compute units.
pub fn run_benchmark(fixtures: &[Fixture], opts: &BenchOptions) -> Result<BenchReport, BenchError> {
    if !(opts.batch_scale.is_finite() && opts.batch_scale > 0.0) {
        return Err(BenchError::BadScale(opts.batch_scale));
    }
    let mut device = Device::new(DeviceConfig {
        cu_count: opts.perf.cu_count,
        ..DeviceConfig::default()
    });
    let binary = KernelBinary::with_modeled_cost(
        BENCH_BINARY,
        vec![BENCH_KERNEL.to_string()],
        device.config().program_cost_range_ms,
    )?;
    let program_ms = device.program(&binary);

    let mut rows = Vec::with_capacity(fixtures.len());
    for (idx, f) in fixtures.iter().enumerate() {
        f.validate()?;
        let n = opts.scaled_batch(f.batch);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(idx as u64));
        let input = random_tensor(&mut rng, Shape::new(n, f.c, f.h, f.w));
        let cpg = f.c / f.groups;
        let kpg = f.k / f.groups;
        let convs = (0..f.groups)
            .map(|_| {
                let weights = random_tensor(&mut rng, Shape::new(kpg, cpg, 3, 3));
                let bias: Vec<f32> = (0..kpg).map(|_| rng.gen_range(-1.0f32..=1.0)).collect();
                WinogradConv::new(&weights, Some(&bias), opts.strategy)
            })
            .collect::<Result<Vec<_>, _>>()?;

        let start = Instant::now();
        let parts = device.dispatch(BENCH_KERNEL, n, |a| {
            let images = &input.data()[a.start * f.c * f.h * f.w..(a.start + a.count) * f.c * f.h * f.w];
            grouped_forward(&convs, images, a.count, f)
        })?;
        let wall = start.elapsed().as_secs_f64();
        if parts.iter().flatten().any(|v| !v.is_finite()) {
            return Err(BenchError::InvalidFixture {
                network: f.network.clone(),
                layer: f.layer.clone(),
                reason: "engine produced non-finite output".into(),
            });
        }

        let work = f.work(n);
        let flops = effective_flops(&work);
        rows.push(BenchRow {
            network: f.network.clone(),
            layer: f.layer.clone(),
            n,
            c: f.c,
            k: f.k,
            h: f.h,
            w: f.w,
            groups: f.groups,
            flops,
            wall_ms: wall * 1e3,
            modeled_ms: modeled_layer_latency(&work, &opts.perf) * 1e3,
            eff_gflops: super::effective_gflops(flops, wall),
        });
    }

    let networks = summarize(&rows);
    Ok(BenchReport {
        options: opts.clone(),
        rows,
        networks,
        program_ms,
    })
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor4D {
    let data = (0..shape.len()).map(|_| rng.gen_range(-1.0f32..=1.0)).collect();
    Tensor4D::from_vec(shape, data).expect("shape is non-empty")
}

/// Convolve `n` images, one engine per channel group.
fn grouped_forward(convs: &[WinogradConv], images: &[f32], n: usize, f: &Fixture) -> Vec<f32> {
    let plane = f.h * f.w;
    let mut out = vec![0.0f32; n * f.k * plane];
    if let [conv] = convs {
        conv.forward_images(images, Shape::new(n, f.c, f.h, f.w), &mut out, None);
        return out;
    }
    let (cpg, kpg) = (f.c / f.groups, f.k / f.groups);
    let mut gin = vec![0.0f32; n * cpg * plane];
    let mut gout = vec![0.0f32; n * kpg * plane];
    for (g, conv) in convs.iter().enumerate() {
        for b in 0..n {
            let src = &images[(b * f.c + g * cpg) * plane..(b * f.c + (g + 1) * cpg) * plane];
            gin[b * cpg * plane..(b + 1) * cpg * plane].copy_from_slice(src);
        }
        conv.forward_images(&gin, Shape::new(n, cpg, f.h, f.w), &mut gout, None);
        for b in 0..n {
            let dst = &mut out[(b * f.k + g * kpg) * plane..(b * f.k + (g + 1) * kpg) * plane];
            dst.copy_from_slice(&gout[b * kpg * plane..(b + 1) * kpg * plane]);
        }
    }
    out
}

fn summarize(rows: &[BenchRow]) -> Vec<NetworkSummary> {
    let mut out: Vec<NetworkSummary> = Vec::new();
    for r in rows {
        let idx = match out.iter().position(|s| s.network == r.network) {
            Some(i) => i,
            None => {
                out.push(NetworkSummary {
                    network: r.network.clone(),
                    images: r.n,
                    flops: 0,
                    wall_ms: 0.0,
                    modeled_ms: 0.0,
                    eff_gflops: 0.0,
                    modeled_gflops: 0.0,
                    published: PublishedRow::find(&r.network).copied(),
                });
                out.len() - 1
            }
        };
        let s = &mut out[idx];
        s.flops += r.flops;
        s.wall_ms += r.wall_ms;
        s.modeled_ms += r.modeled_ms;
    }
    for s in &mut out {
        s.eff_gflops = s.flops as f64 / (s.wall_ms * 1e6);
        s.modeled_gflops = s.flops as f64 / (s.modeled_ms * 1e6);
    }
    out
}
