//! Published CPU/GPU/FPGA timings for the 3×3 layers of four networks,
//! kept as reference data for the benchmark report.

use super::geometric_mean;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PublishedRow {
    pub network: &'static str,
    pub images: usize,
    pub cpu_ms: f64,
    pub gpu_ms: f64,
    pub fpga_ms: f64,
    pub cpu_gflops: f64,
    pub gpu_gflops: f64,
    pub fpga_gflops: f64,
}

pub const PUBLISHED: [PublishedRow; 4] = [
    PublishedRow {
        network: "AlexNet",
        images: 64,
        cpu_ms: 492.0,
        gpu_ms: 261.2,
        fpga_ms: 1010.0,
        cpu_gflops: 94.0,
        gpu_gflops: 177.1,
        fpga_gflops: 45.8,
    },
    PublishedRow {
        network: "VGG A",
        images: 32,
        cpu_ms: 4310.0,
        gpu_ms: 745.14,
        fpga_ms: 8713.0,
        cpu_gflops: 111.2,
        gpu_gflops: 642.9,
        fpga_gflops: 55.0,
    },
    PublishedRow {
        network: "Overfeat",
        images: 64,
        cpu_ms: 2030.0,
        gpu_ms: 387.1,
        fpga_ms: 4781.0,
        cpu_gflops: 139.2,
        gpu_gflops: 730.2,
        fpga_gflops: 59.1,
    },
    PublishedRow {
        network: "GoogleNet",
        images: 64,
        cpu_ms: 1506.0,
        gpu_ms: 209.66,
        fpga_ms: 2937.0,
        cpu_gflops: 81.8,
        gpu_gflops: 587.8,
        fpga_gflops: 42.0,
    },
];

/// The published geometric-average row.
pub const PUBLISHED_GEOMEAN: PublishedRow = PublishedRow {
    network: "Geometric Average",
    images: 0,
    cpu_ms: 1595.6,
    gpu_ms: 354.51,
    fpga_ms: 3333.9,
    cpu_gflops: 104.46,
    gpu_gflops: 470.17,
    fpga_gflops: 50.0,
};

impl PublishedRow {
    /// Total work implied by each platform's time × rate, in GFLOP.
    pub fn implied_gflop(&self) -> [f64; 3] {
        [
            self.cpu_ms * self.cpu_gflops / 1e3,
            self.gpu_ms * self.gpu_gflops / 1e3,
            self.fpga_ms * self.fpga_gflops / 1e3,
        ]
    }

    /// Largest relative spread between the three implied work totals.
    pub fn implied_work_spread(&self) -> f64 {
        let w = self.implied_gflop();
        let max = w.iter().copied().fold(f64::MIN, f64::max);
        let min = w.iter().copied().fold(f64::MAX, f64::min);
        (max - min) / min
    }

    pub fn find(network: &str) -> Option<&'static PublishedRow> {
        PUBLISHED
            .iter()
            .find(|r| r.network.eq_ignore_ascii_case(network) || r.network.replace(' ', "").eq_ignore_ascii_case(network))
    }
}

/// Geometric averages over [`PUBLISHED`], computed the same way as the published row.
pub fn geometric_average() -> PublishedRow {
    let col = |f: fn(&PublishedRow) -> f64| geometric_mean(&PUBLISHED.iter().map(f).collect::<Vec<_>>());
    PublishedRow {
        network: "Geometric Average",
        images: 0,
        cpu_ms: col(|r| r.cpu_ms),
        gpu_ms: col(|r| r.gpu_ms),
        fpga_ms: col(|r| r.fpga_ms),
        cpu_gflops: col(|r| r.cpu_gflops),
        gpu_gflops: col(|r| r.gpu_gflops),
        fpga_gflops: col(|r| r.fpga_gflops),
    }
}
