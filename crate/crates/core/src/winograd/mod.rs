//! F(2×2, 3×3) Winograd convolution.
//!
//! The engine is organised like the hardware it models: an input stage that
//! cuts each padded plane into 4×2 tiles (overlapping by two rows, never by
//! columns), a compute stage of processing elements that each take a tile and
//! its right-hand neighbour, and an output stage that writes 2×2 output tiles.
//! Where the input transform runs is selected by [`Strategy`].

mod engine;
mod tiling;

pub use engine::{
    conv3x3_winograd, count_transform_ops, pe_compute, OpCounters, WinogradConv,
};
pub use tiling::{detile, tile_input, Tile, TileGrid, TILES_PER_ROW_MULTIPLE};

/// Tile rows and padded tiles per row for an unpadded `h × w` input plane
/// under same-size convolution padding.
pub fn tiling_dims(h: usize, w: usize) -> (usize, usize) {
    (tiling::tile_rows(h + 2), tiling::padded_tiles_per_row(w + 2))
}

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::tensor::{Tensor4D, TensorError};

/// Output tile edge.
pub const M: usize = 2;
/// Filter edge.
pub const R: usize = 3;
/// Transformed tile edge, `M + R - 1`.
pub const ALPHA: usize = M + R - 1;
/// Additions performed by one application of the four-point partial transform.
pub const ADDS_PER_PARTIAL: u64 = 4;

pub type Block3 = [[f32; 3]; 3];
pub type Block4 = [[f32; 4]; 4];

#[derive(Debug, Error)]
pub enum WinogradError {
    #[error("unsupported convolution: {0}")]
    Unsupported(String),
    #[error("input has {input} channels but weights expect {weights}")]
    ChannelMismatch { input: usize, weights: usize },
    #[error("bias has {got} entries, expected {expected}")]
    BiasLength { got: usize, expected: usize },
    #[error("filter contains non-finite values")]
    NonFinite,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Tile geometry of the algorithm. Only F(2×2, 3×3) exists here.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WinogradParams {
    pub m: usize,
    pub r: usize,
    pub alpha: usize,
}

impl Default for WinogradParams {
    fn default() -> Self {
        Self {
            m: M,
            r: R,
            alpha: ALPHA,
        }
    }
}

/// The constant matrices of the filter, input and output transforms.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformMatrices {
    /// 4×3 filter transform.
    pub g: [[f32; 3]; 4],
    /// 4×4 input transform, transposed form.
    pub b_t: [[f32; 4]; 4],
    /// 2×4 output transform, transposed form.
    pub a_t: [[f32; 4]; 2],
}

pub fn standard_matrices() -> TransformMatrices {
    TransformMatrices {
        g: [
            [1.0, 0.0, 0.0],
            [0.5, 0.5, 0.5],
            [0.5, -0.5, 0.5],
            [0.0, 0.0, 1.0],
        ],
        b_t: [
            [1.0, 0.0, -1.0, 0.0],
            [0.0, 1.0, 1.0, 0.0],
            [0.0, -1.0, 1.0, 0.0],
            [0.0, 1.0, 0.0, -1.0],
        ],
        a_t: [[1.0, 1.0, 1.0, 0.0], [0.0, 1.0, -1.0, -1.0]],
    }
}

/// Where the input transform of each 4×4 tile is computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Case 1: the full transform runs once in the input stage and the
    /// transformed tiles are stored, so PEs only multiply.
    FullPreTransform,
    /// Case 2: every PE applies the full transform to raw tiles.
    FullInPe,
    /// Case 3: the input stage applies the column partial transform to every
    /// tile column; PEs finish with the row partials.
    #[default]
    PartialInPe,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [
        Strategy::FullPreTransform,
        Strategy::FullInPe,
        Strategy::PartialInPe,
    ];

    pub fn case_number(self) -> u8 {
        match self {
            Strategy::FullPreTransform => 1,
            Strategy::FullInPe => 2,
            Strategy::PartialInPe => 3,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "case{}", self.case_number())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "case1" | "1" | "full-pre-transform" => Ok(Strategy::FullPreTransform),
            "case2" | "2" | "full-in-pe" => Ok(Strategy::FullInPe),
            "case3" | "3" | "partial-in-pe" => Ok(Strategy::PartialInPe),
            other => Err(format!("unknown strategy `{other}` (expected case1, case2 or case3)")),
        }
    }
}

/// The four-point partial input transform, applied to one tile column (or,
/// with indices swapped, one row).
#[inline(always)]
pub fn partial_col_transform(i: [f32; 4]) -> [f32; 4] {
    [i[0] - i[2], i[1] + i[2], i[2] - i[1], i[1] - i[3]]
}

/// `G · g · Gᵀ`.
pub fn filter_transform(g: &Block3, m: &TransformMatrices) -> Result<Block4, WinogradError> {
    if g.iter().flatten().any(|v| !v.is_finite()) {
        return Err(WinogradError::NonFinite);
    }
    let mut gg = [[0.0f32; 3]; 4];
    for (row, grow) in gg.iter_mut().zip(&m.g) {
        for (j, out) in row.iter_mut().enumerate() {
            *out = (0..3).map(|k| grow[k] * g[k][j]).sum();
        }
    }
    let mut u = [[0.0f32; 4]; 4];
    for (urow, ggrow) in u.iter_mut().zip(&gg) {
        for (j, out) in urow.iter_mut().enumerate() {
            *out = (0..3).map(|k| ggrow[k] * m.g[j][k]).sum();
        }
    }
    Ok(u)
}

/// `Bᵀ · d · B` by explicit matrix products.
pub fn input_transform(d: &Block4, m: &TransformMatrices) -> Block4 {
    let mut bd = [[0.0f32; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            bd[i][j] = (0..4).map(|k| m.b_t[i][k] * d[k][j]).sum();
        }
    }
    let mut v = [[0.0f32; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            v[i][j] = (0..4).map(|k| bd[i][k] * m.b_t[j][k]).sum();
        }
    }
    v
}

/// `Aᵀ · y · A` by explicit matrix products.
pub fn output_transform(y: &Block4, m: &TransformMatrices) -> [[f32; 2]; 2] {
    let mut ay = [[0.0f32; 4]; 2];
    for i in 0..2 {
        for j in 0..4 {
            ay[i][j] = (0..4).map(|k| m.a_t[i][k] * y[k][j]).sum();
        }
    }
    let mut out = [[0.0f32; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = (0..4).map(|k| ay[i][k] * m.a_t[j][k]).sum();
        }
    }
    out
}

/// Transformed 4×4 filters for every (output channel, input channel) pair,
/// computed once ahead of time.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformedFilterBank {
    k: usize,
    c: usize,
    u: Vec<[f32; 16]>,
}

impl TransformedFilterBank {
    pub fn out_channels(&self) -> usize {
        self.k
    }

    pub fn in_channels(&self) -> usize {
        self.c
    }

    /// Transformed filter for output channel `k`, input channel `c`, row-major.
    #[inline]
    pub fn block(&self, k: usize, c: usize) -> &[f32; 16] {
        &self.u[k * self.c + c]
    }

    pub fn blocks(&self) -> &[[f32; 16]] {
        &self.u
    }

    /// Number of stored reals (`k·c·16`).
    pub fn stored_values(&self) -> usize {
        self.u.len() * ALPHA * ALPHA
    }

    /// Number of reals the untransformed filters occupy (`k·c·9`).
    pub fn raw_values(&self) -> usize {
        self.u.len() * R * R
    }

    /// Stored size relative to the raw filters; always 16/9.
    pub fn storage_ratio(&self) -> f64 {
        self.stored_values() as f64 / self.raw_values() as f64
    }
}

pub fn transform_filter_bank(
    weights: &Tensor4D,
    m: &TransformMatrices,
) -> Result<TransformedFilterBank, WinogradError> {
    let s = weights.shape();
    if s.h != R || s.w != R {
        return Err(WinogradError::Unsupported(format!(
            "kernel {}x{} (only 3x3 is supported)",
            s.h, s.w
        )));
    }
    let u = weights
        .data()
        .chunks_exact(R * R)
        .map(|f| {
            let g = [[f[0], f[1], f[2]], [f[3], f[4], f[5]], [f[6], f[7], f[8]]];
            filter_transform(&g, m).map(|u| flatten4(&u))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TransformedFilterBank { k: s.n, c: s.c, u })
}

pub(crate) fn flatten4(b: &Block4) -> [f32; 16] {
    let mut out = [0.0; 16];
    for (i, row) in b.iter().enumerate() {
        out[i * 4..i * 4 + 4].copy_from_slice(row);
    }
    out
}
