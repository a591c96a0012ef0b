//! Input, compute and output stages of the convolution engine.

use super::tiling::{tile_rows, valid_tiles_per_row, Tile};
use super::{
    partial_col_transform, standard_matrices, transform_filter_bank, Strategy,
    TransformedFilterBank, WinogradError, ADDS_PER_PARTIAL,
};
use crate::reference::ConvSpec;
use crate::tensor::{Shape, Tensor4D};

/// Operation counts gathered while the engine runs, or predicted by
/// [`count_transform_ops`].
///
/// Transform additions are tallied per application of the four-point partial
/// transform, four additions each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpCounters {
    /// Number of 4×4 transformed input tiles produced.
    pub tile_transforms: u64,
    /// Transform additions done in the input stage.
    pub input_stage_adds: u64,
    /// Transform additions done inside processing elements.
    pub pe_transform_adds: u64,
    /// Column transforms of the extra tile at the right edge of every tile
    /// row (partial-in-PE strategy only). Kept out of the per-tile figure.
    pub edge_column_adds: u64,
    /// Element-wise products `U ⊙ V`.
    pub multiplications: u64,
    pub output_transform_adds: u64,
    pub accumulate_adds: u64,
    /// Work items (one tile pair against one filter) issued to each PE.
    pub pe_loads: Vec<u64>,
}

impl OpCounters {
    pub fn new(pe_count: usize) -> Self {
        assert!(pe_count > 0, "pe_count must be positive");
        Self {
            tile_transforms: 0,
            input_stage_adds: 0,
            pe_transform_adds: 0,
            edge_column_adds: 0,
            multiplications: 0,
            output_transform_adds: 0,
            accumulate_adds: 0,
            pe_loads: vec![0; pe_count],
        }
    }

    pub fn pe_count(&self) -> usize {
        self.pe_loads.len()
    }

    /// Input-transform additions attributed to tiles (edge extras excluded).
    pub fn transform_adds(&self) -> u64 {
        self.input_stage_adds + self.pe_transform_adds
    }

    pub fn adds_per_tile_transform(&self) -> f64 {
        self.transform_adds() as f64 / self.tile_transforms as f64
    }

    pub fn max_pe_load(&self) -> u64 {
        self.pe_loads.iter().copied().max().unwrap_or(0)
    }

    pub fn merge(&mut self, other: &OpCounters) {
        self.tile_transforms += other.tile_transforms;
        self.input_stage_adds += other.input_stage_adds;
        self.pe_transform_adds += other.pe_transform_adds;
        self.edge_column_adds += other.edge_column_adds;
        self.multiplications += other.multiplications;
        self.output_transform_adds += other.output_transform_adds;
        self.accumulate_adds += other.accumulate_adds;
        if self.pe_loads.len() < other.pe_loads.len() {
            self.pe_loads.resize(other.pe_loads.len(), 0);
        }
        for (a, b) in self.pe_loads.iter_mut().zip(&other.pe_loads) {
            *a += b;
        }
    }

    /// Closed-form counts for a whole layer: `n` images, `c` input and `k`
    /// output channels, `p` tile rows of `q_out` output tiles each.
    pub fn predicted(
        strategy: Strategy,
        n: u64,
        c: u64,
        k: u64,
        p: u64,
        q_out: u64,
        pe_count: usize,
    ) -> Self {
        let windows = n * c * p * q_out;
        let mut out = OpCounters::new(pe_count);
        out.tile_transforms = windows;
        match strategy {
            Strategy::FullPreTransform => out.input_stage_adds = windows * 8 * ADDS_PER_PARTIAL,
            Strategy::FullInPe => out.pe_transform_adds = windows * 8 * ADDS_PER_PARTIAL,
            Strategy::PartialInPe => {
                out.input_stage_adds = windows * 2 * ADDS_PER_PARTIAL;
                out.pe_transform_adds = windows * 4 * ADDS_PER_PARTIAL;
                out.edge_column_adds = n * c * p * 2 * ADDS_PER_PARTIAL;
            }
        }
        out.multiplications = windows * k * 16;
        out.output_transform_adds = windows * k * 24;
        out.accumulate_adds = windows * k * 4;
        for idx in 0..p * q_out {
            out.pe_loads[(idx % pe_count as u64) as usize] += n * c * k;
        }
        out
    }
}

/// Predicted counts for transforming one channel plane of `p × q_out`
/// output tiles against a single filter.
pub fn count_transform_ops(strategy: Strategy, p: usize, q_out: usize, pe_count: usize) -> OpCounters {
    OpCounters::predicted(strategy, 1, 1, 1, p as u64, q_out as u64, pe_count)
}

/// Partial transform applications, split by where they ran.
#[derive(Default)]
struct Tally {
    input_partials: u64,
    pe_partials: u64,
    edge_partials: u64,
    tile_transforms: u64,
    pe_items: u64,
}

#[inline(always)]
fn column_partials(t: &mut Tile) {
    for col in 0..2 {
        let o = partial_col_transform([t[col], t[2 + col], t[4 + col], t[6 + col]]);
        t[col] = o[0];
        t[2 + col] = o[1];
        t[4 + col] = o[2];
        t[6 + col] = o[3];
    }
}

#[inline(always)]
fn row_partials(left: &Tile, right: &Tile) -> [f32; 16] {
    let mut v = [0.0f32; 16];
    for r in 0..4 {
        let o = partial_col_transform([left[r * 2], left[r * 2 + 1], right[r * 2], right[r * 2 + 1]]);
        v[r * 4..r * 4 + 4].copy_from_slice(&o);
    }
    v
}

#[inline(always)]
fn full_transform(left: &Tile, right: &Tile) -> [f32; 16] {
    let (mut l, mut r) = (*left, *right);
    column_partials(&mut l);
    column_partials(&mut r);
    row_partials(&l, &r)
}

/// `Aᵀ (U ⊙ V) A` for one tile, as `[y00, y01, y10, y11]`.
#[inline(always)]
fn product_output_transform(u: &[f32; 16], v: &[f32; 16]) -> [f32; 4] {
    let m: [f32; 16] = std::array::from_fn(|e| u[e] * v[e]);
    let r0: [f32; 4] = std::array::from_fn(|c| m[c] + m[4 + c] + m[8 + c]);
    let r1: [f32; 4] = std::array::from_fn(|c| m[4 + c] - m[8 + c] - m[12 + c]);
    [
        r0[0] + r0[1] + r0[2],
        r0[1] - r0[2] - r0[3],
        r1[0] + r1[1] + r1[2],
        r1[1] - r1[2] - r1[3],
    ]
}

/// One processing-element step: `acc += Aᵀ (U ⊙ V) A` for the tile formed by
/// `left` and its right-hand neighbour.
///
/// What the pair holds depends on the strategy: raw tiles (Case 2), tiles
/// whose columns the input stage already transformed (Case 3), or the two
/// column halves of the fully transformed tile (Case 1).
pub fn pe_compute(
    left: &Tile,
    right: &Tile,
    u: &[f32; 16],
    strategy: Strategy,
    acc: &mut [f32; 4],
    counters: Option<&mut OpCounters>,
) {
    let (v, pe_partials) = match strategy {
        Strategy::FullPreTransform => {
            let mut v = [0.0f32; 16];
            for r in 0..4 {
                v[r * 4..r * 4 + 2].copy_from_slice(&left[r * 2..r * 2 + 2]);
                v[r * 4 + 2..r * 4 + 4].copy_from_slice(&right[r * 2..r * 2 + 2]);
            }
            (v, 0)
        }
        Strategy::FullInPe => (full_transform(left, right), 8),
        Strategy::PartialInPe => (row_partials(left, right), 4),
    };
    let y = product_output_transform(u, &v);
    for (a, b) in acc.iter_mut().zip(y) {
        *a += b;
    }
    if let Some(c) = counters {
        c.pe_transform_adds += pe_partials * ADDS_PER_PARTIAL;
        c.multiplications += 16;
        c.output_transform_adds += 24;
        c.accumulate_adds += 4;
        c.pe_loads[0] += 1;
    }
}

/// Per-strip working memory, reused across strips and images.
pub(crate) struct StripScratch {
    tiles: Vec<Tile>,
    /// Transformed tiles of the strip, one array per element (`v[e * q_out + j]`).
    v: Vec<f32>,
    /// Accumulators per output map, four arrays of `q_out` each.
    acc: Vec<f32>,
}

/// A prepared 3×3, stride-1, pad-1 convolution layer with its filters
/// transformed ahead of time.
#[derive(Clone, Debug)]
pub struct WinogradConv {
    bank: TransformedFilterBank,
    bias: Option<Vec<f32>>,
    strategy: Strategy,
}

impl WinogradConv {
    pub fn new(
        weights: &Tensor4D,
        bias: Option<&[f32]>,
        strategy: Strategy,
    ) -> Result<Self, WinogradError> {
        let bank = transform_filter_bank(weights, &standard_matrices())?;
        if let Some(b) = bias {
            if b.len() != bank.out_channels() {
                return Err(WinogradError::BiasLength {
                    got: b.len(),
                    expected: bank.out_channels(),
                });
            }
        }
        Ok(Self {
            bank,
            bias: bias.map(<[f32]>::to_vec),
            strategy,
        })
    }

    /// Reject convolution parameters the engine cannot run.
    pub fn check_spec(spec: &ConvSpec) -> Result<(), WinogradError> {
        if spec.kernel_h != 3 || spec.kernel_w != 3 {
            return Err(WinogradError::Unsupported(format!(
                "kernel {}x{} (only 3x3 is supported)",
                spec.kernel_h, spec.kernel_w
            )));
        }
        if spec.stride != 1 {
            return Err(WinogradError::Unsupported(format!("stride {}", spec.stride)));
        }
        if spec.pad != 1 {
            return Err(WinogradError::Unsupported(format!("padding {}", spec.pad)));
        }
        Ok(())
    }

    pub fn bank(&self) -> &TransformedFilterBank {
        &self.bank
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn out_channels(&self) -> usize {
        self.bank.out_channels()
    }

    pub fn in_channels(&self) -> usize {
        self.bank.in_channels()
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape, WinogradError> {
        if input.c != self.in_channels() {
            return Err(WinogradError::ChannelMismatch {
                input: input.c,
                weights: self.in_channels(),
            });
        }
        Ok(Shape::new(input.n, self.out_channels(), input.h, input.w))
    }

    /// Tile rows of the conv-padded plane for an `h`-row input.
    pub fn strips(h: usize) -> usize {
        tile_rows(h + 2)
    }

    pub(crate) fn scratch(&self, w: usize) -> StripScratch {
        let q_valid = valid_tiles_per_row(w + 2);
        let q_out = w.div_ceil(2);
        StripScratch {
            tiles: vec![[0.0; 8]; q_valid],
            v: vec![0.0; 16 * q_out],
            acc: vec![0.0; self.out_channels() * 4 * q_out],
        }
    }

    pub fn forward(
        &self,
        input: &Tensor4D,
        counters: Option<&mut OpCounters>,
    ) -> Result<Tensor4D, WinogradError> {
        let os = self.output_shape(input.shape())?;
        let mut out = vec![0.0f32; os.len()];
        self.forward_images(input.data(), input.shape(), &mut out, counters);
        Ok(Tensor4D::from_vec(os, out)?)
    }

    /// Convolve `shape.n` images stored contiguously in `input` into `out`.
    pub(crate) fn forward_images(
        &self,
        input: &[f32],
        shape: Shape,
        out: &mut [f32],
        counters: Option<&mut OpCounters>,
    ) {
        let (h, w, k) = (shape.h, shape.w, self.out_channels());
        let in_len = shape.image_len();
        let out_len = k * h * w;
        debug_assert_eq!(input.len(), shape.n * in_len);
        debug_assert_eq!(out.len(), shape.n * out_len);
        let mut scratch = self.scratch(w);
        let mut tally = Tally::default();
        let pe_count = counters.as_ref().map_or(1, |c| c.pe_count());
        let mut pe_windows = vec![0u64; pe_count];
        let q_out = w.div_ceil(2);
        for (image, dst) in input.chunks_exact(in_len).zip(out.chunks_exact_mut(out_len)) {
            for i in 0..Self::strips(h) {
                self.strip(image, h, w, i, &mut scratch, &mut tally);
                self.write_strip(&scratch, h, w, i, dst, 0);
                for j in 0..q_out {
                    pe_windows[(i * q_out + j) % pe_count] += 1;
                }
            }
        }
        if let Some(c) = counters {
            let items_per_window = (self.in_channels() * k) as u64;
            let mut run = OpCounters::new(pe_count);
            run.tile_transforms = tally.tile_transforms;
            run.input_stage_adds = tally.input_partials * ADDS_PER_PARTIAL;
            run.pe_transform_adds = tally.pe_partials * ADDS_PER_PARTIAL;
            run.edge_column_adds = tally.edge_partials * ADDS_PER_PARTIAL;
            run.multiplications = tally.pe_items * 16;
            run.output_transform_adds = tally.pe_items * 24;
            run.accumulate_adds = tally.pe_items * 4;
            for (load, windows) in run.pe_loads.iter_mut().zip(&pe_windows) {
                *load = windows * items_per_window;
            }
            c.merge(&run);
        }
    }

    /// Compute output rows `2i` and `2i + 1` of one image for every output map
    /// into `scratch.acc`. Reads input rows `2i - 1 ..= 2i + 2` only.
    fn strip(
        &self,
        image: &[f32],
        h: usize,
        w: usize,
        i: usize,
        scratch: &mut StripScratch,
        tally: &mut Tally,
    ) {
        let q_out = w.div_ceil(2);
        let q_valid = scratch.tiles.len();
        scratch.acc.fill(0.0);
        for c in 0..self.in_channels() {
            let plane = &image[c * h * w..(c + 1) * h * w];

            // Input stage: the tile row, read from the plane as if it carried
            // one ring of zero padding.
            for (t, tile) in scratch.tiles.iter_mut().enumerate() {
                *tile = [0.0; 8];
                for r in 0..4 {
                    let y = (2 * i + r) as isize - 1;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let row = &plane[y as usize * w..(y as usize + 1) * w];
                    for col in 0..2 {
                        let x = (2 * t + col) as isize - 1;
                        if x >= 0 && x < w as isize {
                            tile[r * 2 + col] = row[x as usize];
                        }
                    }
                }
            }
            match self.strategy {
                Strategy::FullPreTransform => {
                    for j in 0..q_out {
                        let v = full_transform(&scratch.tiles[j], &scratch.tiles[j + 1]);
                        scatter(&mut scratch.v, q_out, j, &v);
                    }
                    tally.input_partials += 8 * q_out as u64;
                }
                Strategy::FullInPe => {
                    for j in 0..q_out {
                        let v = full_transform(&scratch.tiles[j], &scratch.tiles[j + 1]);
                        scatter(&mut scratch.v, q_out, j, &v);
                    }
                    tally.pe_partials += 8 * q_out as u64;
                }
                Strategy::PartialInPe => {
                    for tile in scratch.tiles.iter_mut() {
                        column_partials(tile);
                    }
                    tally.input_partials += 2 * q_out as u64;
                    tally.edge_partials += 2 * (q_valid - q_out) as u64;
                    for j in 0..q_out {
                        let v = row_partials(&scratch.tiles[j], &scratch.tiles[j + 1]);
                        scatter(&mut scratch.v, q_out, j, &v);
                    }
                    tally.pe_partials += 4 * q_out as u64;
                }
            }
            tally.tile_transforms += q_out as u64;

            // Compute stage: every output map consumes the same transformed tiles.
            for k in 0..self.out_channels() {
                let acc = &mut scratch.acc[k * 4 * q_out..(k + 1) * 4 * q_out];
                accumulate(self.bank.block(k, c), &scratch.v, acc, q_out);
            }
            tally.pe_items += (self.out_channels() * q_out) as u64;
        }
    }

    /// Output stage: add bias and copy the strip's valid rows and columns into
    /// `dst`, a `k`-plane buffer whose first row is output row `row_offset`.
    fn write_strip(
        &self,
        scratch: &StripScratch,
        h: usize,
        w: usize,
        i: usize,
        dst: &mut [f32],
        row_offset: usize,
    ) {
        let q_out = w.div_ceil(2);
        let rows_per_plane = dst.len() / self.out_channels() / w;
        for k in 0..self.out_channels() {
            let b = self.bias.as_ref().map_or(0.0, |b| b[k]);
            let acc = &scratch.acc[k * 4 * q_out..(k + 1) * 4 * q_out];
            let plane = &mut dst[k * rows_per_plane * w..(k + 1) * rows_per_plane * w];
            for dy in 0..2 {
                let y = 2 * i + dy;
                if y >= h {
                    break;
                }
                let row = &mut plane[(y - row_offset) * w..(y - row_offset + 1) * w];
                for (x, o) in row.iter_mut().enumerate() {
                    let (j, dx) = (x / 2, x % 2);
                    *o = acc[(dy * 2 + dx) * q_out + j] + b;
                }
            }
        }
    }

    /// Output rows `2i .. min(2i + 2, h)` of one image as a `k × rows × w`
    /// block. `image` only needs input rows up to `2i + 2` populated.
    pub(crate) fn forward_strip(
        &self,
        image: &[f32],
        h: usize,
        w: usize,
        i: usize,
        scratch: &mut StripScratch,
    ) -> Vec<f32> {
        let mut tally = Tally::default();
        self.strip(image, h, w, i, scratch, &mut tally);
        let rows = (h - 2 * i).min(2);
        let mut out = vec![0.0f32; self.out_channels() * rows * w];
        self.write_strip(scratch, h, w, i, &mut out, 2 * i);
        out
    }
}

#[inline(always)]
fn scatter(v: &mut [f32], q_out: usize, j: usize, tile: &[f32; 16]) {
    for (e, &x) in tile.iter().enumerate() {
        v[e * q_out + j] = x;
    }
}

/// `acc[j] += Aᵀ (U ⊙ V_j) A` over a strip of `n` transformed tiles.
#[inline(never)]
fn accumulate(u: &[f32; 16], v: &[f32], acc: &mut [f32], n: usize) {
    let v: [&[f32]; 16] = std::array::from_fn(|e| &v[e * n..(e + 1) * n]);
    let (a0, rest) = acc.split_at_mut(n);
    let (a1, rest) = rest.split_at_mut(n);
    let (a2, a3) = rest.split_at_mut(n);
    let a3 = &mut a3[..n];
    for j in 0..n {
        let m: [f32; 16] = std::array::from_fn(|e| u[e] * v[e][j]);
        let r0: [f32; 4] = std::array::from_fn(|c| m[c] + m[4 + c] + m[8 + c]);
        let r1: [f32; 4] = std::array::from_fn(|c| m[4 + c] - m[8 + c] - m[12 + c]);
        a0[j] += r0[0] + r0[1] + r0[2];
        a1[j] += r0[1] - r0[2] - r0[3];
        a2[j] += r1[0] + r1[1] + r1[2];
        a3[j] += r1[1] - r1[2] - r1[3];
    }
}

/// Same-size 3×3 convolution through the Winograd engine.
///
/// Weights are `k × c × 3 × 3`; the filters are transformed on every call,
/// use [`WinogradConv`] to transform them once.
pub fn conv3x3_winograd(
    input: &Tensor4D,
    weights: &Tensor4D,
    bias: Option<&[f32]>,
    strategy: Strategy,
    counters: Option<&mut OpCounters>,
) -> Result<Tensor4D, WinogradError> {
    let ws = weights.shape();
    if ws.c != input.shape().c {
        return Err(WinogradError::ChannelMismatch {
            input: input.shape().c,
            weights: ws.c,
        });
    }
    WinogradConv::new(weights, bias, strategy)?.forward(input, counters)
}
