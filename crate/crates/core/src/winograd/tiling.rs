//! Input-stage tiling: 4-row by 2-column tiles with a vertical stride of two.

/// Tiles per row are padded up to a multiple of this.
pub const TILES_PER_ROW_MULTIPLE: usize = 8;

/// Four rows by two columns, row-major (`tile[row * 2 + col]`).
pub type Tile = [f32; 8];

/// All tiles of one padded plane.
///
/// Tile `(i, j)` covers plane rows `2i..2i+4` and columns `2j..2j+2`; rows
/// are replicated between vertically adjacent tiles, columns never are.
#[derive(Clone, Debug, PartialEq)]
pub struct TileGrid {
    /// Tile rows, one per 2-row output strip.
    pub p: usize,
    /// Tiles per row including zero padding; a multiple of eight.
    pub q: usize,
    /// Tiles per row that overlap the plane (`ceil(width / 2)`).
    pub q_valid: usize,
    pub tiles: Vec<Tile>,
}

impl TileGrid {
    #[inline]
    pub fn tile(&self, i: usize, j: usize) -> &Tile {
        &self.tiles[i * self.q + j]
    }

    /// Output tiles per row; output tile `j` is formed from tiles `j` and `j + 1`.
    pub fn output_tiles_per_row(&self) -> usize {
        self.q_valid.saturating_sub(1).max(1)
    }
}

/// Tile rows needed for a padded plane of height `h` (one per 2-row output strip).
pub(crate) fn tile_rows(padded_h: usize) -> usize {
    padded_h.saturating_sub(2).div_ceil(2).max(1)
}

pub(crate) fn valid_tiles_per_row(padded_w: usize) -> usize {
    padded_w.div_ceil(2).max(2)
}

pub(crate) fn padded_tiles_per_row(padded_w: usize) -> usize {
    valid_tiles_per_row(padded_w).next_multiple_of(TILES_PER_ROW_MULTIPLE)
}

/// Cut an already-padded `h × w` plane into a [`TileGrid`].
///
/// Positions beyond the plane read as zero, so trailing tile rows and the
/// padding tiles at the end of each row hold zeros.
pub fn tile_input(plane: &[f32], h: usize, w: usize) -> TileGrid {
    assert_eq!(plane.len(), h * w, "plane length does not match {h}x{w}");
    let p = tile_rows(h);
    let q_valid = valid_tiles_per_row(w);
    let q = padded_tiles_per_row(w);
    let mut tiles = vec![[0.0f32; 8]; p * q];
    for i in 0..p {
        for r in 0..4 {
            let y = 2 * i + r;
            if y >= h {
                break;
            }
            let row = &plane[y * w..(y + 1) * w];
            for (x, &v) in row.iter().enumerate() {
                tiles[i * q + x / 2][r * 2 + x % 2] = v;
            }
        }
    }
    TileGrid { p, q, q_valid, tiles }
}

/// Reassemble the grid into a `(2p + 2) × 2q` plane, keeping each replicated
/// row pair once.
pub fn detile(grid: &TileGrid) -> (Vec<f32>, usize, usize) {
    let (h, w) = (2 * grid.p + 2, 2 * grid.q);
    let mut plane = vec![0.0f32; h * w];
    for i in 0..grid.p {
        let first_row = if i == 0 { 0 } else { 2 };
        for r in first_row..4 {
            let y = 2 * i + r;
            for j in 0..grid.q {
                let t = grid.tile(i, j);
                plane[y * w + 2 * j] = t[r * 2];
                plane[y * w + 2 * j + 1] = t[r * 2 + 1];
            }
        }
    }
    (plane, h, w)
}
