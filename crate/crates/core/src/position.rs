//! Fixed 2D sine positional encoding over the patch grid.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::patchgrid::PatchGrid;

const TEMPERATURE: f64 = 10_000.0;

/// Row-major `num_patches x hidden_dim` encoding.
///
/// The first half of each vector encodes the row, the second half the column.
/// Within a half, even entries are `sin` and odd entries `cos` of the
/// normalized coordinate `2π (i + 1) / n` scaled by geometrically spaced
/// frequencies.
pub fn positional_encoding(grid: &PatchGrid, hidden_dim: usize) -> Result<Vec<f32>> {
    if hidden_dim == 0 || !hidden_dim.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "positional encoding needs a positive even width, got {hidden_dim}"
        )));
    }
    let half = hidden_dim / 2;
    let two_pi = 2.0 * core::f64::consts::PI;
    let mut out = Vec::with_capacity(grid.num_patches() * hidden_dim);
    for p in 0..grid.num_patches() {
        let (row, col) = grid.position(p);
        let y = (row + 1) as f64 / grid.rows() as f64 * two_pi;
        let x = (col + 1) as f64 / grid.cols() as f64 * two_pi;
        for coord in [y, x] {
            for j in 0..half {
                let freq = libm::pow(TEMPERATURE, (2 * (j / 2)) as f64 / half as f64);
                let angle = coord / freq;
                let v = if j % 2 == 0 {
                    libm::sin(angle)
                } else {
                    libm::cos(angle)
                };
                out.push(v as f32);
            }
        }
    }
    Ok(out)
}
