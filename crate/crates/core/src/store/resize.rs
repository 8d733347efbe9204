//! Corner-aligned bilinear resizing of multi-channel spatial maps.
//!
//! Maps are stored as `cells × channels` row-major matrices, the same layout
//! as attention records: row `y·w + x` holds every channel at pixel `(y, x)`.

use super::record::Grid;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Source sample positions for one output axis: `(lo, hi, weight_hi)`.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            if src == 1 || dst == 1 {
                return (0, 0, 0.0);
            }
            let pos = (i * (src - 1)) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Resizes `data` (`src_h·src_w` rows of `channels` values) to
/// `dst_h × dst_w`, each channel independently.
pub fn resize_channels(
    data: &[f32],
    (src_h, src_w): (usize, usize),
    channels: usize,
    (dst_h, dst_w): (usize, usize),
) -> Vec<f32> {
    assert_eq!(data.len(), src_h * src_w * channels, "map shape");
    if (src_h, src_w) == (dst_h, dst_w) {
        return data.to_vec();
    }
    let ys = axis_taps(src_h, dst_h);
    let xs = axis_taps(src_w, dst_w);
    let mut out = vec![0f32; dst_h * dst_w * channels];
    let at = |y: usize, x: usize, c: usize| f64::from(data[(y * src_w + x) * channels + c]);
    for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
            let base = (oy * dst_w + ox) * channels;
            for c in 0..channels {
                let top = at(y0, x0, c) * (1.0 - wx) + at(y0, x1, c) * wx;
                let bottom = at(y1, x0, c) * (1.0 - wx) + at(y1, x1, c) * wx;
                out[base + c] = (top * (1.0 - wy) + bottom * wy) as f32;
            }
        }
    }
    out
}

/// Resizes a `cells × channels` map from grid `from` to grid `to`.
pub fn resize_spatial(map: &Matrix, from: Grid, to: Grid) -> Result<Matrix> {
    if from.h == 0 || from.w == 0 || to.h == 0 || to.w == 0 {
        return Err(Error::Shape(format!("cannot resize {from} to {to}")));
    }
    if map.rows() != from.cells() {
        return Err(Error::Shape(format!(
            "map has {} rows, grid {from} has {} cells",
            map.rows(),
            from.cells()
        )));
    }
    let data = resize_channels(
        map.as_slice(),
        (usize::from(from.h), usize::from(from.w)),
        map.cols(),
        (usize::from(to.h), usize::from(to.w)),
    );
    Matrix::from_vec(to.cells(), map.cols(), data)
}
