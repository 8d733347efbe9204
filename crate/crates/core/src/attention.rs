//! Layer/timestep averaging, class-prompt slicing and self-attention
//! exponentiation.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::store::{resize_spatial, AttentionKind, Container, Grid, RecordDescriptor, RunManifest};
use crate::ClassId;

pub const DEFAULT_SELF_SCALE: u16 = 32;
pub const DEFAULT_CROSS_SCALE: u16 = 16;
pub const DEFAULT_TAU: u32 = 4;

/// Row sums below this are treated as empty when renormalizing.
pub const EMPTY_ROW: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSelect {
    pub self_scale: u16,
    pub cross_scale: u16,
}

impl Default for ScaleSelect {
    fn default() -> Self {
        Self {
            self_scale: DEFAULT_SELF_SCALE,
            cross_scale: DEFAULT_CROSS_SCALE,
        }
    }
}

/// Inclusive timestep window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepRange {
    pub lo: u32,
    pub hi: u32,
}

impl TimestepRange {
    pub fn contains(self, t: u32) -> bool {
        self.lo <= t && t <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerFilter {
    #[default]
    All,
    Only(BTreeSet<u32>),
}

impl LayerFilter {
    pub fn accepts(&self, layer: u32) -> bool {
        match self {
            LayerFilter::All => true,
            LayerFilter::Only(set) => set.contains(&layer),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AggregateOptions {
    pub scales: ScaleSelect,
    /// `None` averages every timestep.
    pub timesteps: Option<TimestepRange>,
    pub layers: LayerFilter,
}

/// Averaged attention for one image.
///
/// Straight out of [`aggregate`], `cross_map` spans every token and
/// `class_ids` is empty; [`class_slice`] reduces it to one column per class.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedAttention {
    pub self_map: Matrix,
    pub cross_map: Matrix,
    pub self_grid: Grid,
    pub cross_grid: Grid,
    pub class_ids: Vec<ClassId>,
}

/// `A*_C` on the self-attention grid, one column per class.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedAttention {
    pub map: Matrix,
    pub class_ids: Vec<ClassId>,
    pub grid: Grid,
}

/// Descriptors matching a selection, in summation order: ascending
/// timestep, then layer.
pub fn select_descriptors<'a>(
    container: &'a Container,
    kind: AttentionKind,
    scale: u16,
    opts: &AggregateOptions,
) -> Vec<&'a RecordDescriptor> {
    let mut picked: Vec<_> = container
        .descriptors()
        .iter()
        .filter(|d| d.kind == kind && d.grid.scale() == scale)
        .filter(|d| opts.timesteps.is_none_or(|r| r.contains(d.timestep)))
        .filter(|d| opts.layers.accepts(d.layer))
        .collect();
    picked.sort_by_key(|d| (d.timestep, d.layer));
    picked
}

fn mean_records(
    container: &Container,
    kind: AttentionKind,
    scale: u16,
    opts: &AggregateOptions,
) -> Result<(Matrix, Grid)> {
    let picked = select_descriptors(container, kind, scale, opts);
    let first = picked.first().ok_or_else(|| Error::EmptySelection {
        kind: kind.name().to_string(),
        scale,
    })?;
    let (grid, cols) = (first.grid, first.cols);
    if let Some(odd) = picked.iter().find(|d| d.grid != grid || d.cols != cols) {
        return Err(Error::Shape(format!(
            "{} disagrees with {} on grid or token count",
            odd.label(),
            first.label()
        )));
    }

    let mut sum = vec![0f64; grid.cells() * cols as usize];
    for desc in &picked {
        let record = container.load(desc)?;
        for (acc, &v) in sum.iter_mut().zip(&record.data) {
            *acc += f64::from(v);
        }
    }
    let count = picked.len() as f64;
    let data = sum.into_iter().map(|v| (v / count) as f32).collect();
    Ok((Matrix::from_vec(grid.cells(), cols as usize, data)?, grid))
}

/// Arithmetic mean of the selected self and cross records, streamed one
/// record at a time. Self records at other scales are ignored.
pub fn aggregate(container: &Container, opts: &AggregateOptions) -> Result<AggregatedAttention> {
    let (self_map, self_grid) =
        mean_records(container, AttentionKind::SelfAttention, opts.scales.self_scale, opts)?;
    let (cross_map, cross_grid) =
        mean_records(container, AttentionKind::CrossAttention, opts.scales.cross_scale, opts)?;
    Ok(AggregatedAttention {
        self_map,
        cross_map,
        self_grid,
        cross_grid,
        class_ids: Vec::new(),
    })
}

/// Restricts the cross map to the class-name tokens.
///
/// Each class column is the mean of the token columns in its span; rows are
/// then renormalized, and rows with (near) zero mass become uniform.
pub fn class_slice(agg: &AggregatedAttention, manifest: &RunManifest) -> Result<AggregatedAttention> {
    let tokens = agg.cross_map.cols();
    manifest.check_spans(tokens as u32)?;
    let classes = &manifest.classes;
    if classes.is_empty() {
        return Err(Error::Manifest("manifest lists no classes".into()));
    }

    let rows = agg.cross_map.rows();
    let mut out = Matrix::zeros(rows, classes.len());
    for r in 0..rows {
        let row = agg.cross_map.row(r);
        let mut pooled: Vec<f64> = classes
            .iter()
            .map(|c| {
                let span = &row[c.token_span.start as usize..c.token_span.end as usize];
                span.iter().map(|&v| f64::from(v)).sum::<f64>() / span.len() as f64
            })
            .collect();
        let total: f64 = pooled.iter().sum();
        if total < EMPTY_ROW {
            pooled.fill(1.0 / classes.len() as f64);
        } else {
            pooled.iter_mut().for_each(|v| *v /= total);
        }
        for (dst, v) in out.row_mut(r).iter_mut().zip(pooled) {
            *dst = v as f32;
        }
    }
    Ok(AggregatedAttention {
        self_map: agg.self_map.clone(),
        cross_map: out,
        self_grid: agg.self_grid,
        cross_grid: agg.cross_grid,
        class_ids: manifest.class_ids(),
    })
}

fn stochastic_product(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut p = a.matmul(b)?;
    p.renormalize_rows(EMPTY_ROW);
    Ok(p)
}

/// `matrix^tau` by repeated squaring, renormalizing rows after every
/// product. `tau = 0` gives the identity.
pub fn self_power(matrix: &Matrix, tau: u32) -> Result<Matrix> {
    if !matrix.is_square() {
        return Err(Error::Shape(format!(
            "self-attention power needs a square matrix, got {}x{}",
            matrix.rows(),
            matrix.cols()
        )));
    }
    let mut result: Option<Matrix> = None;
    let mut base = matrix.clone();
    let mut remaining = tau;
    while remaining > 0 {
        if remaining & 1 == 1 {
            result = Some(match result {
                None => base.clone(),
                Some(acc) => stochastic_product(&acc, &base)?,
            });
        }
        remaining >>= 1;
        if remaining > 0 {
            base = stochastic_product(&base, &base)?;
        }
    }
    Ok(result.unwrap_or_else(|| Matrix::identity(matrix.rows())))
}

/// Brings the class-sliced cross map onto the self grid, rows renormalized.
pub fn cross_on_self_grid(agg: &AggregatedAttention) -> Result<Matrix> {
    let mut resized = resize_spatial(&agg.cross_map, agg.cross_grid, agg.self_grid)?;
    resized.renormalize_rows(EMPTY_ROW);
    Ok(resized)
}

/// `A*_C = A_S^tau · A_C` on the self grid.
pub fn refine(agg: &AggregatedAttention, tau: u32) -> Result<RefinedAttention> {
    if agg.class_ids.is_empty() || agg.cross_map.cols() != agg.class_ids.len() {
        return Err(Error::Contract(
            "refine needs a class-sliced cross map".into(),
        ));
    }
    let cross = cross_on_self_grid(agg)?;
    if cross.rows() != agg.self_map.rows() {
        return Err(Error::Shape(format!(
            "resized cross map has {} rows, self map {}",
            cross.rows(),
            agg.self_map.rows()
        )));
    }
    let map = if tau == 0 {
        cross
    } else {
        let power = self_power(&agg.self_map, tau)?;
        stochastic_product(&power, &cross)?
    };
    Ok(RefinedAttention {
        map,
        class_ids: agg.class_ids.clone(),
        grid: agg.self_grid,
    })
}
