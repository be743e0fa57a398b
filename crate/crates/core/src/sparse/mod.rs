//! Sparse voxel tensors and sparse (transposed) convolution.

mod conv;
mod coords;
mod kernel_map;

pub use conv::{
    conv_on_tape, skip_concat, skip_concat_on_tape, sparse_conv, sparse_transpose_conv,
    transpose_conv_on_tape, MapCache, SparseConvLayer, SparseVar,
};
pub use coords::{Coord, CoordSet};
pub use kernel_map::{build_kernel_map, kernel_offsets, KernelMap};

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Voxel coordinates with one feature row per voxel.
#[derive(Clone, Debug)]
pub struct SparseTensor {
    pub coords: Arc<CoordSet>,
    pub feats: DenseTensor,
    pub voxel_size: f64,
    /// For stride-1 tensors built by [`voxelize`]: indices of the input
    /// points each voxel absorbed.
    pub origin_map: Option<Vec<Vec<usize>>>,
}

impl SparseTensor {
    pub fn new(coords: Arc<CoordSet>, feats: DenseTensor, voxel_size: f64) -> Result<Self> {
        if feats.rows() != coords.len() || !feats.is_matrix() {
            return Err(Error::dim("SparseTensor::new", &[coords.len()], feats.shape()));
        }
        Ok(Self {
            coords,
            feats,
            voxel_size,
            origin_map: None,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn stride(&self) -> i32 {
        self.coords.stride()
    }

    pub fn channels(&self) -> usize {
        self.feats.cols()
    }

    /// Mean position (meters) of the points absorbed by each voxel.
    pub fn centroids(&self, points: &[[f64; 3]]) -> Option<Vec<[f64; 3]>> {
        let map = self.origin_map.as_ref()?;
        Some(
            map.iter()
                .map(|members| {
                    let mut c = [0.0; 3];
                    for &i in members {
                        for d in 0..3 {
                            c[d] += points[i][d];
                        }
                    }
                    c.map(|v| v / members.len() as f64)
                })
                .collect(),
        )
    }
}

/// Quantizes points to `floor(p / voxel_size)` and pools their attributes.
///
/// A voxel's feature is the mean attribute row of the points it absorbed, or
/// a single `1.0` column when no attributes are given.
pub fn voxelize(
    points: &[[f64; 3]],
    attributes: Option<&DenseTensor>,
    voxel_size: f64,
) -> Result<SparseTensor> {
    if points.is_empty() {
        return Err(Error::Empty("voxelize: no points"));
    }
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(Error::contract(format!(
            "voxel size must be positive, got {voxel_size}"
        )));
    }
    if let Some(a) = attributes {
        if a.rows() != points.len() {
            return Err(Error::dim("voxelize", &[points.len()], a.shape()));
        }
    }
    let mut cells: BTreeMap<Coord, Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("voxelize"));
        }
        let c = p.map(|v| (v / voxel_size).floor() as i32);
        cells.entry(c).or_default().push(i);
    }
    let width = attributes.map_or(1, DenseTensor::cols);
    let mut feats = DenseTensor::zeros(&[cells.len(), width]);
    let mut coords = Vec::with_capacity(cells.len());
    let mut origin = Vec::with_capacity(cells.len());
    for (row, (c, members)) in cells.into_iter().enumerate() {
        let out = feats.row_mut(row);
        match attributes {
            Some(a) => {
                for &i in &members {
                    for (o, v) in out.iter_mut().zip(a.row(i)) {
                        *o += v;
                    }
                }
                let n = members.len() as f64;
                for o in out.iter_mut() {
                    *o /= n;
                }
            }
            None => out[0] = 1.0,
        }
        coords.push(c);
        origin.push(members);
    }
    let coords = Arc::new(CoordSet::new(1, coords)?);
    let mut t = SparseTensor::new(coords, feats, voxel_size)?;
    t.origin_map = Some(origin);
    Ok(t)
}
