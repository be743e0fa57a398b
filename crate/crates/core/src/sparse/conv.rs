use std::collections::HashMap;
use std::sync::Arc;

use super::coords::CoordSet;
use super::kernel_map::{build_kernel_map, KernelMap};
use super::SparseTensor;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// A sparse convolution with its kernel of shape `[S, C_in, C_out]`.
#[derive(Clone, Debug)]
pub struct SparseConvLayer {
    pub kernel: DenseTensor,
    pub stride: usize,
    pub kernel_extent: usize,
    pub transpose: bool,
}

impl SparseConvLayer {
    pub fn new(kernel: DenseTensor, stride: usize, kernel_extent: usize, transpose: bool) -> Result<Self> {
        if kernel_extent.is_multiple_of(2) || kernel_extent == 0 {
            return Err(Error::contract(format!(
                "kernel extent {kernel_extent} must be odd"
            )));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::contract(format!("unsupported stride {stride}")));
        }
        let ks = kernel.shape();
        if ks.len() != 3 || ks[0] != kernel_extent.pow(3) || ks[1] == 0 || ks[2] == 0 {
            return Err(Error::dim("SparseConvLayer", &[kernel_extent.pow(3)], ks));
        }
        Ok(Self {
            kernel,
            stride,
            kernel_extent,
            transpose,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[2]
    }
}

/// Sparse tensor whose features live on a tape.
#[derive(Clone, Debug)]
pub struct SparseVar {
    pub coords: Arc<CoordSet>,
    pub feats: Var,
}

/// Kernel maps built during one forward pass, keyed by the coordinate sets
/// they connect. A strided convolution and its mirrored transposed
/// convolution share one entry.
#[derive(Default)]
pub struct MapCache {
    maps: HashMap<(usize, usize, usize), Arc<KernelMap>>,
}

impl MapCache {
    pub fn get(&mut self, inp: &Arc<CoordSet>, out: &Arc<CoordSet>, extent: usize) -> Arc<KernelMap> {
        let key = (Arc::as_ptr(inp) as usize, Arc::as_ptr(out) as usize, extent);
        self.maps
            .entry(key)
            .or_insert_with(|| Arc::new(build_kernel_map(inp, out, extent)))
            .clone()
    }
}

/// Strided or stride-1 sparse convolution. Output coordinates are the input
/// coordinates (stride 1) or their unique downsampled set (stride 2), unless
/// `out_coords` is given.
pub fn conv_on_tape(
    tape: &mut Tape,
    inp: &SparseVar,
    kernel: Var,
    extent: usize,
    stride: usize,
    out_coords: Option<Arc<CoordSet>>,
    cache: &mut MapCache,
) -> Result<SparseVar> {
    let out = match (out_coords, stride) {
        (Some(c), _) => c,
        (None, 1) => inp.coords.clone(),
        (None, 2) => Arc::new(inp.coords.downsample()),
        (None, s) => return Err(Error::contract(format!("unsupported stride {s}"))),
    };
    let ch_in = tape.value(inp.feats).cols();
    let ks = tape.value(kernel).shape();
    if ks.len() != 3 || ks[1] != ch_in {
        return Err(Error::dim("sparse_conv channels", &[ch_in], ks));
    }
    let map = cache.get(&inp.coords, &out, extent);
    let feats = tape.sparse_conv(inp.feats, kernel, map, false)?;
    Ok(SparseVar { coords: out, feats })
}

/// Adjoint of [`conv_on_tape`] onto `target` coordinates (the matching
/// encoder level).
pub fn transpose_conv_on_tape(
    tape: &mut Tape,
    inp: &SparseVar,
    kernel: Var,
    extent: usize,
    target: Arc<CoordSet>,
    cache: &mut MapCache,
) -> Result<SparseVar> {
    if target.is_empty() {
        return Err(Error::contract(
            "transpose convolution target coordinates are empty",
        ));
    }
    let ratio = inp.coords.stride() / target.stride();
    if ratio != 1 && ratio != 2 || target.stride() * ratio != inp.coords.stride() {
        return Err(Error::contract(format!(
            "cannot transpose from stride {} to stride {}",
            inp.coords.stride(),
            target.stride()
        )));
    }
    let ch_in = tape.value(inp.feats).cols();
    let ks = tape.value(kernel).shape();
    if ks.len() != 3 || ks[1] != ch_in {
        return Err(Error::dim("sparse_transpose_conv channels", &[ch_in], ks));
    }
    let map = cache.get(&target, &inp.coords, extent);
    let feats = tape.sparse_conv(inp.feats, kernel, map, true)?;
    Ok(SparseVar {
        coords: target,
        feats,
    })
}

/// Channel concatenation of two tensors on the same coordinates.
pub fn skip_concat_on_tape(tape: &mut Tape, a: &SparseVar, b: &SparseVar) -> Result<SparseVar> {
    if !Arc::ptr_eq(&a.coords, &b.coords) && *a.coords != *b.coords {
        return Err(Error::Alignment(format!(
            "{} voxels at stride {} vs {} voxels at stride {}",
            a.coords.len(),
            a.coords.stride(),
            b.coords.len(),
            b.coords.stride()
        )));
    }
    let feats = tape.concat_cols(a.feats, b.feats)?;
    Ok(SparseVar {
        coords: a.coords.clone(),
        feats,
    })
}

fn run<F>(inp: &SparseTensor, kernel: &DenseTensor, f: F) -> Result<SparseTensor>
where
    F: FnOnce(&mut Tape, &SparseVar, Var, &mut MapCache) -> Result<SparseVar>,
{
    let mut tape = Tape::new();
    let x = SparseVar {
        coords: inp.coords.clone(),
        feats: tape.leaf(inp.feats.clone()),
    };
    let k = tape.leaf(kernel.clone());
    let out = f(&mut tape, &x, k, &mut MapCache::default())?;
    SparseTensor::new(out.coords, tape.value(out.feats).clone(), inp.voxel_size)
}

/// Untracked sparse convolution.
pub fn sparse_conv(inp: &SparseTensor, layer: &SparseConvLayer) -> Result<SparseTensor> {
    if inp.channels() != layer.in_channels() {
        return Err(Error::dim(
            "sparse_conv channels",
            &[inp.channels()],
            layer.kernel.shape(),
        ));
    }
    run(inp, &layer.kernel, |tape, x, k, cache| {
        conv_on_tape(tape, x, k, layer.kernel_extent, layer.stride, None, cache)
    })
}

/// Untracked transposed sparse convolution onto `target`.
pub fn sparse_transpose_conv(
    inp: &SparseTensor,
    layer: &SparseConvLayer,
    target: Arc<CoordSet>,
) -> Result<SparseTensor> {
    if inp.channels() != layer.in_channels() {
        return Err(Error::dim(
            "sparse_transpose_conv channels",
            &[inp.channels()],
            layer.kernel.shape(),
        ));
    }
    run(inp, &layer.kernel, |tape, x, k, cache| {
        transpose_conv_on_tape(tape, x, k, layer.kernel_extent, target, cache)
    })
}

/// Untracked channel concatenation.
pub fn skip_concat(a: &SparseTensor, b: &SparseTensor) -> Result<SparseTensor> {
    if *a.coords != *b.coords {
        return Err(Error::Alignment("coordinate sets differ".into()));
    }
    let mut tape = Tape::new();
    let av = SparseVar {
        coords: a.coords.clone(),
        feats: tape.leaf(a.feats.clone()),
    };
    let bv = SparseVar {
        coords: b.coords.clone(),
        feats: tape.leaf(b.feats.clone()),
    };
    let out = skip_concat_on_tape(&mut tape, &av, &bv)?;
    SparseTensor::new(out.coords, tape.value(out.feats).clone(), a.voxel_size)
}
