//! Descriptor activation maps: which input regions a single point's
//! descriptor responds to, computed from kernel gradients alone.
//!
//! For the descriptor of query point `q` and each element `i`, the kernel
//! gradient of the target layer is signed by the element's sign, summed
//! over kernel offsets and input channels into per-channel weights, and the
//! weighted target-layer feature map is averaged over channels. Summing
//! over elements and clamping at zero gives the heat map.

mod export;
mod lemma;

pub use export::{heatmap_json, heatmap_ply, knn_indices, write_heatmap, HEAT_KNN};
pub use lemma::{verify_lemma1, Lemma1Report};

use std::sync::Arc;

use serde::Serialize;

use crate::autodiff::{Binder, Tape, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::network::{ForwardTrace, Model, NetworkInput};
use crate::sparse::CoordSet;
use crate::tensor::DenseTensor;

/// Layer whose kernel receives the gradient when none is named.
pub const DEFAULT_TARGET_LAYER: &str = "final";

/// Signed gradient of one descriptor element with respect to a layer kernel.
#[derive(Clone, Debug)]
pub struct KernelGradient {
    /// Shape `[S, C_in, C]`.
    pub g: DenseTensor,
    /// Zero-based descriptor element.
    pub element: usize,
    /// `+1` when the element is strictly positive, `-1` otherwise.
    pub sign_phi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeatMap {
    /// One nonnegative score per target-layer voxel.
    pub scores: Vec<f64>,
    /// Score of the voxel containing each original point.
    pub point_scores: Vec<f64>,
    pub target_layer: String,
    pub query_point: usize,
}

/// One forward pass over a frozen model, reused for every backward pass
/// needed by a heat map.
pub struct DamSession<'m> {
    model: &'m Model,
    tape: Tape,
    trace: ForwardTrace,
    /// Scalar node for every element of the query descriptor.
    elements: Vec<Var>,
    /// `sum_i phi_i d_i` over the query descriptor.
    signed_sum: Var,
    query_point: usize,
    query_row: usize,
    /// Stride-1 voxel coordinate of every original point.
    point_voxels: Vec<[i32; 3]>,
}

impl<'m> DamSession<'m> {
    pub fn new(model: &'m Model, input: &NetworkInput, query_point: usize) -> Result<Self> {
        let origin = input
            .voxels
            .origin_map
            .as_ref()
            .ok_or_else(|| Error::contract("input voxels carry no point membership"))?;
        let n: usize = origin.iter().map(Vec::len).sum();
        if query_point >= n {
            return Err(Error::contract(format!(
                "query point {query_point} out of range for {n} points"
            )));
        }
        let mut point_voxels = vec![[0; 3]; n];
        let mut query_row = None;
        for (row, members) in origin.iter().enumerate() {
            let c = input.voxels.coords.get(row);
            for &p in members {
                point_voxels[p] = c;
                if p == query_point {
                    query_row = Some(row);
                }
            }
        }
        let query_row = query_row.ok_or_else(|| Error::contract("query point has no voxel"))?;
        let mut tape = Tape::new();
        let mut binder = Binder::new(&model.params);
        let trace = model.forward(&mut tape, &mut binder, input)?;
        let elements = (0..model.config.descriptor_dim)
            .map(|i| tape.pick(trace.descriptors, query_row, i))
            .collect::<Result<_>>()?;
        let mut signs = DenseTensor::zeros(tape.value(trace.descriptors).shape());
        for i in 0..model.config.descriptor_dim {
            let d = tape.value(trace.descriptors).row(query_row)[i];
            signs.set(query_row, i, if d > 0.0 { 1.0 } else { -1.0 });
        }
        let weighted = tape.weighted(trace.descriptors, Arc::new(signs))?;
        let signed_sum = tape.sum(weighted)?;
        Ok(Self {
            model,
            tape,
            trace,
            elements,
            signed_sum,
            query_point,
            query_row,
            point_voxels,
        })
    }

    pub fn descriptor_dim(&self) -> usize {
        self.model.config.descriptor_dim
    }

    /// Descriptor of the query point.
    pub fn query_descriptor(&self) -> &[f64] {
        self.tape.value(self.trace.descriptors).row(self.query_row)
    }

    fn layer(&self, name: &str) -> Result<&crate::network::LayerTrace> {
        self.trace
            .layer(name)
            .ok_or_else(|| Error::contract(format!("layer `{name}` has no kernel")))
    }

    /// Output feature map of a layer after its activation.
    pub fn feature_map(&self, target_layer: &str) -> Result<&DenseTensor> {
        Ok(self.tape.value(self.layer(target_layer)?.output.feats))
    }

    /// Voxel coordinates of a layer's output rows.
    pub fn layer_coords(&self, target_layer: &str) -> Result<&CoordSet> {
        Ok(&self.layer(target_layer)?.output.coords)
    }

    pub fn kernel_gradient(&self, element: usize, target_layer: &str) -> Result<KernelGradient> {
        let c = self.descriptor_dim();
        if element >= c {
            return Err(Error::contract(format!(
                "descriptor element {element} out of range for width {c}"
            )));
        }
        let layer = self.layer(target_layer)?;
        let d = self.elements[element];
        let grads = self.tape.backward(d)?;
        let sign_phi = if self.tape.value(d).data()[0] > 0.0 {
            1.0
        } else {
            -1.0
        };
        let mut g = grads.get_or_zeros(layer.kernel, self.tape.value(layer.kernel));
        g.data_mut().iter_mut().for_each(|v| *v *= sign_phi);
        Ok(KernelGradient { g, element, sign_phi })
    }

    pub fn descriptor_activation_map(&self, target_layer: &str) -> Result<HeatMap> {
        let f = self.feature_map(target_layer)?.clone();
        let mut total = vec![0.0; f.rows()];
        for i in 0..self.descriptor_dim() {
            let kg = self.kernel_gradient(i, target_layer)?;
            let x = channel_weights(&kg);
            let dam_i = element_activation(&f, &x)?;
            total.iter_mut().zip(&dam_i).for_each(|(t, v)| *t += v);
        }
        self.finish(total, target_layer)
    }

    /// Same map as [`Self::descriptor_activation_map`] from a single
    /// backward pass.
    ///
    /// Channel weights and the channel mean are linear in the kernel
    /// gradient, so summing the per-element maps equals mapping the
    /// gradient of `sum_i phi_i d_i`. Results agree to rounding.
    pub fn descriptor_activation_map_summed(&self, target_layer: &str) -> Result<HeatMap> {
        let layer = self.layer(target_layer)?;
        let grads = self.tape.backward(self.signed_sum)?;
        let g = grads.get_or_zeros(layer.kernel, self.tape.value(layer.kernel));
        let x = channel_weights(&KernelGradient {
            g,
            element: 0,
            sign_phi: 1.0,
        });
        let total = element_activation(self.feature_map(target_layer)?, &x)?;
        self.finish(total, target_layer)
    }

    fn finish(&self, total: Vec<f64>, target_layer: &str) -> Result<HeatMap> {
        let scores: Vec<f64> = total.into_iter().map(|v| v.max(0.0)).collect();
        let coords = &self.layer(target_layer)?.output.coords;
        let point_scores = self
            .point_voxels
            .iter()
            .map(|&c| coords.find_containing(c).map_or(0.0, |r| scores[r]))
            .collect();
        Ok(HeatMap {
            scores,
            point_scores,
            target_layer: target_layer.to_string(),
            query_point: self.query_point,
        })
    }
}

/// Signed kernel gradient of descriptor element `element` of the query
/// point, from a fresh forward pass.
pub fn kernel_gradient(
    model: &Model,
    points: &[[f64; 3]],
    image: Option<&Image>,
    query_point: usize,
    element: usize,
    target_layer: &str,
) -> Result<KernelGradient> {
    let input = model.prepare(points, image)?;
    DamSession::new(model, &input, query_point)?.kernel_gradient(element, target_layer)
}

/// Sums the kernel gradient over kernel offsets and input channels.
pub fn channel_weights(g: &KernelGradient) -> Vec<f64> {
    let shape = g.g.shape();
    let c = shape[2];
    let mut x = vec![0.0; c];
    for block in g.g.data().chunks_exact(c) {
        x.iter_mut().zip(block).for_each(|(a, b)| *a += b);
    }
    x
}

/// Channel mean of the feature map weighted by `x`.
pub fn element_activation(f: &DenseTensor, x: &[f64]) -> Result<Vec<f64>> {
    if f.cols() != x.len() {
        return Err(Error::dim("element_activation", &[f.cols()], &[x.len()]));
    }
    let c = x.len() as f64;
    Ok((0..f.rows())
        .map(|r| f.row(r).iter().zip(x).map(|(a, b)| a * b).sum::<f64>() / c)
        .collect())
}

pub fn descriptor_activation_map(
    model: &Model,
    points: &[[f64; 3]],
    image: Option<&Image>,
    query_point: usize,
    target_layer: &str,
) -> Result<HeatMap> {
    let input = model.prepare(points, image)?;
    DamSession::new(model, &input, query_point)?.descriptor_activation_map(target_layer)
}
