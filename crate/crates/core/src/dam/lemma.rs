use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::sparse::{conv_on_tape, MapCache, SparseConvLayer, SparseTensor, SparseVar};
use crate::tensor::DenseTensor;

#[derive(Clone, Debug, Serialize)]
pub struct Lemma1Report {
    /// Largest gap between the taped kernel gradient and
    /// `sum_n dZ[n][j] * A[n][i]`.
    pub max_discrepancy: f64,
    /// Same gap for the variant that reads `A[n][j]`; only defined when the
    /// layer has no more output than input channels.
    pub alt_index_discrepancy: Option<f64>,
    /// Perturbing output-gradient column `j` left every other kernel
    /// column unchanged and moved column `j`, for every `j`.
    pub column_locality: bool,
    /// Largest change seen outside the perturbed column.
    pub max_off_column_change: f64,
}

struct Pass {
    kernel_grad: DenseTensor,
    out_grad: DenseTensor,
}

fn run(
    layer: &SparseConvLayer,
    input: &SparseTensor,
    loss_fn: &dyn Fn(&mut Tape, Var) -> Result<Var>,
    extra: Option<&DenseTensor>,
) -> Result<Pass> {
    let mut tape = Tape::new();
    let inp = SparseVar {
        coords: input.coords.clone(),
        feats: tape.leaf(input.feats.clone()),
    };
    let kernel = tape.leaf(layer.kernel.clone());
    let mut cache = MapCache::default();
    let z = conv_on_tape(&mut tape, &inp, kernel, 1, 1, None, &mut cache)?;
    let mut loss = loss_fn(&mut tape, z.feats)?;
    if let Some(w) = extra {
        let weighted = tape.weighted(z.feats, Arc::new(w.clone()))?;
        let s = tape.sum(weighted)?;
        loss = tape.add(loss, s)?;
    }
    let grads = tape.backward(loss)?;
    Ok(Pass {
        kernel_grad: grads.get_or_zeros(kernel, &layer.kernel),
        out_grad: grads.get_or_zeros(z.feats, tape.value(z.feats)),
    })
}

/// Checks, on a stride-1 layer with a single-offset kernel, that the kernel
/// gradient is the input-weighted sum of the output gradient and that each
/// kernel column depends only on the matching output-gradient column.
pub fn verify_lemma1<F>(layer: &SparseConvLayer, input: &SparseTensor, loss_fn: F) -> Result<Lemma1Report>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if layer.kernel_extent != 1 || layer.stride != 1 || layer.transpose {
        return Err(Error::contract(
            "the identity is checked on 1x1x1 stride-1 layers only",
        ));
    }
    if input.channels() != layer.in_channels() {
        return Err(Error::dim(
            "verify_lemma1",
            &[layer.in_channels()],
            &[input.channels()],
        ));
    }
    let (cin, c) = (layer.in_channels(), layer.out_channels());
    let a = &input.feats;
    let base = run(layer, input, &loss_fn, None)?;

    let closed = |col_of_a: &dyn Fn(usize, usize) -> usize| -> f64 {
        let mut worst = 0.0f64;
        for i in 0..cin {
            for j in 0..c {
                let ai = col_of_a(i, j);
                let v: f64 = (0..a.rows())
                    .map(|n| base.out_grad.row(n)[j] * a.row(n)[ai])
                    .sum();
                worst = worst.max((v - base.kernel_grad.data()[i * c + j]).abs());
            }
        }
        worst
    };
    let max_discrepancy = closed(&|i, _| i);
    let alt_index_discrepancy = (c <= cin).then(|| closed(&|_, j| j));

    let mut rng = ChaCha8Rng::seed_from_u64(0x1e44a);
    let mut column_locality = true;
    let mut max_off_column_change = 0.0f64;
    for j in 0..c {
        let mut w = DenseTensor::zeros(&[a.rows(), c]);
        for n in 0..a.rows() {
            w.row_mut(n)[j] = rng.random_range(0.5..1.5);
        }
        let pert = run(layer, input, &loss_fn, Some(&w))?;
        let mut moved = false;
        for i in 0..cin {
            for k in 0..c {
                let diff = (pert.kernel_grad.data()[i * c + k] - base.kernel_grad.data()[i * c + k]).abs();
                if k == j {
                    moved |= diff > 0.0;
                } else {
                    max_off_column_change = max_off_column_change.max(diff);
                }
            }
        }
        let a_nonzero = a.data().iter().any(|&v| v != 0.0);
        column_locality &= max_off_column_change == 0.0 && (moved || !a_nonzero);
    }
    Ok(Lemma1Report {
        max_discrepancy,
        alt_index_discrepancy,
        column_locality,
        max_off_column_change,
    })
}
