//! Central finite-difference oracle for analytic gradients.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Binder, ParamId, ParamStore, Tape, Var};
use crate::error::Result;
use crate::tensor::DenseTensor;

/// Outcome of comparing analytic gradients to central differences.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FdReport {
    /// Largest per-entry relative discrepancy.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub entries_checked: usize,
}

/// Per-entry relative error, with the denominator floored at a thousandth of
/// the gradient's largest magnitude so entries that are zero up to rounding
/// are not blown up.
pub fn relative_discrepancy(analytic: &[f64], numeric: &[f64]) -> FdReport {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    let mut report = FdReport {
        entries_checked: analytic.len(),
        ..Default::default()
    };
    for (a, n) in analytic.iter().zip(numeric) {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(floor);
        report.max_abs_err = report.max_abs_err.max(abs);
        report.max_rel_err = report.max_rel_err.max(rel);
    }
    report
}

/// Fixed projection that turns any output into a scalar: `Σ out ∘ R`.
fn reduce(tape: &mut Tape, out: Var) -> Result<Var> {
    if tape.value(out).is_scalar() {
        return Ok(out);
    }
    let shape = tape.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let w = Arc::new(DenseTensor::uniform(&shape, -1.0, 1.0, &mut rng));
    let weighted = tape.weighted(out, w)?;
    tape.sum(weighted)
}

/// Compares the tape gradient of `f` at `x` with central differences.
///
/// Non-scalar outputs are reduced with a fixed random projection first.
pub fn finite_diff_check<F>(f: F, x: &DenseTensor, eps: f64) -> Result<FdReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |input: DenseTensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(input);
        let out = f(&mut tape, v)?;
        let s = reduce(&mut tape, out)?;
        Ok(tape.value(s).data()[0])
    };

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    let s = reduce(&mut tape, out)?;
    let analytic = tape.backward(s)?.get_or_zeros(v, x);

    let mut numeric = vec![0.0; x.numel()];
    for (k, slot) in numeric.iter_mut().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[k] += eps;
        let mut minus = x.clone();
        minus.data_mut()[k] -= eps;
        *slot = (eval(plus)? - eval(minus)?) / (2.0 * eps);
    }
    Ok(relative_discrepancy(analytic.data(), &numeric))
}

/// Finite-difference check of parameter gradients.
///
/// `f` builds a scalar from the bound parameters. At most `max_entries`
/// entries of each parameter are probed, picked with a fixed seed. The
/// relative-error floor is shared by all probed entries, since some
/// parameters (a softmax key bias, say) have an identically zero gradient.
pub fn finite_diff_check_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    f: F,
    eps: f64,
    max_entries: usize,
) -> Result<FdReport>
where
    F: Fn(&mut Tape, &mut Binder) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(s);
        let out = f(&mut tape, &mut binder)?;
        let r = reduce(&mut tape, out)?;
        Ok(tape.value(r).data()[0])
    };

    let mut tape = Tape::new();
    let mut binder = Binder::new(store);
    let out = f(&mut tape, &mut binder)?;
    let s = reduce(&mut tape, out)?;
    let grads = tape.backward(s)?;

    let mut rng = ChaCha8Rng::seed_from_u64(0xfd);
    let mut probe = store.clone();
    let mut a = Vec::new();
    let mut num = Vec::new();
    for &id in ids {
        let value = &store.get(id).value;
        let analytic = match binder.bound(id) {
            Some(v) => grads.get_or_zeros(v, value),
            None => DenseTensor::zeros(value.shape()),
        };
        let n = value.numel();
        let picks: Vec<usize> = if n <= max_entries {
            (0..n).collect()
        } else {
            let mut p = rand::seq::index::sample(&mut rng, n, max_entries).into_vec();
            p.sort_unstable();
            p
        };
        for &k in &picks {
            let orig = value.data()[k];
            probe.get_mut(id).value.data_mut()[k] = orig + eps;
            let fp = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[k] = orig - eps;
            let fm = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[k] = orig;
            a.push(analytic.data()[k]);
            num.push((fp - fm) / (2.0 * eps));
        }
    }
    Ok(relative_discrepancy(&a, &num))
}
