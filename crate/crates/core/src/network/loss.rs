use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use super::{DescriptorField, TrainConfig};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// For every anchor row, the closest candidate row that is not one of its
/// positive partners. Ties go to the lower candidate index.
fn mine_hardest(
    anchors: &[usize],
    candidates: &[usize],
    partners: &BTreeMap<usize, BTreeSet<usize>>,
    anchor_rows: &crate::tensor::DenseTensor,
    candidate_rows: &crate::tensor::DenseTensor,
) -> Result<Vec<usize>> {
    anchors
        .iter()
        .map(|&a| {
            let own = &partners[&a];
            let mut best: Option<(f64, usize)> = None;
            for &c in candidates {
                if own.contains(&c) {
                    continue;
                }
                let d = sq_dist(anchor_rows.row(a), candidate_rows.row(c));
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, c));
                }
            }
            best.map(|(_, c)| c)
                .ok_or_else(|| Error::contract("no valid negative candidates for an anchor"))
        })
        .collect()
}

/// Hardest-contrastive loss between descriptor matrices `a` and `b`.
///
/// Positive term: mean of `relu(‖a_i − b_j‖ − m_p)²` over `pairs`. Negative
/// term: for every pair, the anchor on each side is compared with the
/// nearest non-partner among the other side's paired rows, and
/// `relu(m_n − d)²` is averaged; the two sides are averaged with weight ½.
pub fn hardest_contrastive_on_tape(
    tape: &mut Tape,
    a: Var,
    b: Var,
    pairs: &[(usize, usize)],
    cfg: &TrainConfig,
) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::contract("hardest-contrastive loss needs positive pairs"));
    }
    let (va, vb) = (tape.value(a).clone(), tape.value(b).clone());
    if va.cols() != vb.cols() {
        return Err(Error::dim("hardest_contrastive_loss", va.shape(), vb.shape()));
    }
    if pairs.iter().any(|&(i, j)| i >= va.rows() || j >= vb.rows()) {
        return Err(Error::contract("positive pair index out of range"));
    }

    let ia: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let jb: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let mut partners_a: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    let mut partners_b: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for &(i, j) in pairs {
        partners_a.entry(i).or_default().insert(j);
        partners_b.entry(j).or_default().insert(i);
    }
    let cand_b: Vec<usize> = partners_b.keys().copied().collect();
    let cand_a: Vec<usize> = partners_a.keys().copied().collect();
    let neg_for_a = mine_hardest(&ia, &cand_b, &partners_a, &va, &vb)?;
    let neg_for_b = mine_hardest(&jb, &cand_a, &partners_b, &vb, &va)?;

    let dist = |tape: &mut Tape, x: Var, xi: Vec<usize>, y: Var, yi: Vec<usize>| -> Result<Var> {
        let gx = tape.gather_rows(x, Arc::new(xi))?;
        let gy = tape.gather_rows(y, Arc::new(yi))?;
        let diff = tape.sub(gx, gy)?;
        tape.row_norm(diff)
    };

    let d_pos = dist(tape, a, ia.clone(), b, jb.clone())?;
    let shifted = tape.add_scalar(d_pos, -cfg.positive_margin)?;
    let hinge = tape.relu(shifted)?;
    let sq = tape.square(hinge)?;
    let pos = tape.mean(sq)?;

    let neg_term = |tape: &mut Tape, d: Var| -> Result<Var> {
        let flipped = tape.scale(d, -1.0)?;
        let gap = tape.add_scalar(flipped, cfg.negative_margin)?;
        let hinge = tape.relu(gap)?;
        let sq = tape.square(hinge)?;
        tape.mean(sq)
    };
    let d_na = dist(tape, a, ia, b, neg_for_a)?;
    let neg_a = neg_term(tape, d_na)?;
    let d_nb = dist(tape, b, jb, a, neg_for_b)?;
    let neg_b = neg_term(tape, d_nb)?;
    let neg_sum = tape.add(neg_a, neg_b)?;
    let neg = tape.scale(neg_sum, 0.5)?;
    tape.add(pos, neg)
}

pub fn hardest_contrastive_loss(
    a: &DescriptorField,
    b: &DescriptorField,
    pairs: &[(usize, usize)],
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let va = tape.leaf(a.descriptors.clone());
    let vb = tape.leaf(b.descriptors.clone());
    let loss = hardest_contrastive_on_tape(&mut tape, va, vb, pairs, cfg)?;
    Ok(tape.value(loss).data()[0])
}
