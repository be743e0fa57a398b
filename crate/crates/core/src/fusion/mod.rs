//! Single-head cross-attention between abstract points and image cells.
//!
//! Queries come from the point features and keys/values from the image
//! cells, so each point receives a convex combination of projected image
//! features. That texture is mapped back to the point width by one affine
//! layer and added to the structure feature.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Binder, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySource {
    #[default]
    Points,
    Image,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionPositions {
    #[default]
    Single,
    Three,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub c_t: usize,
    #[serde(default)]
    pub self_attention_layers: usize,
    #[serde(default)]
    pub query_source: QuerySource,
    #[serde(default)]
    pub fusion_positions: FusionPositions,
}

impl FusionConfig {
    pub fn new(c_t: usize) -> Self {
        Self {
            c_t,
            self_attention_layers: 0,
            query_source: QuerySource::Points,
            fusion_positions: FusionPositions::Single,
        }
    }

    pub fn validate(&self, errors: &mut Vec<String>) {
        if self.c_t == 0 {
            errors.push("fusion.c_t must be at least 1".into());
        }
    }

    /// Scalar parameters of one fusion block fusing `c_point`-wide structure
    /// with `c_image`-wide image features.
    pub fn param_count(&self, c_point: usize, c_image: usize) -> usize {
        let ct = self.c_t;
        let cross = (c_point + 1) * ct + 2 * (c_image + 1) * ct + (ct + 1) * c_point;
        let sa = 3 * (c_point + 1) * ct + (ct + 1) * c_point;
        cross + self.self_attention_layers * sa
    }
}

/// Untracked result of one fusion block.
#[derive(Clone, Debug)]
pub struct FusionOutput {
    pub fused: DenseTensor,
    /// `M₄ × M_i` weights applied to the image values.
    pub weights: DenseTensor,
    pub texture: DenseTensor,
}

impl FusionOutput {
    /// Weight dump with one object per point row.
    pub fn weights_json(&self) -> serde_json::Value {
        let rows: Vec<&[f64]> = (0..self.weights.rows()).map(|r| self.weights.row(r)).collect();
        serde_json::json!({
            "points": self.weights.rows(),
            "image_cells": self.weights.cols(),
            "weights": rows,
        })
    }

    pub fn weights_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = (0..self.weights.cols()).map(|c| format!("cell_{c}")).collect();
        let _ = writeln!(out, "point,{}", header.join(","));
        for r in 0..self.weights.rows() {
            let vals: Vec<String> = self.weights.row(r).iter().map(|v| format!("{v:.9e}")).collect();
            let _ = writeln!(out, "{r},{}", vals.join(","));
        }
        out
    }
}

/// Tape handles produced by [`fuse_on_tape`].
#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub fused: Var,
    pub texture: Var,
    pub weights: Var,
}

fn register_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    let bound = (3.0 / fan_in as f64).sqrt();
    store.register(
        format!("{name}.weight"),
        DenseTensor::uniform(&[fan_in, fan_out], -bound, bound, rng),
    )?;
    store.register(format!("{name}.bias"), DenseTensor::zeros(&[fan_out]))?;
    Ok(())
}

/// Registers the projections of one fusion block under `prefix`.
pub fn register_fusion<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &FusionConfig,
    c_point: usize,
    c_image: usize,
    rng: &mut R,
) -> Result<()> {
    let ct = cfg.c_t;
    let (q_in, kv_in) = match cfg.query_source {
        QuerySource::Points => (c_point, c_image),
        QuerySource::Image => (c_image, c_point),
    };
    // With image queries the keys come from points and values stay on the image.
    let v_in = c_image;
    register_linear(store, &format!("{prefix}q"), q_in, ct, rng)?;
    register_linear(store, &format!("{prefix}k"), kv_in, ct, rng)?;
    register_linear(store, &format!("{prefix}v"), v_in, ct, rng)?;
    register_linear(store, &format!("{prefix}out"), ct, c_point, rng)?;
    for l in 0..cfg.self_attention_layers {
        for part in ["q", "k", "v"] {
            register_linear(store, &format!("{prefix}sa{l}.{part}"), c_point, ct, rng)?;
        }
        register_linear(store, &format!("{prefix}sa{l}.out"), ct, c_point, rng)?;
    }
    Ok(())
}

fn apply_linear(tape: &mut Tape, binder: &mut Binder, name: &str, x: Var) -> Result<Var> {
    let w = binder.named(tape, &format!("{name}.weight"))?;
    let b = binder.named(tape, &format!("{name}.bias"))?;
    tape.linear(x, w, b)
}

/// Returns `(Q, K, V)`. With image queries `Q` has one row per image cell
/// and `K` one row per point.
pub fn project_qkv_on_tape(
    tape: &mut Tape,
    binder: &mut Binder,
    prefix: &str,
    cfg: &FusionConfig,
    f_pe: Var,
    f_ie: Var,
) -> Result<(Var, Var, Var)> {
    let (q_src, k_src) = match cfg.query_source {
        QuerySource::Points => (f_pe, f_ie),
        QuerySource::Image => (f_ie, f_pe),
    };
    let q = apply_linear(tape, binder, &format!("{prefix}q"), q_src)?;
    let k = apply_linear(tape, binder, &format!("{prefix}k"), k_src)?;
    let v = apply_linear(tape, binder, &format!("{prefix}v"), f_ie)?;
    Ok((q, k, v))
}

pub fn fuse_on_tape(
    tape: &mut Tape,
    binder: &mut Binder,
    prefix: &str,
    cfg: &FusionConfig,
    f_pe: Var,
    f_ie: Var,
) -> Result<FusionVars> {
    if cfg.c_t == 0 {
        return Err(Error::Config(vec!["fusion.c_t must be at least 1".into()]));
    }
    let scale = (cfg.c_t as f64).sqrt();
    let (q, k, v) = project_qkv_on_tape(tape, binder, prefix, cfg, f_pe, f_ie)?;
    let logits = tape.matmul_nt(q, k)?;
    let soft = tape.row_softmax(logits, scale)?;
    let weights = match cfg.query_source {
        QuerySource::Points => soft,
        QuerySource::Image => tape.transpose(soft)?,
    };
    let wv = tape.matmul(weights, v)?;
    let fi = apply_linear(tape, binder, &format!("{prefix}out"), wv)?;
    let mut fused = tape.add(f_pe, fi)?;
    if cfg.self_attention_layers == 0 {
        return Ok(FusionVars {
            fused,
            texture: fi,
            weights,
        });
    }
    for l in 0..cfg.self_attention_layers {
        let name = format!("{prefix}sa{l}");
        let q = apply_linear(tape, binder, &format!("{name}.q"), fused)?;
        let k = apply_linear(tape, binder, &format!("{name}.k"), fused)?;
        let v = apply_linear(tape, binder, &format!("{name}.v"), fused)?;
        let logits = tape.matmul_nt(q, k)?;
        let w = tape.row_softmax(logits, scale)?;
        let wv = tape.matmul(w, v)?;
        let upd = apply_linear(tape, binder, &format!("{name}.out"), wv)?;
        fused = tape.add(fused, upd)?;
    }
    let texture = tape.sub(fused, f_pe)?;
    Ok(FusionVars {
        fused,
        texture,
        weights,
    })
}

pub fn project_qkv(
    store: &ParamStore,
    prefix: &str,
    cfg: &FusionConfig,
    f_pe: &DenseTensor,
    f_ie: &DenseTensor,
) -> Result<(DenseTensor, DenseTensor, DenseTensor)> {
    check_finite(f_pe, f_ie)?;
    let mut tape = Tape::new();
    let mut binder = Binder::new(store);
    let (p, i) = (tape.leaf(f_pe.clone()), tape.leaf(f_ie.clone()));
    let (q, k, v) = project_qkv_on_tape(&mut tape, &mut binder, prefix, cfg, p, i)?;
    Ok((
        tape.value(q).clone(),
        tape.value(k).clone(),
        tape.value(v).clone(),
    ))
}

/// `row_softmax(Q·Kᵀ / √c_t)`.
pub fn attention_weights(q: &DenseTensor, k: &DenseTensor, c_t: usize) -> Result<DenseTensor> {
    if q.cols() != k.cols() || q.cols() != c_t {
        return Err(Error::dim("attention_weights", q.shape(), k.shape()));
    }
    let mut tape = Tape::new();
    let (qv, kv) = (tape.leaf(q.clone()), tape.leaf(k.clone()));
    let logits = tape.matmul_nt(qv, kv)?;
    let w = tape.row_softmax(logits, (c_t as f64).sqrt())?;
    Ok(tape.value(w).clone())
}

pub fn fuse(
    store: &ParamStore,
    prefix: &str,
    cfg: &FusionConfig,
    f_pe: &DenseTensor,
    f_ie: &DenseTensor,
) -> Result<FusionOutput> {
    check_finite(f_pe, f_ie)?;
    let mut tape = Tape::new();
    let mut binder = Binder::new(store);
    let (p, i) = (tape.leaf(f_pe.clone()), tape.leaf(f_ie.clone()));
    let out = fuse_on_tape(&mut tape, &mut binder, prefix, cfg, p, i)?;
    Ok(FusionOutput {
        fused: tape.value(out.fused).clone(),
        weights: tape.value(out.weights).clone(),
        texture: tape.value(out.texture).clone(),
    })
}

fn check_finite(a: &DenseTensor, b: &DenseTensor) -> Result<()> {
    if a.is_finite() && b.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric("non-finite fusion input"))
    }
}
