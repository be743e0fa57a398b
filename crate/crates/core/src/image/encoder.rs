use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Image;
use crate::autodiff::{Binder, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Widths of the three stride-2 blocks and of the output projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEncoderConfig {
    pub block_channels: [usize; 3],
    pub feature_dim: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        Self {
            block_channels: [16, 32, 32],
            feature_dim: 32,
        }
    }
}

impl ImageEncoderConfig {
    pub fn param_count(&self) -> usize {
        let [a, b, c] = self.block_channels;
        9 * (3 * a + a * b + b * c) + a + b + c + c * self.feature_dim + self.feature_dim
    }
}

/// Image features at 1/8 resolution, one row per grid cell in row-major
/// order.
#[derive(Clone, Debug)]
pub struct ImageFeatures {
    pub feats: DenseTensor,
    /// `(rows, cols)` of the cell grid.
    pub grid: (usize, usize),
}

impl ImageFeatures {
    pub fn cell(&self, row: usize) -> (usize, usize) {
        (row / self.grid.1, row % self.grid.1)
    }
}

pub fn register_image_encoder<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &ImageEncoderConfig,
    rng: &mut R,
) -> Result<()> {
    let mut c_in = 3;
    for (i, &c_out) in cfg.block_channels.iter().enumerate() {
        let bound = (6.0 / (9 * c_in) as f64).sqrt();
        store.register(
            format!("{prefix}conv{}.kernel", i + 1),
            DenseTensor::uniform(&[3, 3, c_in, c_out], -bound, bound, rng),
        )?;
        store.register(
            format!("{prefix}conv{}.bias", i + 1),
            DenseTensor::zeros(&[c_out]),
        )?;
        c_in = c_out;
    }
    let bound = (3.0 / c_in as f64).sqrt();
    store.register(
        format!("{prefix}proj.weight"),
        DenseTensor::uniform(&[c_in, cfg.feature_dim], -bound, bound, rng),
    )?;
    store.register(
        format!("{prefix}proj.bias"),
        DenseTensor::zeros(&[cfg.feature_dim]),
    )?;
    Ok(())
}

/// Three stride-2 3×3 conv + ReLU blocks, then a per-cell projection.
/// Returns an `(H/8·W/8) × feature_dim` matrix and the cell grid.
pub fn encode_on_tape(
    tape: &mut Tape,
    binder: &mut Binder,
    prefix: &str,
    cfg: &ImageEncoderConfig,
    img: &Image,
) -> Result<(Var, (usize, usize))> {
    if !img.width().is_multiple_of(8) || !img.height().is_multiple_of(8) {
        return Err(Error::contract(format!(
            "image {}x{} is not divisible by 8",
            img.width(),
            img.height()
        )));
    }
    let input = DenseTensor::new(vec![img.height(), img.width(), 3], img.pixels().to_vec())?;
    let mut x = tape.leaf(input);
    let (mut h, mut w) = (img.height(), img.width());
    for (i, &c) in cfg.block_channels.iter().enumerate() {
        let k = binder.named(tape, &format!("{prefix}conv{}.kernel", i + 1))?;
        let b = binder.named(tape, &format!("{prefix}conv{}.bias", i + 1))?;
        let y = tape.conv2d(x, k, 2)?;
        h /= 2;
        w /= 2;
        let flat = tape.reshape(y, &[h * w, c])?;
        let biased = tape.add_bias(flat, b)?;
        let act = tape.relu(biased)?;
        x = tape.reshape(act, &[h, w, c])?;
    }
    let c = cfg.block_channels[2];
    let flat = tape.reshape(x, &[h * w, c])?;
    let pw = binder.named(tape, &format!("{prefix}proj.weight"))?;
    let pb = binder.named(tape, &format!("{prefix}proj.bias"))?;
    Ok((tape.linear(flat, pw, pb)?, (h, w)))
}

/// Untracked image encoding with frozen weights.
pub fn encode_image(
    store: &ParamStore,
    prefix: &str,
    cfg: &ImageEncoderConfig,
    img: &Image,
) -> Result<ImageFeatures> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(store);
    let (v, grid) = encode_on_tape(&mut tape, &mut binder, prefix, cfg, img)?;
    Ok(ImageFeatures {
        feats: tape.value(v).clone(),
        grid,
    })
}
