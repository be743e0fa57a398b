//! The four-level sparse U-Net with optional image fusion at the bottleneck,
//! its hardest-contrastive loss, training loop and checkpoint container.

mod checkpoint;
mod config;
mod loss;
mod train;

pub use checkpoint::{
    load_checkpoint, load_descriptors, read_checkpoint, save_checkpoint, save_descriptors, write_checkpoint,
};
pub use config::{FusionMode, NetworkConfig, TrainConfig};
pub use loss::{hardest_contrastive_loss, hardest_contrastive_on_tape};
pub use train::{positive_pairs, train, TrainReport};

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Binder, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::{fuse_on_tape, register_fusion, FusionConfig, FusionPositions, FusionVars};
use crate::image::{encode_on_tape, register_image_encoder, Image};
use crate::sparse::{
    conv_on_tape, kernel_offsets, skip_concat_on_tape, transpose_conv_on_tape, voxelize, CoordSet, MapCache,
    SparseTensor, SparseVar,
};
use crate::tensor::DenseTensor;

const NORM_EPS: f64 = 1e-6;

/// Per-point descriptors of one cloud at stride-1 voxel resolution.
#[derive(Clone, Debug)]
pub struct DescriptorField {
    pub descriptors: DenseTensor,
    pub coords: Arc<CoordSet>,
    /// Original point indices absorbed by each voxel.
    pub point_map: Vec<Vec<usize>>,
    /// Voxel centroids in meters.
    pub points_xyz: Vec<[f64; 3]>,
}

impl DescriptorField {
    pub fn len(&self) -> usize {
        self.descriptors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.descriptors.cols()
    }
}

/// Voxelized cloud and (cropped) image ready for a forward pass.
#[derive(Clone, Debug)]
pub struct NetworkInput {
    pub voxels: SparseTensor,
    pub points_xyz: Vec<[f64; 3]>,
    pub image: Option<Image>,
}

/// Tape handles of one convolution layer.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub name: &'static str,
    pub input: SparseVar,
    pub kernel: Var,
    pub output: SparseVar,
}

/// Everything a forward pass leaves on the tape.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub descriptors: Var,
    pub coords: Arc<CoordSet>,
    pub layers: Vec<LayerTrace>,
    pub fusion: Vec<(String, FusionVars)>,
}

impl ForwardTrace {
    pub fn layer(&self, name: &str) -> Option<&LayerTrace> {
        self.layers.iter().find(|l| l.name == name)
    }
}

pub const LAYER_NAMES: [&str; 9] = [
    "enc1", "enc2", "enc3", "enc4", "dec4", "dec3", "dec2", "dec1", "final",
];

#[derive(Clone, Debug)]
pub struct Model {
    pub config: NetworkConfig,
    pub params: ParamStore,
}

struct Block {
    name: &'static str,
    c_in: usize,
    c_out: usize,
    extent: usize,
    normed: bool,
}

fn blocks(cfg: &NetworkConfig) -> Vec<Block> {
    let [c1, c2, c3, c4] = cfg.encoder_channels;
    let [d4, d3, d2, d1] = cfg.decoder_channels;
    let k = cfg.kernel_extent;
    let bottleneck = match (cfg.with_fusion, cfg.fusion_mode) {
        (true, FusionMode::Concat) => 2 * c4,
        _ => c4,
    };
    let b = |name, c_in, c_out, extent, normed| Block {
        name,
        c_in,
        c_out,
        extent,
        normed,
    };
    vec![
        b("enc1", 1, c1, k, true),
        b("enc2", c1, c2, k, true),
        b("enc3", c2, c3, k, true),
        b("enc4", c3, c4, k, true),
        b("dec4", bottleneck, d4, k, true),
        b("dec3", d4 + c3, d3, k, true),
        b("dec2", d3 + c2, d2, k, true),
        b("dec1", d2 + c1, d1, k, true),
        b("final", d1, cfg.descriptor_dim, 1, false),
    ]
}

/// Fusion blocks as `(prefix, structure width, config)`.
fn fusion_blocks(cfg: &NetworkConfig) -> Vec<(&'static str, usize, FusionConfig)> {
    if !cfg.with_fusion {
        return Vec::new();
    }
    let mut out = vec![("fusion.", cfg.encoder_channels[3], cfg.fusion.clone())];
    if cfg.fusion.fusion_positions == FusionPositions::Three {
        for (prefix, width) in [
            ("fusion_dec4.", cfg.decoder_channels[0]),
            ("fusion_dec3.", cfg.decoder_channels[1]),
        ] {
            let extra = FusionConfig {
                c_t: (width / 2).max(1),
                self_attention_layers: 0,
                ..cfg.fusion.clone()
            };
            out.push((prefix, width, extra));
        }
    }
    out
}

impl Model {
    /// Builds a model with seeded fan-in-scaled uniform weights.
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for b in blocks(&config) {
            let s = kernel_offsets(b.extent).len();
            let fan_in = s * b.c_in;
            let bound = if b.normed {
                (6.0 / fan_in as f64).sqrt()
            } else {
                (3.0 / fan_in as f64).sqrt()
            };
            params.register(
                format!("{}.kernel", b.name),
                DenseTensor::uniform(&[s, b.c_in, b.c_out], -bound, bound, &mut rng),
            )?;
            if b.normed {
                params.register(format!("{}.gain", b.name), DenseTensor::filled(&[b.c_out], 1.0))?;
            }
            params.register(format!("{}.bias", b.name), DenseTensor::zeros(&[b.c_out]))?;
        }
        if config.with_fusion {
            register_image_encoder(&mut params, "image.", &config.image_encoder, &mut rng)?;
            let ci = config.image_encoder.feature_dim;
            for (prefix, width, fcfg) in fusion_blocks(&config) {
                register_fusion(&mut params, prefix, &fcfg, width, ci, &mut rng)?;
            }
        }
        Ok(Self { config, params })
    }

    /// Voxelizes the cloud with unit point features and crops the image to
    /// multiples of 8.
    pub fn prepare(&self, points: &[[f64; 3]], image: Option<&Image>) -> Result<NetworkInput> {
        if points.is_empty() {
            return Err(Error::contract("cannot extract descriptors of an empty cloud"));
        }
        let image = if self.config.with_fusion {
            let img = image.ok_or_else(|| Error::contract("an image is required when fusion is enabled"))?;
            Some(img.center_crop_to_multiple(8)?)
        } else {
            None
        };
        let voxels = voxelize(points, None, self.config.voxel_size)?;
        let points_xyz = voxels.centroids(points).unwrap_or_default();
        Ok(NetworkInput {
            voxels,
            points_xyz,
            image,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        input: &NetworkInput,
    ) -> Result<ForwardTrace> {
        let cfg = &self.config;
        let specs = blocks(cfg);
        let mut cache = MapCache::default();
        let mut layers = Vec::with_capacity(specs.len());
        let mut fusion = Vec::new();

        let x0 = SparseVar {
            coords: input.voxels.coords.clone(),
            feats: tape.leaf(input.voxels.feats.clone()),
        };

        let image_feats = match (&input.image, cfg.with_fusion) {
            (Some(img), true) => Some(encode_on_tape(tape, binder, "image.", &cfg.image_encoder, img)?.0),
            (None, true) => return Err(Error::contract("an image is required when fusion is enabled")),
            _ => None,
        };

        let mut run = |tape: &mut Tape,
                       binder: &mut Binder,
                       idx: usize,
                       inp: &SparseVar,
                       target: Option<Arc<CoordSet>>,
                       transpose: bool|
         -> Result<SparseVar> {
            let spec = &specs[idx];
            let kernel = binder.named(tape, &format!("{}.kernel", spec.name))?;
            let conv = if transpose {
                let target = target.expect("transpose needs a target");
                transpose_conv_on_tape(tape, inp, kernel, spec.extent, target, &mut cache)?
            } else {
                let stride = if idx == 0 || spec.name == "final" { 1 } else { 2 };
                conv_on_tape(tape, inp, kernel, spec.extent, stride, None, &mut cache)?
            };
            let bias = binder.named(tape, &format!("{}.bias", spec.name))?;
            let feats = if spec.normed {
                let gain = binder.named(tape, &format!("{}.gain", spec.name))?;
                let n = tape.row_scale_norm(conv.feats, NORM_EPS)?;
                let g = tape.mul_row(n, gain)?;
                let b = tape.add_bias(g, bias)?;
                tape.relu(b)?
            } else {
                tape.add_bias(conv.feats, bias)?
            };
            let output = SparseVar {
                coords: conv.coords,
                feats,
            };
            layers.push(LayerTrace {
                name: spec.name,
                input: inp.clone(),
                kernel,
                output: output.clone(),
            });
            Ok(output)
        };

        let e1 = run(tape, binder, 0, &x0, None, false)?;
        let e2 = run(tape, binder, 1, &e1, None, false)?;
        let e3 = run(tape, binder, 2, &e2, None, false)?;
        let e4 = run(tape, binder, 3, &e3, None, false)?;

        let fblocks = fusion_blocks(cfg);
        let mut apply_fusion =
            |tape: &mut Tape, binder: &mut Binder, prefix: &str, x: &SparseVar| -> Result<SparseVar> {
                let (Some(fi), Some((_, _, fcfg))) =
                    (image_feats, fblocks.iter().find(|(p, _, _)| *p == prefix))
                else {
                    return Ok(x.clone());
                };
                let out = fuse_on_tape(tape, binder, prefix, fcfg, x.feats, fi)?;
                fusion.push((prefix.to_string(), out));
                let feats = match (prefix, cfg.fusion_mode) {
                    ("fusion.", FusionMode::Concat) => tape.concat_cols(x.feats, out.texture)?,
                    _ => out.fused,
                };
                Ok(SparseVar {
                    coords: x.coords.clone(),
                    feats,
                })
            };

        let bottleneck = apply_fusion(tape, binder, "fusion.", &e4)?;
        let d4 = run(tape, binder, 4, &bottleneck, Some(e3.coords.clone()), true)?;
        let d4 = apply_fusion(tape, binder, "fusion_dec4.", &d4)?;
        let c3 = skip_concat_on_tape(tape, &d4, &e3)?;
        let d3 = run(tape, binder, 5, &c3, Some(e2.coords.clone()), true)?;
        let d3 = apply_fusion(tape, binder, "fusion_dec3.", &d3)?;
        let c2 = skip_concat_on_tape(tape, &d3, &e2)?;
        let d2 = run(tape, binder, 6, &c2, Some(e1.coords.clone()), true)?;
        let c1 = skip_concat_on_tape(tape, &d2, &e1)?;
        let d1 = run(tape, binder, 7, &c1, Some(e1.coords.clone()), true)?;
        let out = run(tape, binder, 8, &d1, None, false)?;

        let descriptors = if cfg.normalize_output {
            tape.row_normalize(out.feats)?
        } else {
            out.feats
        };
        Ok(ForwardTrace {
            descriptors,
            coords: out.coords,
            layers,
            fusion,
        })
    }

    /// Frozen-weight descriptor extraction.
    pub fn extract(&self, points: &[[f64; 3]], image: Option<&Image>) -> Result<DescriptorField> {
        let input = self.prepare(points, image)?;
        self.extract_prepared(&input)
    }

    pub fn extract_prepared(&self, input: &NetworkInput) -> Result<DescriptorField> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let trace = self.forward(&mut tape, &mut binder, input)?;
        Ok(field_from(&tape, &trace, input))
    }

    /// Attention weights of the bottleneck fusion block, `M₄ × M_i`.
    pub fn attention(&self, input: &NetworkInput) -> Result<Option<DenseTensor>> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let trace = self.forward(&mut tape, &mut binder, input)?;
        Ok(trace.fusion.first().map(|(_, f)| tape.value(f.weights).clone()))
    }

    /// Closed-form parameter count from the configuration.
    pub fn expected_param_count(config: &NetworkConfig) -> usize {
        let mut n: usize = blocks(config)
            .iter()
            .map(|b| {
                let s = kernel_offsets(b.extent).len();
                s * b.c_in * b.c_out + b.c_out * if b.normed { 2 } else { 1 }
            })
            .sum();
        if config.with_fusion {
            n += config.image_encoder.param_count();
            for (_, width, fcfg) in fusion_blocks(config) {
                n += fcfg.param_count(width, config.image_encoder.feature_dim);
            }
        }
        n
    }
}

pub(crate) fn field_from(tape: &Tape, trace: &ForwardTrace, input: &NetworkInput) -> DescriptorField {
    DescriptorField {
        descriptors: tape.value(trace.descriptors).clone(),
        coords: trace.coords.clone(),
        point_map: input.voxels.origin_map.clone().unwrap_or_default(),
        points_xyz: input.points_xyz.clone(),
    }
}

#[cfg(test)]
mod tests;
