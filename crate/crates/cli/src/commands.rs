use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::json;

use imfnet_core::dam::{heatmap_json, heatmap_ply, DamSession};
use imfnet_core::data::{
    atomic_write, generate_scene, load_dataset, make_pair, read_ply, read_ppm, save_dataset_with_scenes,
    Manifest, RegistrationPair, SceneConfig,
};
use imfnet_core::metrics::{curve_csv, transform_errors, EvalReport};
use imfnet_core::network::{read_checkpoint, save_descriptors, train, write_checkpoint, Model};
use imfnet_core::pipeline::{evaluate_pair, register_pair, CorrespondenceSource, PairEvaluation};
use imfnet_core::registration::RansacParams;
use imfnet_core::verify::verification_suite;

use crate::config::{RunConfig, Side};
use crate::error::{Category, CliError, CliResult};

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())?;
    Ok(())
}

fn load_model(path: &Path) -> CliResult<Model> {
    Ok(read_checkpoint(path, None)?)
}

fn dataset(cfg: &RunConfig) -> CliResult<(Manifest, Vec<RegistrationPair>)> {
    let dir = cfg.paths.dataset.as_deref().expect("validated");
    Ok(load_dataset(dir)?)
}

fn pick_pair(
    cfg: &RunConfig,
    pairs: Vec<RegistrationPair>,
    manifest: &Manifest,
) -> CliResult<(String, RegistrationPair)> {
    let n = pairs.len();
    let i = cfg.pair_index;
    let id = manifest.pairs.get(i).map(|e| e.id.clone()).ok_or_else(|| {
        CliError::new(
            Category::Contract,
            format!("pair_index {i} out of range for {n} pairs"),
        )
    })?;
    Ok((id, pairs.into_iter().nth(i).expect("checked")))
}

/// Seed of pair `p` of scene `s`.
fn pair_seed(seed: u64, s: usize, p: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((s as u64) << 20 | p as u64)
}

pub fn synth(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    cfg.validate(&[])?;
    let mut pairs = Vec::new();
    let mut scenes = Vec::new();
    for s in 0..cfg.synth.scenes {
        let scene_cfg = SceneConfig {
            seed: cfg.seed.wrapping_add(s as u64),
            ..cfg.scene.clone()
        };
        let scene = generate_scene(&scene_cfg)?;
        for p in 0..cfg.synth.pairs_per_scene {
            pairs.push(make_pair(&scene, &cfg.pair, pair_seed(cfg.seed, s, p))?);
            scenes.push(format!("scene_{s:04}"));
        }
    }
    let manifest = save_dataset_with_scenes(out, &pairs, &scenes)?;
    eprintln!("wrote {} pairs to {}", manifest.pairs.len(), out.display());
    Ok(())
}

pub fn train_cmd(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    cfg.validate(&[("dataset", cfg.paths.dataset.as_deref())])?;
    let (_, pairs) = dataset(cfg)?;
    let mut model = Model::build(cfg.network.clone(), cfg.seed)?;
    let train_cfg = imfnet_core::network::TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let report = train(&mut model, &pairs, &train_cfg)?;
    std::fs::create_dir_all(out)?;
    write_checkpoint(&out.join("checkpoint.bin"), &model)?;
    atomic_write(&out.join("loss_curve.csv"), report.to_csv().as_bytes())?;
    write_json(
        &out.join("train_report.json"),
        &json!({
            "pairs": pairs.len(),
            "epochs": train_cfg.epochs,
            "steps": report.step_losses.len(),
            "skipped_pairs": report.skipped_pairs,
            "parameters": model.params.scalar_count(),
            "epoch_losses": report.epoch_losses,
            "seed": cfg.seed,
        }),
    )
}

pub fn extract(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let p = &cfg.paths;
    cfg.validate(&[
        ("checkpoint", p.checkpoint.as_deref()),
        ("cloud", p.cloud.as_deref()),
    ])?;
    let model = load_model(p.checkpoint.as_deref().expect("validated"))?;
    let cloud = read_ply(p.cloud.as_deref().expect("validated"))?;
    let image = match &p.image {
        Some(path) => Some(read_ppm(path)?),
        None if model.config.with_fusion => {
            return Err(CliError::config(&[
                "paths.image is required by a fusion checkpoint".into(),
            ]))
        }
        None => None,
    };
    let field = model.extract(&cloud.points, image.as_ref())?;
    std::fs::create_dir_all(out)?;
    atomic_write(&out.join("descriptors.bin"), &save_descriptors(&field)?)?;
    write_json(
        &out.join("descriptors.json"),
        &json!({
            "points": cloud.len(),
            "voxels": field.len(),
            "dim": field.dim(),
            "with_fusion": model.config.with_fusion,
        }),
    )
}

pub fn register(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let p = &cfg.paths;
    let mut required = vec![("dataset", p.dataset.as_deref())];
    if cfg.eval.correspondences == CorrespondenceSource::Descriptors {
        required.push(("checkpoint", p.checkpoint.as_deref()));
    }
    cfg.validate(&required)?;
    let (manifest, pairs) = dataset(cfg)?;
    let (id, pair) = pick_pair(cfg, pairs, &manifest)?;
    let model = match cfg.eval.correspondences {
        CorrespondenceSource::Descriptors => Some(load_model(p.checkpoint.as_deref().expect("validated"))?),
        CorrespondenceSource::GroundTruth => None,
    };
    let ransac = RansacParams {
        seed: cfg.seed,
        ..cfg.ransac.clone()
    };
    let result = register_pair(
        model.as_ref(),
        &pair,
        cfg.eval.correspondences,
        cfg.eval.mutual_only,
        &ransac,
    )?;
    let (rte, rre) = transform_errors(&result.transform, &pair.gt);
    let mut value = result.to_json();
    let obj = value.as_object_mut().expect("object");
    obj.insert("pair".into(), json!(id));
    obj.insert("rte_m".into(), json!(rte));
    obj.insert("rre_deg".into(), json!(rre));
    std::fs::create_dir_all(out)?;
    write_json(&out.join("transform.json"), &value)
}

fn label_of(path: &Path, k: usize, taken: &[String]) -> String {
    let stem = path
        .parent()
        .and_then(|d| d.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| format!("model_{k}"));
    if taken.contains(&stem) {
        format!("model_{k}")
    } else {
        stem
    }
}

pub fn evaluate(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let p = &cfg.paths;
    let mut checkpoints: Vec<PathBuf> = p.checkpoint.iter().cloned().collect();
    checkpoints.extend(p.checkpoints.iter().cloned());
    let mut required = vec![("dataset", p.dataset.as_deref())];
    if checkpoints.is_empty() {
        required.push(("checkpoint", None));
    }
    for c in &checkpoints {
        required.push(("checkpoint", Some(c.as_path())));
    }
    cfg.validate(&required)?;
    let (manifest, pairs) = dataset(cfg)?;
    let ransac = RansacParams {
        seed: cfg.seed,
        ..cfg.ransac.clone()
    };
    let mut summary = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    for (k, path) in checkpoints.iter().enumerate() {
        let label = label_of(path, k, &labels);
        labels.push(label.clone());
        let model = load_model(path)?;
        let evals: Vec<PairEvaluation> = manifest
            .pairs
            .par_iter()
            .zip(pairs.par_iter())
            .map(|(entry, pair)| {
                evaluate_pair(
                    &model,
                    pair,
                    &entry.id,
                    &entry.scene,
                    &cfg.eval,
                    &cfg.metrics,
                    &ransac,
                )
            })
            .collect::<Result<_, _>>()?;
        let residuals: Vec<Vec<f64>> = evals.iter().map(|e| e.residuals.clone()).collect();
        let results = evals.into_iter().map(|e| e.result).collect();
        let report = EvalReport::build(results, &residuals, cfg.metrics)?;
        let dir = out.join(&label);
        std::fs::create_dir_all(&dir)?;
        write_json(&dir.join("metrics.json"), &serde_json::to_value(&report)?)?;
        atomic_write(
            &dir.join("fmr_tau2.csv"),
            curve_csv("tau2", &report.fmr_vs_tau2).as_bytes(),
        )?;
        atomic_write(
            &dir.join("fmr_tau1.csv"),
            curve_csv("tau1", &report.fmr_vs_tau1).as_bytes(),
        )?;
        let mut rows = String::from("id,scene,inlier_ratio,matched,rte_m,rre_deg,success\n");
        for r in &report.pairs {
            rows.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.id, r.scene, r.inlier_ratio, r.matched, r.rte_m, r.rre_deg, r.success
            ));
        }
        atomic_write(&dir.join("pairs.csv"), rows.as_bytes())?;
        let a = &report.aggregates;
        summary.push(json!({
            "label": label,
            "with_fusion": model.config.with_fusion,
            "fmr": a.fmr,
            "fmr_scene_std": a.fmr_scene_std,
            "mean_inlier_ratio": a.mean_inlier_ratio,
            "success_rate": a.success_rate,
            "mean_rte_m": a.mean_rte_m,
            "mean_rre_deg": a.mean_rre_deg,
        }));
        eprintln!("{label}: FMR {:.4} over {} pairs", a.fmr, a.pairs);
    }
    write_json(
        &out.join("summary.json"),
        &json!({
            "tau1": cfg.metrics.tau1,
            "tau2": cfg.metrics.tau2,
            "pairs": pairs.len(),
            "models": summary,
        }),
    )
}

pub fn interpret(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let p = &cfg.paths;
    cfg.validate(&[
        ("dataset", p.dataset.as_deref()),
        ("checkpoint", p.checkpoint.as_deref()),
    ])?;
    let (manifest, pairs) = dataset(cfg)?;
    let (id, pair) = pick_pair(cfg, pairs, &manifest)?;
    let model = load_model(p.checkpoint.as_deref().expect("validated"))?;
    let (cloud, image) = match cfg.interpret.side {
        Side::Src => (&pair.src, &pair.src_image),
        Side::Dst => (&pair.dst, &pair.dst_image),
    };
    let input = model.prepare(&cloud.points, Some(image))?;
    let session = DamSession::new(&model, &input, cfg.interpret.point)?;
    let heat = session.descriptor_activation_map(&cfg.interpret.target_layer)?;
    std::fs::create_dir_all(out)?;
    atomic_write(
        &out.join("heatmap.ply"),
        heatmap_ply(&cloud.points, &heat)?.as_bytes(),
    )?;
    let mut value = heatmap_json(&cloud.points, &heat);
    let obj = value.as_object_mut().expect("object");
    obj.insert("pair".into(), json!(id));
    obj.insert("side".into(), serde_json::to_value(cfg.interpret.side)?);
    write_json(&out.join("heatmap.json"), &value)
}

pub fn gradcheck(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let report = verification_suite(cfg.seed)?;
    std::fs::create_dir_all(out)?;
    write_json(&out.join("gradcheck.json"), &serde_json::to_value(&report)?)?;
    eprintln!(
        "max relative error {:.3e}, lemma discrepancy {:.3e}",
        report.max_rel_err, report.lemma1_max_discrepancy
    );
    if report.passed {
        Ok(())
    } else {
        Err(CliError::new(
            Category::Verification,
            "verification suite failed; see gradcheck.json",
        ))
    }
}
