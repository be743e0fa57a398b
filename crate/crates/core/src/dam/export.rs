use std::path::Path;

use serde_json::json;

use super::HeatMap;
use crate::data::{atomic_write, ply_string, PointCloud};
use crate::error::{Error, Result};

/// Size of the neighbourhood painted black around the query point.
pub const HEAT_KNN: usize = 10;

/// Indices of the `k` points closest to `points[query]` (the query
/// included), nearest first, ties by lower index.
pub fn knn_indices(points: &[[f64; 3]], query: usize, k: usize) -> Vec<usize> {
    let q = points[query];
    let mut order: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| ((0..3).map(|a| (p[a] - q[a]).powi(2)).sum(), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.into_iter().take(k).map(|(_, i)| i).collect()
}

fn ramp(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    [(255.0 * t).round() as u8, 0, (255.0 * (1.0 - t)).round() as u8]
}

/// Colored cloud: red for the strongest score, blue for zero, with the
/// query neighbourhood in black.
pub fn heatmap_ply(points: &[[f64; 3]], heat: &HeatMap) -> Result<String> {
    if points.len() != heat.point_scores.len() {
        return Err(Error::dim(
            "heatmap_ply",
            &[points.len()],
            &[heat.point_scores.len()],
        ));
    }
    let max = heat.point_scores.iter().cloned().fold(0.0, f64::max);
    let mut colors: Vec<[u8; 3]> = heat
        .point_scores
        .iter()
        .map(|&s| ramp(if max > 0.0 { s / max } else { 0.0 }))
        .collect();
    for i in knn_indices(points, heat.query_point, HEAT_KNN) {
        colors[i] = [0, 0, 0];
    }
    Ok(ply_string(&PointCloud {
        points: points.to_vec(),
        colors,
        labels: Vec::new(),
    }))
}

pub fn heatmap_json(points: &[[f64; 3]], heat: &HeatMap) -> serde_json::Value {
    let s = &heat.scores;
    let (min, max) = s.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let mean = if s.is_empty() {
        0.0
    } else {
        s.iter().sum::<f64>() / s.len() as f64
    };
    json!({
        "query_point": heat.query_point,
        "query_xyz": points.get(heat.query_point),
        "target_layer": heat.target_layer,
        "voxels": s.len(),
        "score_min": if s.is_empty() { 0.0 } else { min },
        "score_max": if s.is_empty() { 0.0 } else { max },
        "score_mean": mean,
        "nonzero_voxels": s.iter().filter(|&&v| v > 0.0).count(),
        "neighbourhood": knn_indices(points, heat.query_point, HEAT_KNN),
    })
}

/// Writes `<stem>.ply` and `<stem>.json` into `dir`.
pub fn write_heatmap(dir: &Path, stem: &str, points: &[[f64; 3]], heat: &HeatMap) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    atomic_write(
        &dir.join(format!("{stem}.ply")),
        heatmap_ply(points, heat)?.as_bytes(),
    )?;
    let json = serde_json::to_vec_pretty(&heatmap_json(points, heat))?;
    atomic_write(&dir.join(format!("{stem}.json")), &json)
}
