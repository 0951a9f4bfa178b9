use super::skeleton::Point;
use crate::error::{ensure, Result};

fn distances(pred: &[Point], gt: &[Point]) -> Result<Vec<f64>> {
    ensure!(
        pred.len() == gt.len(),
        "joint count mismatch: {} predicted, {} ground truth",
        pred.len(),
        gt.len()
    );
    ensure!(!gt.is_empty(), "no joints to compare");
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt())
        .collect())
}

/// Fraction of joints within `radius` (normalised units) of the ground truth.
pub fn compute_pck(pred: &[Point], gt: &[Point], radius: f64) -> Result<f64> {
    ensure!(radius > 0.0, "PCK radius must be positive, got {radius}");
    let d = distances(pred, gt)?;
    Ok(d.iter().filter(|&&d| d <= radius).count() as f64 / d.len() as f64)
}

/// Mean Euclidean distance between predicted and true joints.
pub fn mean_keypoint_error(pred: &[Point], gt: &[Point]) -> Result<f64> {
    let d = distances(pred, gt)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Mean absolute difference between detected and true figure counts.
pub fn figure_count_error(detected: &[usize], truth: &[usize]) -> Result<f64> {
    ensure!(
        detected.len() == truth.len() && !truth.is_empty(),
        "figure count lists differ: {} vs {}",
        detected.len(),
        truth.len()
    );
    let total: usize = detected.iter().zip(truth).map(|(&a, &b)| a.abs_diff(b)).sum();
    Ok(total as f64 / truth.len() as f64)
}
