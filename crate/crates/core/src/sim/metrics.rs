use super::SimError;
use crate::ad::Tensor;

/// Coefficient of determination `1 − SS_res / SS_tot`.
pub fn r2(predicted: &[f64], actual: &[f64]) -> Result<f64, SimError> {
    if predicted.len() != actual.len() || actual.len() < 2 {
        return Err(SimError::Invalid(format!(
            "R² needs two equal-length series of at least 2 points (got {} and {})",
            predicted.len(),
            actual.len()
        )));
    }
    let mean = actual.iter().sum::<f64>() / actual.len() as f64;
    let ss_tot: f64 = actual.iter().map(|a| (a - mean) * (a - mean)).sum();
    if !(ss_tot > 0.0) {
        return Err(SimError::Invalid("R² is undefined for a constant actual series".into()));
    }
    let ss_res: f64 = predicted.iter().zip(actual).map(|(p, a)| (p - a) * (p - a)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Column-wise R² of two equally shaped tensors.
pub fn r2_columns(predicted: &Tensor, actual: &Tensor) -> Result<Vec<f64>, SimError> {
    if predicted.shape() != actual.shape() {
        return Err(SimError::Invalid(format!("shape {:?} vs {:?}", predicted.shape(), actual.shape())));
    }
    let col = |t: &Tensor, c: usize| -> Vec<f64> { (0..t.rows()).map(|r| t.get(r, c)).collect() };
    (0..actual.cols()).map(|c| r2(&col(predicted, c), &col(actual, c))).collect()
}

/// Root-mean-square of the element-wise difference.
pub fn rmse(predicted: &[f64], actual: &[f64]) -> Result<f64, SimError> {
    if predicted.len() != actual.len() || actual.is_empty() {
        return Err(SimError::Invalid("RMSE needs two non-empty equal-length series".into()));
    }
    let ss: f64 = predicted.iter().zip(actual).map(|(p, a)| (p - a) * (p - a)).sum();
    Ok((ss / actual.len() as f64).sqrt())
}
