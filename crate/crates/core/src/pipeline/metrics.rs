//! Objective metrics: F0 frame error and cosine similarity.

use crate::error::{Error, Result};
use crate::pitch_cwt::PitchContour;

/// Relative deviation above which a both-voiced frame counts as an error.
pub const FFE_THRESHOLD: f64 = 0.2;

/// Fraction of frames with a voicing disagreement or, where both contours
/// are voiced, `|syn - ref| / ref > 0.2`. Contours of different length are
/// compared over the shorter one.
pub fn metric_ffe(reference: &PitchContour, synthesized: &PitchContour) -> Result<f64> {
    let n = reference.len().min(synthesized.len());
    if n == 0 {
        return Err(Error::validation("FFE of a zero-length contour"));
    }
    if reference.len() != synthesized.len() {
        log::warn!(
            "FFE: contour lengths differ ({} vs {}); comparing the first {n} frames",
            reference.len(),
            synthesized.len()
        );
    }
    let errors = reference.f0[..n]
        .iter()
        .zip(&synthesized.f0[..n])
        .filter(|&(&r, &s)| match (r > 0.0, s > 0.0) {
            (true, true) => (s - r).abs() / r > FFE_THRESHOLD,
            (a, b) => a != b,
        })
        .count();
    Ok(errors as f64 / n as f64)
}

pub fn metric_cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::validation(format!("cosine of vectors with {} and {} entries", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::validation("cosine similarity of a zero vector"));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean absolute difference of two equally shaped mels.
pub fn mel_mae(a: &crate::autograd::Tensor, b: &crate::autograd::Tensor) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::validation(format!("mel shapes differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}
