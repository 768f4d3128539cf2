use serde::{Deserialize, Serialize};

use crate::fep::Frame;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
pub enum CentroidError {
    #[error("frame has no intensity")]
    ZeroIntensity,
}

fn median(pixels: &[u16]) -> u16 {
    let mut v = pixels.to_vec();
    let mid = v.len() / 2;
    let (_, m, _) = v.select_nth_unstable(mid);
    *m
}

fn weighted(frame: &Frame, weight: impl Fn(u16) -> f64) -> Option<(f64, f64)> {
    let w = frame.width as usize;
    let (mut sx, mut sy, mut s) = (0.0, 0.0, 0.0);
    for (i, &p) in frame.pixels.iter().enumerate() {
        let v = weight(p);
        if v > 0.0 {
            sx += v * (i % w) as f64;
            sy += v * (i / w) as f64;
            s += v;
        }
    }
    (s > 0.0).then(|| (sx / s, sy / s))
}

/// Intensity-weighted centroid after subtracting the frame median and
/// clamping at zero. A frame that is flat after subtraction falls back to
/// raw weighting.
pub fn compute_centroid(frame: &Frame) -> Result<(f64, f64), CentroidError> {
    if frame.pixels.is_empty() {
        return Err(CentroidError::ZeroIntensity);
    }
    let bg = median(&frame.pixels);
    weighted(frame, |p| p.saturating_sub(bg) as f64)
        .or_else(|| weighted(frame, f64::from))
        .ok_or(CentroidError::ZeroIntensity)
}
