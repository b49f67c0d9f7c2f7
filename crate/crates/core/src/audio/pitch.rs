//! Autocorrelation pitch estimation.

use super::Waveform;

/// Median F0 over voiced frames, or `None` when no frame is voiced.
pub fn estimate_f0(w: &Waveform, f_lo: f64, f_hi: f64) -> Option<f64> {
    let sr = w.sample_rate as f64;
    let frame = 1024usize;
    let hop = 256usize;
    let min_lag = (sr / f_hi).floor() as usize;
    let max_lag = (sr / f_lo).ceil() as usize;
    if w.len() < frame + max_lag {
        return None;
    }
    let x: Vec<f64> = w.samples.iter().map(|&s| s as f64).collect();
    let mut estimates = Vec::new();
    let mut start = 0;
    while start + frame + max_lag <= x.len() {
        let seg = &x[start..start + frame];
        let energy: f64 = seg.iter().map(|v| v * v).sum();
        if energy > 1e-4 * frame as f64 {
            let corr: Vec<f64> = (min_lag..=max_lag)
                .map(|lag| {
                    let other = &x[start + lag..start + lag + frame];
                    let num: f64 = seg.iter().zip(other).map(|(a, b)| a * b).sum();
                    let e2: f64 = other.iter().map(|v| v * v).sum();
                    num / (energy * e2).sqrt().max(1e-12)
                })
                .collect();
            let best = corr.iter().cloned().fold(f64::MIN, f64::max);
            if best > 0.6 {
                // First local maximum close to the global one avoids
                // picking a multiple of the period.
                let pick = (1..corr.len() - 1)
                    .find(|&i| corr[i] >= 0.9 * best && corr[i] >= corr[i - 1] && corr[i] >= corr[i + 1])
                    .unwrap_or_else(|| {
                        corr.iter()
                            .enumerate()
                            .fold((0, f64::MIN), |a, (i, &v)| if v > a.1 { (i, v) } else { a })
                            .0
                    });
                let shift = if pick > 0 && pick + 1 < corr.len() {
                    let (a, b, c) = (corr[pick - 1], corr[pick], corr[pick + 1]);
                    let denom = a - 2.0 * b + c;
                    if denom.abs() > 1e-12 {
                        0.5 * (a - c) / denom
                    } else {
                        0.0
                    }
                } else {
                    0.0
                };
                let lag = (min_lag + pick) as f64 + shift;
                estimates.push(sr / lag);
            }
        }
        start += hop;
    }
    if estimates.is_empty() {
        return None;
    }
    estimates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some(estimates[estimates.len() / 2])
}
