//! Dynamic time warping with cityblock frame costs.

use crate::audio::mel::MelSpectrogram;
use crate::error::{Error, Result};

/// Accumulated cost and warping-path length of the optimal alignment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub cost: f64,
    pub path_len: usize,
}

impl Alignment {
    pub fn normalized(&self) -> f64 {
        self.cost / self.path_len as f64
    }
}

/// Optimal alignment of two frame sequences under `cost(i, j)`.
///
/// Full `O(n·m)` table; ties prefer the diagonal, then the step that
/// advances `a`, then the step that advances `b`.
pub fn align(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> Result<(Alignment, Vec<(usize, usize)>)> {
    if n == 0 || m == 0 {
        return Err(Error::invalid("alignment of an empty sequence"));
    }
    let mut acc = vec![f64::INFINITY; n * m];
    let mut len = vec![0usize; n * m];
    let mut back = vec![0u8; n * m];
    for i in 0..n {
        for j in 0..m {
            let c = cost(i, j);
            let k = i * m + j;
            if i == 0 && j == 0 {
                acc[k] = c;
                len[k] = 1;
                continue;
            }
            let mut best = (f64::INFINITY, 0usize, 0u8);
            let candidates = [
                (i > 0 && j > 0).then(|| ((i - 1) * m + j - 1, 0u8)),
                (i > 0).then(|| ((i - 1) * m + j, 1u8)),
                (j > 0).then(|| (i * m + j - 1, 2u8)),
            ];
            for (p, dir) in candidates.into_iter().flatten() {
                if acc[p] < best.0 {
                    best = (acc[p], len[p], dir);
                }
            }
            acc[k] = c + best.0;
            len[k] = best.1 + 1;
            back[k] = best.2;
        }
    }
    let mut path = Vec::with_capacity(len[n * m - 1]);
    let (mut i, mut j) = (n - 1, m - 1);
    loop {
        path.push((i, j));
        if i == 0 && j == 0 {
            break;
        }
        match back[i * m + j] {
            0 => {
                i -= 1;
                j -= 1;
            }
            1 => i -= 1,
            _ => j -= 1,
        }
    }
    path.reverse();
    Ok((
        Alignment {
            cost: acc[n * m - 1],
            path_len: len[n * m - 1],
        },
        path,
    ))
}

pub fn cityblock(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum()
}

/// DTW distance between two mels, normalised by the warping-path length.
pub fn dtw_distance(a: &MelSpectrogram, b: &MelSpectrogram) -> Result<f64> {
    if a.n_mels != b.n_mels {
        return Err(Error::ShapeMismatch(format!("{} vs {} mel bands", a.n_mels, b.n_mels)));
    }
    let (al, _) = align(a.n_frames, b.n_frames, |i, j| cityblock(a.frame(i), b.frame(j)))?;
    Ok(al.normalized())
}
