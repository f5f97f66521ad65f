use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::grid::LevelGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoiLabel {
    Background,
    Interior,
    Boundary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiPartition {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<RoiLabel>,
}

impl RoiPartition {
    pub fn count(&self, label: RoiLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn indices(&self, label: RoiLabel) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == label).collect()
    }
}

/// Splits a ground-truth grid into background, interior and boundary cells.
///
/// Seeds of the boundary are cells with fractional occupancy, plus cells of
/// a crisp grid that have a 4-neighbour with a different value (so binary
/// full-resolution masks still get a transition band). Seeds are dilated by
/// `radius` cells in the Chebyshev metric.
pub fn partition_roi(gt: &LevelGrid, radius: usize) -> RoiPartition {
    let (h, w) = (gt.h, gt.w);
    let crisp = |v: f64| v <= 0.0 || v >= 1.0;
    let mut seed = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let v = gt.get(y, x);
            seed[y * w + x] = if !crisp(v) {
                true
            } else {
                let neighbours = [
                    (y > 0).then(|| gt.get(y - 1, x)),
                    (y + 1 < h).then(|| gt.get(y + 1, x)),
                    (x > 0).then(|| gt.get(y, x - 1)),
                    (x + 1 < w).then(|| gt.get(y, x + 1)),
                ];
                neighbours.into_iter().flatten().any(|n| crisp(n) && (n >= 1.0) != (v >= 1.0))
            };
        }
    }
    let r = radius as isize;
    let mut labels = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut near = false;
            'scan: for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize && seed[yy as usize * w + xx as usize] {
                        near = true;
                        break 'scan;
                    }
                }
            }
            labels.push(if near {
                RoiLabel::Boundary
            } else if gt.get(y as usize, x as usize) >= 1.0 {
                RoiLabel::Interior
            } else {
                RoiLabel::Background
            });
        }
    }
    RoiPartition { h, w, labels }
}

/// Training cells for a residual regressor: every boundary cell plus up to
/// `ratio` times as many interior and background cells each, drawn without
/// replacement. Returned indices are sorted.
pub fn sample_roi(roi: &RoiPartition, ratio: f64, seed: u64) -> Vec<usize> {
    let boundary = roi.indices(RoiLabel::Boundary);
    let quota = (boundary.len() as f64 * ratio).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = boundary;
    for label in [RoiLabel::Interior, RoiLabel::Background] {
        let pool = roi.indices(label);
        let take = quota.min(pool.len());
        out.extend(sample(&mut rng, pool.len(), take).into_iter().map(|i| pool[i]));
    }
    out.sort_unstable();
    out
}
