use crate::error::{ensure, Result};

/// A 2D occupancy grid at one decoder level (level 1 is full resolution,
/// each further level halves both axes).
#[derive(Debug, Clone, PartialEq)]
pub struct LevelGrid {
    pub level: usize,
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
}

impl LevelGrid {
    pub fn new(level: usize, h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        ensure!((1..=4).contains(&level), "level must be in 1..=4, got {level}");
        ensure!(
            values.len() == h * w,
            "grid {h}x{w} needs {} values, got {}",
            h * w,
            values.len()
        );
        Ok(LevelGrid { level, h, w, values })
    }

    pub fn filled(level: usize, h: usize, w: usize, v: f64) -> Self {
        LevelGrid {
            level,
            h,
            w,
            values: vec![v; h * w],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.w + x]
    }

    pub fn clamped(&self) -> LevelGrid {
        LevelGrid {
            values: self.values.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }

    pub fn binarize(&self, threshold: f64) -> Vec<bool> {
        self.values.iter().map(|&v| v >= threshold).collect()
    }

    pub fn mse(&self, other: &LevelGrid) -> f64 {
        mean_sq_diff(&self.values, &other.values)
    }
}

pub(crate) fn mean_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Block means of a binary mask: each output cell is the fraction of its
/// `factor x factor` block that is set.
pub fn patch_average_downsample(mask: &[bool], h: usize, w: usize, factor: usize, level: usize) -> Result<LevelGrid> {
    ensure!(factor >= 1, "downsampling factor must be positive");
    ensure!(mask.len() == h * w, "mask has {} cells, expected {h}x{w}", mask.len());
    ensure!(
        h % factor == 0 && w % factor == 0,
        "{h}x{w} is not divisible by {factor}"
    );
    let (oh, ow) = (h / factor, w / factor);
    let mut counts = vec![0u32; oh * ow];
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                counts[(y / factor) * ow + x / factor] += 1;
            }
        }
    }
    let area = (factor * factor) as f64;
    LevelGrid::new(level, oh, ow, counts.into_iter().map(|c| c as f64 / area).collect())
}

/// Source sample positions for 2x upsampling along one axis with
/// half-pixel alignment. Border outputs extrapolate linearly from the two
/// nearest samples, so affine inputs are reproduced exactly.
fn taps2(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let x = (o as f64 + 0.5) / 2.0 - 0.5;
            if n == 1 {
                return (0, 0, 0.0);
            }
            let i0 = (x.floor().max(0.0) as usize).min(n - 2);
            (i0, i0 + 1, x - i0 as f64)
        })
        .collect()
}

/// Bilinear 2x upsampling to the next finer level.
pub fn upsample(grid: &LevelGrid) -> Result<LevelGrid> {
    ensure!(grid.level >= 2, "level 1 grids cannot be upsampled");
    let th = taps2(grid.h);
    let tw = taps2(grid.w);
    let (oh, ow) = (2 * grid.h, 2 * grid.w);
    let mut values = Vec::with_capacity(oh * ow);
    for &(y0, y1, fy) in &th {
        for &(x0, x1, fx) in &tw {
            let top = grid.get(y0, x0) * (1.0 - fx) + grid.get(y0, x1) * fx;
            let bot = grid.get(y1, x0) * (1.0 - fx) + grid.get(y1, x1) * fx;
            values.push(top * (1.0 - fy) + bot * fy);
        }
    }
    LevelGrid::new(grid.level - 1, oh, ow, values)
}

/// 2x2 block means of a real-valued grid.
pub fn average_pool2(grid: &LevelGrid) -> Result<LevelGrid> {
    ensure!(grid.level < 4, "level 4 grids cannot be pooled further");
    ensure!(grid.h % 2 == 0 && grid.w % 2 == 0, "grid {}x{} is not even", grid.h, grid.w);
    let (oh, ow) = (grid.h / 2, grid.w / 2);
    let mut values = vec![0.0; oh * ow];
    for y in 0..grid.h {
        for x in 0..grid.w {
            values[(y / 2) * ow + x / 2] += grid.get(y, x) / 4.0;
        }
    }
    LevelGrid::new(grid.level + 1, oh, ow, values)
}
