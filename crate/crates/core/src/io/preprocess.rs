//! Resizing, frame selection and standardization of raw input volumes.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::volume::{Dims, Volume};

pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub size: usize,
    pub frames: usize,
    pub frame_offset: usize,
    pub channels: usize,
    pub standardize: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            size: 112,
            frames: 12,
            frame_offset: 0,
            channels: 2,
            standardize: true,
        }
    }
}

/// Source coordinate and blend weight for one output index of a resize
/// along an axis of length `from` to length `to` (pixel centres aligned).
fn taps(from: usize, to: usize) -> Vec<(usize, usize, f64)> {
    let scale = from as f64 / to as f64;
    (0..to)
        .map(|o| {
            let x = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (from - 1) as f64);
            let i0 = x.floor() as usize;
            let i1 = (i0 + 1).min(from - 1);
            (i0, i1, x - i0 as f64)
        })
        .collect()
}

/// Bilinear spatial resize of every frame and channel.
pub fn resize_bilinear(vol: &Volume, h: usize, w: usize) -> Result<Volume> {
    ensure!(h > 0 && w > 0, "resize target must be positive");
    let d = vol.dims();
    if d.h == h && d.w == w {
        return Ok(vol.clone());
    }
    let th = taps(d.h, h);
    let tw = taps(d.w, w);
    let out_dims = Dims::new(h, w, d.t, d.c);
    Ok(Volume::from_fn(out_dims, |y, x, t, c| {
        let (y0, y1, fy) = th[y];
        let (x0, x1, fx) = tw[x];
        let g = |yy, xx| vol.get(yy, xx, t, c) as f64;
        let top = g(y0, x0) * (1.0 - fx) + g(y0, x1) * fx;
        let bot = g(y1, x0) * (1.0 - fx) + g(y1, x1) * fx;
        (top * (1.0 - fy) + bot * fy) as f32
    }))
}

/// Z-score over the whole volume with a floor on the deviation.
pub fn standardize(vol: &Volume) -> Volume {
    let n = vol.data().len() as f64;
    let mean = vol.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = vol.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(SIGMA_FLOOR);
    let data = vol.data().iter().map(|&v| ((v as f64 - mean) / sd) as f32).collect();
    Volume::new(vol.dims(), data).expect("same dims")
}

pub fn preprocess(vol: &Volume, cfg: &PreprocessConfig) -> Result<Volume> {
    let d = vol.dims();
    ensure!(
        d.c == cfg.channels,
        "input has {} channels, expected {}",
        d.c,
        cfg.channels
    );
    ensure!(
        d.t >= cfg.frame_offset + cfg.frames,
        "input has {} frames; {} are needed from offset {}",
        d.t,
        cfg.frames,
        cfg.frame_offset
    );
    let clip = vol.select_frames(cfg.frame_offset, cfg.frames)?;
    let resized = resize_bilinear(&clip, cfg.size, cfg.size)?;
    Ok(if cfg.standardize {
        standardize(&resized)
    } else {
        resized
    })
}
