//! Synthetic cardiac-cycle phantoms with known masks and EF class.
//!
//! Each case is a bright elliptical cavity on a darker background. Channel 0
//! is a cine sequence: the cavity area follows a raised cosine from the
//! end-diastolic size at frame 0 down to the end-systolic size at frame
//! `frames / 2`. Channel 1 holds the end-systolic frame on every time index.
//! Both channels share a static multiplicative speckle field and carry a
//! small independent noise per frame.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{LvefClass, Manifest, ManifestRow, Split};
use crate::error::{ensure, Result};
use crate::volume::{Dims, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub seed: u64,
    pub size: usize,
    pub frames: usize,
    /// Maximum offset of the cavity centre from the image centre, pixels.
    pub center_jitter: f64,
    /// End-diastolic semi-axis ranges, pixels.
    pub axis_a: (f64, f64),
    pub axis_b: (f64, f64),
    /// Maximum absolute rotation, radians.
    pub max_rotation: f64,
    /// ESV/EDV mask-area ratio range per class (preserved, mildly reduced,
    /// reduced EF).
    pub area_ratio: [(f64, f64); 3],
    pub cavity_intensity: f64,
    pub background_intensity: f64,
    /// Width of the intensity transition across the cavity wall, pixels.
    pub edge_width: f64,
    /// Standard deviation of the multiplicative speckle field.
    pub speckle: f64,
    /// Gaussian blur radius of the speckle field, pixels.
    pub speckle_blur: usize,
    /// Standard deviation of the per-frame additive noise.
    pub frame_noise: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            seed: 0,
            size: 112,
            frames: 12,
            center_jitter: 4.0,
            axis_a: (24.0, 26.0),
            axis_b: (16.0, 18.0),
            max_rotation: 0.3,
            area_ratio: [(0.28, 0.42), (0.52, 0.58), (0.66, 0.80)],
            cavity_intensity: 1.0,
            background_intensity: 0.3,
            edge_width: 8.0,
            speckle: 0.3,
            speckle_blur: 6,
            frame_noise: 0.005,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.size >= 16, "phantom size must be at least 16");
        ensure!(self.frames >= 2 && self.frames % 2 == 0, "frame count must be even and ≥ 2");
        for (name, (lo, hi)) in [("axis_a", self.axis_a), ("axis_b", self.axis_b)] {
            ensure!(0.0 < lo && lo <= hi, "{name} range ({lo}, {hi}) is invalid");
        }
        let reach = self.axis_a.1.max(self.axis_b.1) + self.center_jitter + 2.0;
        ensure!(
            2.0 * reach < self.size as f64,
            "cavity does not fit inside a {} pixel frame",
            self.size
        );
        for (i, &(lo, hi)) in self.area_ratio.iter().enumerate() {
            ensure!(0.0 < lo && lo < hi && hi < 1.0, "area ratio range of class {} is invalid", i + 1);
        }
        for w in self.area_ratio.windows(2) {
            ensure!(w[0].1 < w[1].0, "area ratio ranges must be disjoint and increasing by class");
        }
        for (i, &(lo, hi)) in self.area_ratio.iter().enumerate() {
            let want = LvefClass::ALL[i];
            ensure!(
                LvefClass::from_ef(ef_from_ratio(lo)) == want && LvefClass::from_ef(ef_from_ratio(hi)) == want,
                "area ratio range of class {} maps to a different EF class",
                i + 1
            );
        }
        ensure!(self.edge_width > 0.0, "edge width must be positive");
        ensure!(self.speckle >= 0.0 && self.frame_noise >= 0.0, "noise levels must be non-negative");
        Ok(())
    }

    pub fn esv_frame(&self) -> usize {
        self.frames / 2
    }
}

pub fn ef_from_ratio(ratio: f64) -> f64 {
    (1.0 - ratio) * 100.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn scaled(&self, area_scale: f64) -> Ellipse {
        let s = area_scale.sqrt();
        Ellipse {
            a: self.a * s,
            b: self.b * s,
            ..*self
        }
    }

    /// Normalized radius at a pixel centre; < 1 inside.
    fn radius(&self, y: usize, x: usize) -> f64 {
        let (dy, dx) = (y as f64 + 0.5 - self.cy, x as f64 + 0.5 - self.cx);
        let (s, c) = self.theta.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }

    fn mask(&self, size: usize) -> Vec<bool> {
        (0..size * size).map(|i| self.radius(i / size, i % size) < 1.0).collect()
    }

    /// Soft occupancy ramping from 1 to 0 over `width` pixels across the
    /// boundary.
    fn occupancy(&self, y: usize, x: usize, width: f64) -> f64 {
        let q = self.radius(y, x);
        (0.5 - (q - 1.0) * (self.a * self.b).sqrt() / width).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone)]
pub struct PhantomCase {
    pub name: String,
    pub class: LvefClass,
    pub ef: f64,
    pub split: Split,
    pub volume: Volume,
    /// `size x size x 2 x 1`: end-diastolic mask then end-systolic mask.
    pub masks: Volume,
}

fn gaussian_blur(field: &[f64], size: usize, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return field.to_vec();
    }
    let sigma = radius as f64;
    let k: Vec<f64> = (-(2 * radius as isize)..=(2 * radius as isize))
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = k.iter().sum();
    let half = 2 * radius as isize;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..size {
            for x in 0..size {
                let mut acc = 0.0;
                for (j, w) in k.iter().enumerate() {
                    let o = j as isize - half;
                    let (yy, xx) = if horizontal {
                        (y as isize, (x as isize + o).clamp(0, size as isize - 1))
                    } else {
                        ((y as isize + o).clamp(0, size as isize - 1), x as isize)
                    };
                    acc += w * src[yy as usize * size + xx as usize];
                }
                out[y * size + x] = acc / z;
            }
        }
        out
    };
    pass(&pass(field, true), false)
}

fn speckle_field(rng: &mut ChaCha8Rng, spec: &PhantomSpec) -> Vec<f64> {
    let n = spec.size * spec.size;
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let white: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    let blurred = gaussian_blur(&white, spec.size, spec.speckle_blur);
    let sd = (blurred.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt().max(1e-12);
    blurred.into_iter().map(|v| 1.0 + spec.speckle * v / sd).collect()
}

fn case_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn render(spec: &PhantomSpec, e: &Ellipse, speckle: &[f64], noise: &mut impl FnMut() -> f64, out: &mut [f32]) {
    let n = spec.size;
    for y in 0..n {
        for x in 0..n {
            let occ = e.occupancy(y, x, spec.edge_width);
            let base = spec.background_intensity + (spec.cavity_intensity - spec.background_intensity) * occ;
            out[y * n + x] = (base * speckle[y * n + x] + noise()) as f32;
        }
    }
}

/// Builds one case of the given class.
pub fn generate_case(spec: &PhantomSpec, index: usize, class: LvefClass, split: Split) -> Result<PhantomCase> {
    spec.validate()?;
    let mut rng = case_rng(spec.seed, index);
    let n = spec.size;
    let (lo, hi) = spec.area_ratio[class.index()];
    let (edv, esv_scale, ed_mask, es_mask, ratio) = loop {
        let centre = n as f64 / 2.0;
        let edv = Ellipse {
            cy: centre + rng.gen_range(-spec.center_jitter..=spec.center_jitter),
            cx: centre + rng.gen_range(-spec.center_jitter..=spec.center_jitter),
            a: rng.gen_range(spec.axis_a.0..=spec.axis_a.1),
            b: rng.gen_range(spec.axis_b.0..=spec.axis_b.1),
            theta: rng.gen_range(-spec.max_rotation..=spec.max_rotation),
        };
        let r = rng.gen_range(lo..=hi);
        let ed_mask = edv.mask(n);
        let es_mask = edv.scaled(r).mask(n);
        let ratio = es_mask.iter().filter(|&&m| m).count() as f64 / ed_mask.iter().filter(|&&m| m).count() as f64;
        if (lo..=hi).contains(&ratio) {
            break (edv, r, ed_mask, es_mask, ratio);
        }
    };
    let speckle = speckle_field(&mut rng, spec);
    let noise_dist = Normal::new(0.0, spec.frame_noise.max(0.0)).expect("valid normal");
    let mut noise = || if spec.frame_noise > 0.0 { noise_dist.sample(&mut rng) } else { 0.0 };

    let dims = Dims::new(n, n, spec.frames, 2);
    let mut data = vec![0.0f32; dims.len()];
    let mut frame = vec![0.0f32; n * n];
    let esv = edv.scaled(esv_scale);
    for t in 0..spec.frames {
        let phase = 2.0 * std::f64::consts::PI * t as f64 / spec.frames as f64;
        let area = esv_scale + (1.0 - esv_scale) * (1.0 + phase.cos()) / 2.0;
        for (c, e) in [(0, edv.scaled(area)), (1, esv)] {
            render(spec, &e, &speckle, &mut noise, &mut frame);
            for (p, &v) in frame.iter().enumerate() {
                data[p * spec.frames * 2 + t * 2 + c] = v;
            }
        }
    }
    let volume = Volume::new(dims, data)?;
    let masks = Volume::from_fn(Dims::new(n, n, 2, 1), |y, x, t, _| {
        let m = if t == 0 { &ed_mask } else { &es_mask };
        m[y * n + x] as u8 as f32
    });
    Ok(PhantomCase {
        name: format!("phantom_{index:05}"),
        class,
        ef: ef_from_ratio(ratio),
        split,
        volume,
        masks,
    })
}

/// Generates `count` cases per listed split, classes assigned round-robin.
/// Case indices run continuously across splits, so every case is a pure
/// function of the spec and its index.
pub fn generate_phantoms(spec: &PhantomSpec, splits: &[(Split, usize)]) -> Result<Vec<PhantomCase>> {
    use rayon::prelude::*;
    spec.validate()?;
    let mut jobs = Vec::new();
    let mut index = 0;
    for &(split, count) in splits {
        for i in 0..count {
            jobs.push((index, LvefClass::ALL[i % 3], split));
            index += 1;
        }
    }
    jobs.into_par_iter()
        .map(|(i, class, split)| generate_case(spec, i, class, split))
        .collect()
}

pub fn manifest_for(cases: &[PhantomCase]) -> Manifest {
    Manifest {
        rows: cases
            .iter()
            .map(|c| ManifestRow {
                file_name: c.name.clone(),
                ef: c.ef,
                split: c.split,
            })
            .collect(),
    }
}

/// A cavity-free volume with the same background statistics, used as a
/// negative control.
pub fn background_volume(spec: &PhantomSpec, seed: u64) -> Result<Volume> {
    spec.validate()?;
    let mut rng = case_rng(seed, usize::MAX - 1);
    let n = spec.size;
    let speckle = speckle_field(&mut rng, spec);
    let noise = Normal::new(0.0, spec.frame_noise.max(1e-12)).expect("valid normal");
    Ok(Volume::from_fn(Dims::new(n, n, spec.frames, 2), |y, x, _, _| {
        (spec.background_intensity * speckle[y * n + x] + noise.sample(&mut rng)) as f32
    }))
}
