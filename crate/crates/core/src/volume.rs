//! Dense 4-axis volumes indexed `(h, w, t, c)`.
//!
//! Storage is row-major with the channel axis fastest, then time, then width,
//! then height. The on-disk format uses the same order, so a volume can be
//! written without reshuffling.

use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub h: usize,
    pub w: usize,
    pub t: usize,
    pub c: usize,
}

impl Dims {
    pub const fn new(h: usize, w: usize, t: usize, c: usize) -> Self {
        Dims { h, w, t, c }
    }

    pub fn len(&self) -> usize {
        self.h * self.w * self.t * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of spatio-temporal positions (voxels), ignoring channels.
    pub fn voxels(&self) -> usize {
        self.h * self.w * self.t
    }

    pub fn with_channels(self, c: usize) -> Self {
        Dims { c, ..self }
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.h, self.w, self.t, self.c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        ensure!(
            dims.h > 0 && dims.w > 0 && dims.t > 0 && dims.c > 0,
            "volume dims must be positive, got {dims}"
        );
        ensure!(
            data.len() == dims.len(),
            "volume {dims} needs {} values, got {}",
            dims.len(),
            data.len()
        );
        ensure!(
            data.iter().all(|v| v.is_finite()),
            "volume contains non-finite values"
        );
        Ok(Volume { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Volume {
            dims,
            data: vec![0.0; dims.len()],
        }
    }

    pub fn filled(dims: Dims, value: f32) -> Self {
        Volume {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for h in 0..dims.h {
            for w in 0..dims.w {
                for t in 0..dims.t {
                    for c in 0..dims.c {
                        data.push(f(h, w, t, c));
                    }
                }
            }
        }
        Volume { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize, t: usize, c: usize) -> usize {
        ((h * self.dims.w + w) * self.dims.t + t) * self.dims.c + c
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, t: usize, c: usize) -> f32 {
        self.data[self.index(h, w, t, c)]
    }

    #[inline]
    pub fn set(&mut self, h: usize, w: usize, t: usize, c: usize, v: f32) {
        let i = self.index(h, w, t, c);
        self.data[i] = v;
    }

    /// Channel vector at one voxel.
    #[inline]
    pub fn voxel(&self, h: usize, w: usize, t: usize) -> &[f32] {
        let start = self.index(h, w, t, 0);
        &self.data[start..start + self.dims.c]
    }

    /// Copies channel `c` into a dense `(h, w, t)` array.
    pub fn channel(&self, c: usize) -> Vec<f32> {
        self.data.iter().skip(c).step_by(self.dims.c).copied().collect()
    }

    /// Keeps a subset of channels, in the given order.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Volume> {
        ensure!(
            channels.iter().all(|&c| c < self.dims.c),
            "channel selection out of range for {} channels",
            self.dims.c
        );
        let dims = self.dims.with_channels(channels.len());
        let mut data = Vec::with_capacity(dims.len());
        for v in self.data.chunks_exact(self.dims.c) {
            data.extend(channels.iter().map(|&c| v[c]));
        }
        Volume::new(dims, data)
    }

    /// Keeps time indices `start..start + len`.
    pub fn select_frames(&self, start: usize, len: usize) -> Result<Volume> {
        ensure!(
            len > 0 && start + len <= self.dims.t,
            "frame window {start}..{} exceeds {} frames",
            start + len,
            self.dims.t
        );
        let dims = Dims { t: len, ..self.dims };
        Ok(Volume::from_fn(dims, |h, w, t, c| self.get(h, w, start + t, c)))
    }

    /// 2D slice `(h, w)` of one time index and channel, row-major.
    pub fn frame(&self, t: usize, c: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.dims.h * self.dims.w);
        for h in 0..self.dims.h {
            for w in 0..self.dims.w {
                out.push(self.get(h, w, t, c));
            }
        }
        out
    }
}
