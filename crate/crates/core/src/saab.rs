//! Saab transform: a fixed DC anchor plus PCA-derived AC filters on the
//! DC-orthogonal complement, with cumulative-energy truncation.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{ensure, Error, Result};

/// Thresholds reported in every [`EnergyReport`].
pub const REPORT_THRESHOLDS: [f64; 5] = [0.95, 0.96, 0.97, 0.98, 0.99];

/// Eigenvalues below this fraction of the mean patch energy are treated as
/// exact zeros (rank deficiency).
const DEGENERATE_RTOL: f64 = 1e-11;

const ACCUM_CHUNK: usize = 2048;

/// A row-major collection of equally sized, vectorized neighborhoods.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    dim: usize,
    data: Vec<f64>,
}

impl PatchSet {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(dim > 0, "patch dimension must be positive");
        ensure!(
            data.len() % dim == 0,
            "patch data length {} is not a multiple of dimension {dim}",
            data.len()
        );
        ensure!(
            data.iter().all(|v| v.is_finite()),
            "patch values must be finite"
        );
        Ok(PatchSet { dim, data })
    }

    /// Builds a set from individual patches; all must share one length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::invalid("no patches given"))?;
        let dim = first.as_ref().len();
        let mut data = Vec::with_capacity(dim * rows.len());
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            ensure!(
                r.len() == dim,
                "patch {i} has length {}, expected {dim}",
                r.len()
            );
            data.extend_from_slice(r);
        }
        PatchSet::new(dim, data)
    }

    pub(crate) fn from_raw(dim: usize, data: Vec<f64>) -> Self {
        debug_assert!(data.len() % dim == 0);
        PatchSet { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// One fitted Saab transform for neighborhoods of dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaabFilterBank {
    dim: usize,
    dc_anchor: Vec<f64>,
    bias: f64,
    /// Kept AC filters, row-major `K x d`.
    ac_filters: Vec<f64>,
    /// Eigenvalues of the kept filters.
    eigenvalues: Vec<f64>,
    /// Every AC eigenvalue before truncation, non-increasing, length `d - 1`.
    spectrum: Vec<f64>,
    total_ac_energy: f64,
}

/// Cumulative-energy summary of an AC spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    pub eigenvalues: Vec<f64>,
    pub cumulative_ratio: Vec<f64>,
    pub k_at: Vec<(f64, usize)>,
    pub k_kept: usize,
}

impl EnergyReport {
    pub fn from_spectrum(spectrum: &[f64], k_kept: usize, extra_threshold: Option<f64>) -> Self {
        let total: f64 = spectrum.iter().sum();
        let mut acc = 0.0;
        let cumulative_ratio = spectrum
            .iter()
            .map(|&l| {
                acc += l;
                if total > 0.0 {
                    acc / total
                } else {
                    1.0
                }
            })
            .collect();
        let mut thresholds: Vec<f64> = REPORT_THRESHOLDS.to_vec();
        if let Some(t) = extra_threshold {
            if !thresholds.iter().any(|&x| x == t) {
                thresholds.push(t);
                thresholds.sort_by(|a, b| a.total_cmp(b));
            }
        }
        let k_at = thresholds
            .into_iter()
            .map(|t| (t, count_for_threshold(spectrum, t)))
            .collect();
        EnergyReport {
            eigenvalues: spectrum.to_vec(),
            cumulative_ratio,
            k_at,
            k_kept,
        }
    }

    pub fn k_at(&self, threshold: f64) -> Option<usize> {
        self.k_at
            .iter()
            .find(|(t, _)| (t - threshold).abs() < 1e-12)
            .map(|&(_, k)| k)
    }
}

/// Smallest `K` whose leading eigenvalues hold at least `threshold` of the
/// total energy. Zero total energy gives `K = 0`.
pub fn select_k(eigenvalues: &[f64], threshold: f64) -> Result<usize> {
    ensure!(!eigenvalues.is_empty(), "eigenvalue list is empty");
    ensure!(
        threshold > 0.0 && threshold <= 1.0,
        "energy threshold must lie in (0, 1], got {threshold}"
    );
    ensure!(
        eigenvalues.iter().all(|l| l.is_finite() && *l >= 0.0),
        "eigenvalues must be finite and nonnegative"
    );
    if let Some(i) = eigenvalues.windows(2).position(|w| w[1] > w[0]) {
        return Err(Error::invalid(format!(
            "eigenvalues are not sorted non-increasing at index {}",
            i + 1
        )));
    }
    Ok(count_for_threshold(eigenvalues, threshold))
}

fn count_for_threshold(sorted: &[f64], threshold: f64) -> usize {
    let total: f64 = sorted.iter().sum();
    if total <= 0.0 {
        return 0;
    }
    let mut acc = 0.0;
    for (i, &l) in sorted.iter().enumerate() {
        acc += l;
        if acc / total >= threshold {
            return i + 1;
        }
    }
    sorted.len()
}

/// Default safety margin: 10% of the 99% count, rounded up.
pub fn default_safety_margin(k99: usize) -> usize {
    k99.div_ceil(10)
}

/// Fits a Saab bank and truncates it by cumulative energy.
///
/// `K = k_at[energy_threshold] + safety_margin`, clamped to the numerical
/// rank of the AC covariance.
pub fn fit_saab(
    patches: &PatchSet,
    energy_threshold: f64,
    safety_margin: usize,
) -> Result<(SaabFilterBank, EnergyReport)> {
    ensure!(
        energy_threshold > 0.0 && energy_threshold <= 1.0,
        "energy threshold must lie in (0, 1], got {energy_threshold}"
    );
    let full = fit_saab_full(patches)?;
    let k = count_for_threshold(&full.spectrum, energy_threshold) + safety_margin;
    let bank = full.truncated(k);
    let report = EnergyReport::from_spectrum(&bank.spectrum, bank.num_ac(), Some(energy_threshold));
    Ok((bank, report))
}

/// Fits a Saab bank keeping every non-degenerate AC direction.
pub fn fit_saab_full(patches: &PatchSet) -> Result<SaabFilterBank> {
    fit_saab_from_stats(&PatchStats::from_patches(patches))
}

/// Sufficient statistics of a patch set for Saab fitting. Statistics of
/// disjoint sets can be merged, so a bank can be fitted without holding
/// every patch in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchStats {
    dim: usize,
    count: usize,
    /// Mean of the DC-removed patches.
    mean: Vec<f64>,
    /// Sum of outer products of DC-removed, mean-removed patches (`d x d`).
    scatter: Vec<f64>,
    /// Sum of squared patch norms.
    energy: f64,
    /// Smallest DC response.
    min_dc: f64,
}

impl PatchStats {
    pub fn empty(dim: usize) -> Self {
        PatchStats {
            dim,
            count: 0,
            mean: vec![0.0; dim],
            scatter: vec![0.0; dim * dim],
            energy: 0.0,
            min_dc: f64::INFINITY,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Two-pass statistics over fixed-size chunks, summed in order so the
    /// result does not depend on the thread count.
    pub fn from_patches(patches: &PatchSet) -> Self {
        let d = patches.dim();
        let n = patches.len();
        let data = patches.as_slice();
        if n == 0 {
            return PatchStats::empty(d);
        }
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let dc_removed = |x: &[f64], out: &mut [f64]| {
            let m = x.iter().sum::<f64>() / d as f64;
            for (o, v) in out.iter_mut().zip(x) {
                *o = v - m;
            }
        };

        let partial_means: Vec<(Vec<f64>, f64, f64)> = data
            .par_chunks(ACCUM_CHUNK * d)
            .map(|chunk| {
                let mut s = vec![0.0; d];
                let mut e = 0.0;
                let mut min_dc = f64::INFINITY;
                let mut buf = vec![0.0; d];
                for x in chunk.chunks_exact(d) {
                    dc_removed(x, &mut buf);
                    for (a, b) in s.iter_mut().zip(&buf) {
                        *a += b;
                    }
                    e += x.iter().map(|v| v * v).sum::<f64>();
                    min_dc = min_dc.min(x.iter().sum::<f64>() * inv_sqrt_d);
                }
                (s, e, min_dc)
            })
            .collect();
        let mut mean = vec![0.0; d];
        let mut energy = 0.0;
        let mut min_dc = f64::INFINITY;
        for (s, e, m) in &partial_means {
            for (a, v) in mean.iter_mut().zip(s) {
                *a += v;
            }
            energy += e;
            min_dc = min_dc.min(*m);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);

        let partial_scatter: Vec<Vec<f64>> = data
            .par_chunks(ACCUM_CHUNK * d)
            .map(|chunk| {
                let mut acc = vec![0.0; d * d];
                let mut buf = vec![0.0; d];
                for x in chunk.chunks_exact(d) {
                    dc_removed(x, &mut buf);
                    for (b, m) in buf.iter_mut().zip(&mean) {
                        *b -= m;
                    }
                    for i in 0..d {
                        let bi = buf[i];
                        let row = &mut acc[i * d..i * d + d];
                        for j in i..d {
                            row[j] += bi * buf[j];
                        }
                    }
                }
                acc
            })
            .collect();
        let mut scatter = vec![0.0; d * d];
        for acc in &partial_scatter {
            for i in 0..d {
                for j in i..d {
                    scatter[i * d + j] += acc[i * d + j];
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                scatter[i * d + j] = scatter[j * d + i];
            }
        }
        PatchStats {
            dim: d,
            count: n,
            mean,
            scatter,
            energy,
            min_dc,
        }
    }

    /// Folds `other` into `self` (pairwise update of mean and scatter).
    pub fn merge(&mut self, other: &PatchStats) -> Result<()> {
        ensure!(
            self.dim == other.dim,
            "cannot merge statistics of dimension {} and {}",
            self.dim,
            other.dim
        );
        if other.count == 0 {
            return Ok(());
        }
        if self.count == 0 {
            *self = other.clone();
            return Ok(());
        }
        let d = self.dim;
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta: Vec<f64> = other.mean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        let w = na * nb / n;
        for i in 0..d {
            for j in 0..d {
                self.scatter[i * d + j] += other.scatter[i * d + j] + delta[i] * delta[j] * w;
            }
        }
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl * nb / n;
        }
        self.count += other.count;
        self.energy += other.energy;
        self.min_dc = self.min_dc.min(other.min_dc);
        Ok(())
    }
}

/// Fits a Saab bank from merged patch statistics, keeping every
/// non-degenerate AC direction.
pub fn fit_saab_from_stats(stats: &PatchStats) -> Result<SaabFilterBank> {
    let n = stats.count;
    let d = stats.dim;
    ensure!(n >= 2, "Saab fitting needs at least 2 patches, got {n}");
    ensure!(d >= 1, "patch dimension must be positive");
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let bias = (-stats.min_dc).max(0.0);

    let dc_anchor = vec![inv_sqrt_d; d];
    if d == 1 {
        return Ok(SaabFilterBank {
            dim: 1,
            dc_anchor,
            bias,
            ac_filters: Vec::new(),
            eigenvalues: Vec::new(),
            spectrum: Vec::new(),
            total_ac_energy: 0.0,
        });
    }

    let cov = DMatrix::from_row_slice(d, d, &stats.scatter) / n as f64;
    let mean_energy = stats.energy / n as f64;
    let basis = helmert_basis(d);
    // Restrict to the DC complement: C' = Q^T C Q.
    let cq = &cov * &basis;
    let projected = basis.transpose() * cq;
    let eig = SymmetricEigen::new(projected);

    let mut order: Vec<usize> = (0..d - 1).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let tol = DEGENERATE_RTOL * mean_energy.max(f64::MIN_POSITIVE);

    let mut spectrum = Vec::with_capacity(d - 1);
    let mut ac_filters = Vec::new();
    let mut eigenvalues = Vec::new();
    for &j in &order {
        let lambda = eig.eigenvalues[j].max(0.0);
        let lambda = if lambda <= tol { 0.0 } else { lambda };
        spectrum.push(lambda);
        if lambda == 0.0 {
            continue;
        }
        let v = eig.eigenvectors.column(j);
        let mut filter: Vec<f64> = (0..d).map(|r| basis.row(r).dot(&v.transpose())).collect();
        let norm = filter.iter().map(|x| x * x).sum::<f64>().sqrt();
        filter.iter_mut().for_each(|x| *x /= norm);
        canonicalize_sign(&mut filter);
        ac_filters.extend_from_slice(&filter);
        eigenvalues.push(lambda);
    }
    let total_ac_energy = spectrum.iter().sum();

    Ok(SaabFilterBank {
        dim: d,
        dc_anchor,
        bias,
        ac_filters,
        eigenvalues,
        spectrum,
        total_ac_energy,
    })
}

/// Orthonormal basis (columns) of the complement of the all-ones vector.
fn helmert_basis(d: usize) -> DMatrix<f64> {
    let mut q = DMatrix::<f64>::zeros(d, d - 1);
    for k in 1..d {
        let scale = 1.0 / ((k * (k + 1)) as f64).sqrt();
        for r in 0..k {
            q[(r, k - 1)] = scale;
        }
        q[(k, k - 1)] = -(k as f64) * scale;
    }
    q
}

/// Flips the filter so its largest-magnitude entry (first on ties) is positive.
fn canonicalize_sign(filter: &mut [f64]) {
    let mut best = 0;
    for (i, v) in filter.iter().enumerate() {
        if v.abs() > filter[best].abs() {
            best = i;
        }
    }
    if filter[best] < 0.0 {
        filter.iter_mut().for_each(|x| *x = -*x);
    }
}

impl SaabFilterBank {
    /// Assembles a bank from stored parts (used when loading models).
    pub fn from_parts(
        dim: usize,
        bias: f64,
        ac_filters: Vec<f64>,
        eigenvalues: Vec<f64>,
        spectrum: Vec<f64>,
    ) -> Result<Self> {
        ensure!(dim > 0, "bank dimension must be positive");
        ensure!(
            ac_filters.len() == eigenvalues.len() * dim,
            "bank has {} filter coefficients for {} filters of dim {dim}",
            ac_filters.len(),
            eigenvalues.len()
        );
        ensure!(
            eigenvalues.len() < dim,
            "bank keeps {} AC filters but dimension {dim} allows at most {}",
            eigenvalues.len(),
            dim - 1
        );
        ensure!(
            spectrum.len() == dim - 1,
            "spectrum length {} does not match dimension {dim}",
            spectrum.len()
        );
        let total_ac_energy = spectrum.iter().sum();
        Ok(SaabFilterBank {
            dim,
            dc_anchor: vec![1.0 / (dim as f64).sqrt(); dim],
            bias,
            ac_filters,
            eigenvalues,
            spectrum,
            total_ac_energy,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_ac(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Output channels produced per patch: one DC plus the kept ACs.
    pub fn num_outputs(&self) -> usize {
        1 + self.num_ac()
    }

    pub fn dc_anchor(&self) -> &[f64] {
        &self.dc_anchor
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn ac_filter(&self, j: usize) -> &[f64] {
        &self.ac_filters[j * self.dim..(j + 1) * self.dim]
    }

    pub fn ac_filters(&self) -> &[f64] {
        &self.ac_filters
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn spectrum(&self) -> &[f64] {
        &self.spectrum
    }

    pub fn total_ac_energy(&self) -> f64 {
        self.total_ac_energy
    }

    /// Keeps at most `k` leading AC filters; zero-energy directions are
    /// never present, so the clamp is to the numerical rank.
    pub fn truncated(mut self, k: usize) -> Self {
        let k = k.min(self.eigenvalues.len());
        self.eigenvalues.truncate(k);
        self.ac_filters.truncate(k * self.dim);
        self
    }

    /// Rounds every stored coefficient through `f32`, so the bank survives a
    /// 32-bit serialization round trip unchanged.
    pub fn quantized_f32(&self) -> Self {
        let q = |v: &[f64]| v.iter().map(|&x| x as f32 as f64).collect::<Vec<_>>();
        let spectrum = q(&self.spectrum);
        SaabFilterBank {
            dim: self.dim,
            dc_anchor: q(&self.dc_anchor),
            bias: self.bias as f32 as f64,
            ac_filters: q(&self.ac_filters),
            eigenvalues: q(&self.eigenvalues),
            total_ac_energy: spectrum.iter().sum(),
            spectrum,
        }
    }

    pub fn energy_report(&self, threshold: Option<f64>) -> EnergyReport {
        EnergyReport::from_spectrum(&self.spectrum, self.num_ac(), threshold)
    }

    /// Fraction of AC energy held by the kept filters.
    pub fn retained_ratio(&self) -> f64 {
        if self.total_ac_energy <= 0.0 {
            1.0
        } else {
            self.eigenvalues.iter().sum::<f64>() / self.total_ac_energy
        }
    }

    /// Coordinates a patch: `[a0.x + b, a1.x, ..., aK.x]`.
    pub fn apply(&self, patch: &[f64]) -> Result<Vec<f64>> {
        ensure!(
            patch.len() == self.dim,
            "patch length {} does not match bank dimension {}",
            patch.len(),
            self.dim
        );
        let mut out = Vec::with_capacity(self.num_outputs());
        out.push(dot(&self.dc_anchor, patch) + self.bias);
        for f in self.ac_filters.chunks_exact(self.dim) {
            out.push(dot(f, patch));
        }
        Ok(out)
    }

    /// Inverts [`apply`](Self::apply) from the kept responses.
    pub fn reconstruct(&self, responses: &[f64]) -> Result<Vec<f64>> {
        ensure!(
            responses.len() == self.num_outputs(),
            "expected {} responses, got {}",
            self.num_outputs(),
            responses.len()
        );
        let dc = responses[0] - self.bias;
        let mut x: Vec<f64> = self.dc_anchor.iter().map(|a| a * dc).collect();
        for (f, &y) in self.ac_filters.chunks_exact(self.dim).zip(&responses[1..]) {
            for (xi, fi) in x.iter_mut().zip(f) {
                *xi += y * fi;
            }
        }
        Ok(x)
    }
}

pub fn apply_saab(bank: &SaabFilterBank, patch: &[f64]) -> Result<Vec<f64>> {
    bank.apply(patch)
}

/// Energy-weighted relative reconstruction error of mean-centered patches
/// when only the kept responses are used:
/// `sum ||x - x_hat||^2 / sum ||x_ac||^2`, where `x_ac` is the AC part.
/// Returns `(discarded_energy, total_ac_energy)` summed over patches.
pub fn reconstruction_error_parts(bank: &SaabFilterBank, patches: &PatchSet) -> Result<(f64, f64)> {
    ensure!(
        patches.dim() == bank.dim(),
        "patch dimension {} does not match bank dimension {}",
        patches.dim(),
        bank.dim()
    );
    let d = bank.dim();
    let n = patches.len();
    ensure!(n > 0, "no patches to reconstruct");
    let mut mean = vec![0.0; d];
    for x in patches.rows() {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut discarded = 0.0;
    let mut total = 0.0;
    let mut centered = vec![0.0; d];
    for x in patches.rows() {
        for ((c, v), m) in centered.iter_mut().zip(x).zip(&mean) {
            *c = v - m;
        }
        // Remove the DC component, leaving the AC part.
        let dc = centered.iter().sum::<f64>() / d as f64;
        centered.iter_mut().for_each(|c| *c -= dc);
        let ac_energy: f64 = centered.iter().map(|c| c * c).sum();
        let kept: f64 = bank
            .ac_filters
            .chunks_exact(d)
            .map(|f| dot(f, &centered).powi(2))
            .sum();
        total += ac_energy;
        discarded += (ac_energy - kept).max(0.0);
    }
    Ok((discarded, total))
}

/// Ratio form of [`reconstruction_error_parts`]; zero when there is no AC energy.
pub fn reconstruction_error_ratio(bank: &SaabFilterBank, patches: &PatchSet) -> Result<f64> {
    let (discarded, total) = reconstruction_error_parts(bank, patches)?;
    Ok(if total > 0.0 { discarded / total } else { 0.0 })
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
