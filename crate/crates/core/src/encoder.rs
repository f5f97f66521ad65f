//! Four cascaded VoxelHop units: neighborhood construction, channel-wise
//! Saab, then 2x2x1 spatial max-pooling between hops.
//!
//! Every channel entering a hop is a node with its own [`SaabFilterBank`];
//! the node emits its DC response followed by its kept AC responses, and the
//! hop output concatenates nodes in input-channel order.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::saab::{self, EnergyReport, PatchSet, PatchStats, SaabFilterBank};
use crate::volume::{Dims, Volume};

pub const NUM_HOPS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HopConfig {
    #[serde(default = "default_window")]
    pub spatial_window: usize,
    #[serde(default = "default_window")]
    pub temporal_window: usize,
    #[serde(default = "default_energy")]
    pub energy_threshold: f64,
    /// `None` selects 10% of the 99% count, rounded up.
    #[serde(default)]
    pub safety_margin: Option<usize>,
    #[serde(default = "default_true")]
    pub pool_after: bool,
}

fn default_window() -> usize {
    3
}
fn default_energy() -> f64 {
    0.99
}
fn default_true() -> bool {
    true
}

impl Default for HopConfig {
    fn default() -> Self {
        HopConfig {
            spatial_window: 3,
            temporal_window: 3,
            energy_threshold: 0.99,
            safety_margin: None,
            pool_after: true,
        }
    }
}

impl HopConfig {
    pub fn patch_dim(&self) -> usize {
        self.spatial_window * self.spatial_window * self.temporal_window
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.spatial_window % 2 == 1 && self.temporal_window % 2 == 1,
            "hop windows must be odd, got s={} k={}",
            self.spatial_window,
            self.temporal_window
        );
        ensure!(self.patch_dim() >= 2, "hop neighborhood must hold at least 2 voxels");
        ensure!(
            self.energy_threshold > 0.0 && self.energy_threshold <= 1.0,
            "energy threshold must lie in (0, 1], got {}",
            self.energy_threshold
        );
        Ok(())
    }
}

/// How the cumulative-energy rule is applied within a hop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionScope {
    /// Per-node AC spectra are concatenated and truncated jointly.
    HopWide,
    /// Each node applies the rule to its own spectrum.
    PerNode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    #[serde(default = "default_hops")]
    pub hops: Vec<HopConfig>,
    #[serde(default = "default_scope")]
    pub selection: SelectionScope,
    /// Upper bound on patches used to fit each node's bank.
    #[serde(default = "default_max_fit")]
    pub max_fit_patches: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_hops() -> Vec<HopConfig> {
    let mut hops = vec![HopConfig::default(); NUM_HOPS];
    hops[NUM_HOPS - 1].pool_after = false;
    hops
}
fn default_scope() -> SelectionScope {
    SelectionScope::HopWide
}
fn default_max_fit() -> usize {
    40_000
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hops: default_hops(),
            selection: default_scope(),
            max_fit_patches: default_max_fit(),
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.hops.len() == NUM_HOPS,
            "encoder needs exactly {NUM_HOPS} hop configs, got {}",
            self.hops.len()
        );
        for h in &self.hops {
            h.validate()?;
        }
        ensure!(self.max_fit_patches >= 2, "max_fit_patches must be at least 2");
        Ok(())
    }
}

/// One fitted hop: a bank per input channel.
#[derive(Debug, Clone, PartialEq)]
pub struct HopModel {
    pub config: HopConfig,
    /// Resolution and channel count entering the hop.
    pub input_dims: Dims,
    pub banks: Vec<SaabFilterBank>,
}

impl HopModel {
    pub fn output_channels(&self) -> usize {
        self.banks.iter().map(|b| b.num_outputs()).sum()
    }

    pub fn kept_ac(&self) -> usize {
        self.banks.iter().map(|b| b.num_ac()).sum()
    }

    /// Dims of the hop output before pooling.
    pub fn output_dims(&self) -> Dims {
        self.input_dims.with_channels(self.output_channels())
    }

    /// Whether an odd height/width gets a replicated row/column before pooling.
    pub fn pool_padding(&self) -> (bool, bool) {
        if self.config.pool_after {
            (self.input_dims.h % 2 == 1, self.input_dims.w % 2 == 1)
        } else {
            (false, false)
        }
    }

    /// Concatenated, sorted AC spectrum of all nodes.
    pub fn energy_report(&self) -> EnergyReport {
        let mut spectrum: Vec<f64> = self.banks.iter().flat_map(|b| b.spectrum().iter().copied()).collect();
        spectrum.sort_by(|a, b| b.total_cmp(a));
        EnergyReport::from_spectrum(&spectrum, self.kept_ac(), Some(self.config.energy_threshold))
    }

    pub fn parameter_count(&self) -> usize {
        self.banks.iter().map(|b| b.num_outputs() * b.dim() + 1).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    input_dims: Dims,
    selection: SelectionScope,
    hops: Vec<HopModel>,
}

/// Hop outputs `F1..F4`, each taken before its trailing pool.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps {
    pub levels: Vec<Volume>,
}

impl FeatureMaps {
    /// Feature map of level `l` in `1..=4`.
    pub fn level(&self, l: usize) -> &Volume {
        &self.levels[l - 1]
    }
}

impl EncoderModel {
    pub fn from_hops(input_dims: Dims, selection: SelectionScope, hops: Vec<HopModel>) -> Result<Self> {
        ensure!(hops.len() == NUM_HOPS, "encoder needs {NUM_HOPS} hops, got {}", hops.len());
        let mut dims = input_dims;
        for (i, hop) in hops.iter().enumerate() {
            ensure!(
                hop.input_dims == dims,
                "hop {} expects input {}, chain provides {}",
                i + 1,
                hop.input_dims,
                dims
            );
            ensure!(
                hop.banks.len() == dims.c,
                "hop {} has {} banks for {} input channels",
                i + 1,
                hop.banks.len(),
                dims.c
            );
            ensure!(
                hop.banks.iter().all(|b| b.dim() == hop.config.patch_dim()),
                "hop {} bank dimension disagrees with its window",
                i + 1
            );
            dims = next_input_dims(hop);
        }
        Ok(EncoderModel {
            input_dims,
            selection,
            hops,
        })
    }

    pub fn input_dims(&self) -> Dims {
        self.input_dims
    }

    pub fn selection(&self) -> SelectionScope {
        self.selection
    }

    pub fn hops(&self) -> &[HopModel] {
        &self.hops
    }

    pub fn per_hop_channel_counts(&self) -> Vec<usize> {
        self.hops.iter().map(|h| h.output_channels()).collect()
    }

    /// Pre-pool `(H, W, T)` of each hop.
    pub fn per_hop_resolutions(&self) -> Vec<(usize, usize, usize)> {
        self.hops
            .iter()
            .map(|h| (h.input_dims.h, h.input_dims.w, h.input_dims.t))
            .collect()
    }

    pub fn energy_reports(&self) -> Vec<EnergyReport> {
        self.hops.iter().map(|h| h.energy_report()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.hops.iter().map(|h| h.parameter_count()).sum()
    }
}

fn next_input_dims(hop: &HopModel) -> Dims {
    let out = hop.output_dims();
    if hop.config.pool_after {
        Dims {
            h: out.h.div_ceil(2),
            w: out.w.div_ceil(2),
            ..out
        }
    } else {
        out
    }
}

fn check_window(dims: Dims, s: usize, k: usize) -> Result<()> {
    ensure!(s % 2 == 1 && k % 2 == 1, "windows must be odd, got s={s} k={k}");
    ensure!(
        s <= 2 * dims.h && s <= 2 * dims.w && k <= 2 * dims.t,
        "window {s}x{s}x{k} is larger than twice the volume extent {}x{}x{}",
        dims.h,
        dims.w,
        dims.t
    );
    Ok(())
}

/// Voxel indices (into the `h, w, t` grid) of the neighborhood around one
/// position, with edge replication, in `(dh, dw, dt)` row-major order.
#[inline]
fn neighborhood(dims: Dims, s: usize, k: usize, h: usize, w: usize, t: usize, out: &mut [usize]) {
    let rs = (s / 2) as isize;
    let rk = (k / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut i = 0;
    for dh in -rs..=rs {
        let hh = clamp(h as isize + dh, dims.h);
        for dw in -rs..=rs {
            let ww = clamp(w as isize + dw, dims.w);
            let base = (hh * dims.w + ww) * dims.t;
            for dt in -rk..=rk {
                out[i] = base + clamp(t as isize + dt, dims.t);
                i += 1;
            }
        }
    }
}

/// One patch per `(h, w, t)` position of `channel`, ordered `h` outer, then
/// `w`, then `t`; borders use edge replication.
pub fn extract_neighborhoods(vol: &Volume, s: usize, k: usize, channel: usize) -> Result<PatchSet> {
    let dims = vol.dims();
    ensure!(channel < dims.c, "channel {channel} out of range for {} channels", dims.c);
    check_window(dims, s, k)?;
    let d = s * s * k;
    let data = vol.data();
    let mut idx = vec![0usize; d];
    let mut out = Vec::with_capacity(dims.voxels() * d);
    for h in 0..dims.h {
        for w in 0..dims.w {
            for t in 0..dims.t {
                neighborhood(dims, s, k, h, w, t, &mut idx);
                out.extend(idx.iter().map(|&v| data[v * dims.c + channel] as f64));
            }
        }
    }
    Ok(PatchSet::from_raw(d, out))
}

/// 2x2x1 spatial max-pooling; `T` and `C` are preserved.
pub fn max_pool(vol: &Volume) -> Result<Volume> {
    let dims = vol.dims();
    ensure!(
        dims.h % 2 == 0 && dims.w % 2 == 0,
        "max-pooling needs even height and width, got {}x{}",
        dims.h,
        dims.w
    );
    let out_dims = Dims {
        h: dims.h / 2,
        w: dims.w / 2,
        ..dims
    };
    let row = out_dims.w * out_dims.t * out_dims.c;
    let mut out = vec![0f32; out_dims.len()];
    let src = vol.data();
    let tc = dims.t * dims.c;
    out.par_chunks_mut(row).enumerate().for_each(|(oh, dst)| {
        for ow in 0..out_dims.w {
            let a = ((2 * oh) * dims.w + 2 * ow) * tc;
            let b = a + tc;
            let c = ((2 * oh + 1) * dims.w + 2 * ow) * tc;
            let d = c + tc;
            let o = ow * tc;
            for i in 0..tc {
                dst[o + i] = src[a + i].max(src[b + i]).max(src[c + i]).max(src[d + i]);
            }
        }
    });
    Volume::new(out_dims, out)
}

/// Replicates the last row and/or column so both spatial dims are even.
pub fn pad_to_even(vol: &Volume) -> Volume {
    let dims = vol.dims();
    if dims.h % 2 == 0 && dims.w % 2 == 0 {
        return vol.clone();
    }
    let out_dims = Dims {
        h: dims.h + dims.h % 2,
        w: dims.w + dims.w % 2,
        ..dims
    };
    Volume::from_fn(out_dims, |h, w, t, c| {
        vol.get(h.min(dims.h - 1), w.min(dims.w - 1), t, c)
    })
}

/// Dense per-node kernel: row 0 is the DC anchor, rows `1..` the AC filters.
struct NodeKernel {
    rows: Vec<f64>,
    outputs: usize,
    bias: f64,
}

impl NodeKernel {
    fn new(bank: &SaabFilterBank) -> Self {
        let mut rows = bank.dc_anchor().to_vec();
        rows.extend_from_slice(bank.ac_filters());
        NodeKernel {
            rows,
            outputs: bank.num_outputs(),
            bias: bank.bias(),
        }
    }
}

/// Applies one hop to its input, returning the pre-pool output.
fn apply_hop(hop: &HopModel, input: &Volume) -> Result<Volume> {
    let dims = input.dims();
    ensure!(
        dims == hop.input_dims,
        "hop expects input {}, got {}",
        hop.input_dims,
        dims
    );
    let s = hop.config.spatial_window;
    let k = hop.config.temporal_window;
    check_window(dims, s, k)?;
    let d = s * s * k;
    let kernels: Vec<NodeKernel> = hop.banks.iter().map(NodeKernel::new).collect();
    let out_c: usize = kernels.iter().map(|k| k.outputs).sum();
    let out_dims = dims.with_channels(out_c);
    let src = input.data();
    let cin = dims.c;
    let row_len = dims.w * dims.t * out_c;
    let mut out = vec![0f32; out_dims.len()];

    out.par_chunks_mut(row_len).enumerate().for_each(|(h, dst)| {
        let mut idx = vec![0usize; d];
        let mut patch = vec![0f64; d];
        for w in 0..dims.w {
            for t in 0..dims.t {
                neighborhood(dims, s, k, h, w, t, &mut idx);
                let mut o = (w * dims.t + t) * out_c;
                for (node, kernel) in kernels.iter().enumerate() {
                    for (p, &v) in patch.iter_mut().zip(&idx) {
                        *p = src[v * cin + node] as f64;
                    }
                    for (j, row) in kernel.rows.chunks_exact(d).enumerate() {
                        let mut acc = 0.0;
                        for (a, b) in row.iter().zip(&patch) {
                            acc += a * b;
                        }
                        if j == 0 {
                            acc += kernel.bias;
                        }
                        dst[o + j] = acc as f32;
                    }
                    o += kernel.outputs;
                }
            }
        }
    });
    Volume::new(out_dims, out)
}

fn pool_for_next(hop: &HopModel, output: &Volume) -> Result<Volume> {
    if hop.config.pool_after {
        max_pool(&pad_to_even(output))
    } else {
        Ok(output.clone())
    }
}

/// Runs the encoder, returning each hop's pre-pool output.
pub fn encode(model: &EncoderModel, vol: &Volume) -> Result<FeatureMaps> {
    ensure!(
        vol.dims() == model.input_dims,
        "encoder was fitted on {} volumes, got {}",
        model.input_dims,
        vol.dims()
    );
    let mut levels = Vec::with_capacity(NUM_HOPS);
    let mut current = vol.clone();
    for (i, hop) in model.hops.iter().enumerate() {
        let out = apply_hop(hop, &current)?;
        if i + 1 < NUM_HOPS {
            current = pool_for_next(hop, &out)?;
        }
        levels.push(out);
    }
    Ok(FeatureMaps { levels })
}

fn content_seed(vol: &Volume, seed: u64) -> u64 {
    let mut hasher = Sha256::new();
    for v in vol.data() {
        hasher.update(v.to_le_bytes());
    }
    hasher.update(seed.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Volumes whose prefix features are computed together while fitting.
const FIT_BATCH: usize = 8;

/// Fits the four hops in sequence; hop `l` sees the pooled outputs of hops
/// `1..l` over every training volume.
///
/// Intermediate features are recomputed per volume rather than cached, and
/// each node keeps only merged patch statistics, so memory stays bounded by
/// a small batch of volumes. Fitting positions are drawn per volume from a
/// seed derived from the volume's content, and statistics are merged in
/// input order, so the result does not depend on the thread count.
pub fn fit_encoder(volumes: &[Volume], config: &EncoderConfig) -> Result<EncoderModel> {
    config.validate()?;
    let first = volumes
        .first()
        .ok_or_else(|| Error::invalid("encoder training set is empty"))?;
    let input_dims = first.dims();
    ensure!(
        volumes.iter().all(|v| v.dims() == input_dims),
        "all training volumes must share dims {input_dims}"
    );
    let seeds: Vec<u64> = volumes.par_iter().map(|v| content_seed(v, config.seed)).collect();

    let mut hops: Vec<HopModel> = Vec::with_capacity(NUM_HOPS);
    let mut dims = input_dims;
    for (l, hop_cfg) in config.hops.iter().enumerate() {
        check_window(dims, hop_cfg.spatial_window, hop_cfg.temporal_window)?;
        let per_volume = config.max_fit_patches.div_ceil(volumes.len()).min(dims.voxels());
        let d = hop_cfg.patch_dim();
        let mut stats = vec![PatchStats::empty(d); dims.c];
        for (batch, batch_seeds) in volumes.chunks(FIT_BATCH).zip(seeds.chunks(FIT_BATCH)) {
            let parts: Vec<Vec<PatchStats>> = batch
                .par_iter()
                .zip(batch_seeds)
                .map(|(vol, &seed)| {
                    let input = hop_input(&hops, vol)?;
                    Ok(volume_patch_stats(&input, seed, l as u64, hop_cfg, per_volume))
                })
                .collect::<Result<_>>()?;
            for part in &parts {
                for (acc, p) in stats.iter_mut().zip(part) {
                    acc.merge(p)?;
                }
            }
        }
        let full: Vec<SaabFilterBank> = stats
            .par_iter()
            .map(saab::fit_saab_from_stats)
            .collect::<Result<_>>()?;
        let banks = truncate_banks(full, hop_cfg, config.selection)
            .into_iter()
            .map(|b| b.quantized_f32())
            .collect();
        let hop = HopModel {
            config: *hop_cfg,
            input_dims: dims,
            banks,
        };
        log::info!(
            "hop {}: {} nodes at {}x{}x{}, kept {} AC ({} channels)",
            l + 1,
            dims.c,
            dims.h,
            dims.w,
            dims.t,
            hop.kept_ac(),
            hop.output_channels()
        );
        dims = next_input_dims(&hop);
        hops.push(hop);
    }
    EncoderModel::from_hops(input_dims, config.selection, hops)
}

/// Input of the hop following `hops`, computed from a raw volume.
fn hop_input(hops: &[HopModel], vol: &Volume) -> Result<Volume> {
    let mut current = vol.clone();
    for hop in hops {
        current = pool_for_next(hop, &apply_hop(hop, &current)?)?;
    }
    Ok(current)
}

/// Per-node statistics of the patches at seeded positions of one volume.
fn volume_patch_stats(vol: &Volume, seed: u64, hop: u64, cfg: &HopConfig, count: usize) -> Vec<PatchStats> {
    let dims = vol.dims();
    let (s, k) = (cfg.spatial_window, cfg.temporal_window);
    let d = cfg.patch_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ hop.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut positions = sample(&mut rng, dims.voxels(), count).into_vec();
    positions.sort_unstable();
    let neighborhoods: Vec<usize> = positions
        .iter()
        .flat_map(|&p| {
            let t = p % dims.t;
            let w = (p / dims.t) % dims.w;
            let h = p / (dims.t * dims.w);
            let mut idx = vec![0usize; d];
            neighborhood(dims, s, k, h, w, t, &mut idx);
            idx
        })
        .collect();
    let src = vol.data();
    (0..dims.c)
        .map(|c| {
            let data = neighborhoods.iter().map(|&v| src[v * dims.c + c] as f64).collect();
            PatchStats::from_patches(&PatchSet::from_raw(d, data))
        })
        .collect()
}

fn truncate_banks(full: Vec<SaabFilterBank>, cfg: &HopConfig, scope: SelectionScope) -> Vec<SaabFilterBank> {
    match scope {
        SelectionScope::PerNode => full
            .into_iter()
            .map(|b| {
                let report = b.energy_report(Some(cfg.energy_threshold));
                let k = report.k_at(cfg.energy_threshold).unwrap_or(0);
                let k99 = report.k_at(0.99).unwrap_or(0);
                let margin = cfg.safety_margin.unwrap_or_else(|| saab::default_safety_margin(k99));
                b.truncated(k + margin)
            })
            .collect(),
        SelectionScope::HopWide => {
            // (eigenvalue, node, rank within node), sorted by energy with
            // node/rank tie-breaks.
            let mut entries: Vec<(f64, usize, usize)> = full
                .iter()
                .enumerate()
                .flat_map(|(n, b)| b.spectrum().iter().enumerate().map(move |(j, &l)| (l, n, j)))
                .collect();
            entries.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let spectrum: Vec<f64> = entries.iter().map(|e| e.0).collect();
            let report = EnergyReport::from_spectrum(&spectrum, 0, Some(cfg.energy_threshold));
            let k = report.k_at(cfg.energy_threshold).unwrap_or(0);
            let k99 = report.k_at(0.99).unwrap_or(0);
            let margin = cfg.safety_margin.unwrap_or_else(|| saab::default_safety_margin(k99));
            let mut per_node = vec![0usize; full.len()];
            for &(l, n, _) in entries.iter().take(k + margin) {
                if l > 0.0 {
                    per_node[n] += 1;
                }
            }
            full.into_iter()
                .zip(per_node)
                .map(|(b, kn)| b.truncated(kn))
                .collect()
        }
    }
}
