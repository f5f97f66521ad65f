//! Model directory: `meta.txt`, one file per section and `checksums.txt`.
//!
//! Each section file is a `GLSEC1 <name>` line, a block of text lines, a
//! `payload <bytes>` line and a raw little-endian `f32` payload. Filter
//! banks live in the payload; tree ensembles are text.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::preprocess::PreprocessConfig;
use super::write_atomic;
use crate::cls::{AugmentationRecord, ClsModel, HopMask};
use crate::encoder::{EncoderModel, HopConfig, HopModel, SelectionScope, NUM_HOPS};
use crate::error::{Error, Result};
use crate::gbt::TreeEnsemble;
use crate::saab::SaabFilterBank;
use crate::seg::{CropBox, SegModel, LEVELS};
use crate::volume::Dims;

pub const FORMAT_VERSION: u32 = 1;
const FORMAT_NAME: &str = "echohop-model";
const SECTION_MAGIC: &str = "GLSEC1";
const META_FILE: &str = "meta.txt";
const CHECKSUM_FILE: &str = "checksums.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capabilities {
    pub segmentation: bool,
    pub classification: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelContainer {
    pub preprocess: PreprocessConfig,
    /// Text of the run configuration the model was trained with.
    pub config_echo: Option<String>,
    pub encoder: EncoderModel,
    pub seg: Option<SegModel>,
    pub cls: Option<ClsModel>,
}

impl ModelContainer {
    pub fn new(preprocess: PreprocessConfig, encoder: EncoderModel) -> Self {
        ModelContainer {
            preprocess,
            config_echo: None,
            encoder,
            seg: None,
            cls: None,
        }
    }

    pub fn capabilities(&self) -> Capabilities {
        Capabilities {
            segmentation: self.seg.is_some(),
            classification: self.cls.is_some(),
        }
    }

    pub fn require_seg(&self) -> Result<&SegModel> {
        self.seg
            .as_ref()
            .ok_or_else(|| Error::Capability("segmentation (the model has no `seg` section)".into()))
    }

    pub fn require_cls(&self) -> Result<&ClsModel> {
        self.cls
            .as_ref()
            .ok_or_else(|| Error::Capability("classification (the model has no `cls` section)".into()))
    }

    fn section_names(&self) -> Vec<&'static str> {
        let mut s = vec!["encoder"];
        if self.seg.is_some() {
            s.push("seg");
        }
        if self.cls.is_some() {
            s.push("cls");
        }
        s
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    format: String,
    version: u32,
    sections: Vec<String>,
    preprocess: PreprocessConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<String>,
}

fn section_file(name: &str) -> String {
    format!("{name}.bin")
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Default)]
struct SectionWriter {
    text: String,
    payload: Vec<u8>,
}

impl SectionWriter {
    fn line(&mut self, s: impl AsRef<str>) {
        self.text.push_str(s.as_ref());
        self.text.push('\n');
    }

    fn floats(&mut self, v: impl IntoIterator<Item = f64>) {
        for x in v {
            self.payload.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }

    fn ensemble(&mut self, name: &str, m: &TreeEnsemble) {
        let t = m.to_text();
        self.line(format!("ensemble {name} {}", t.lines().count()));
        self.text.push_str(&t);
    }

    fn finish(self, name: &str) -> Vec<u8> {
        let mut out = format!("{SECTION_MAGIC} {name}\n{}payload {}\n", self.text, self.payload.len()).into_bytes();
        out.extend_from_slice(&self.payload);
        out
    }
}

struct SectionReader<'a> {
    name: String,
    lines: Vec<&'a str>,
    pos: usize,
    payload: &'a [u8],
    offset: usize,
}

impl<'a> SectionReader<'a> {
    fn parse(name: &str, bytes: &'a [u8]) -> Result<Self> {
        let err = |m: String| Error::Load(format!("section `{name}`: {m}"));
        let marker = b"\npayload ";
        let at = bytes
            .windows(marker.len())
            .rposition(|w| w == marker)
            .ok_or_else(|| err("missing payload line".into()))?;
        let nl = bytes[at + 1..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|p| at + 1 + p)
            .ok_or_else(|| err("unterminated payload line".into()))?;
        let head = std::str::from_utf8(&bytes[..at]).map_err(|_| err("header is not UTF-8".into()))?;
        let len: usize = std::str::from_utf8(&bytes[at + marker.len()..nl])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err("malformed payload length".into()))?;
        let payload = &bytes[nl + 1..];
        if payload.len() != len {
            return Err(err(format!("payload has {} bytes, header says {len}", payload.len())));
        }
        let mut lines = head.lines();
        if lines.next() != Some(&format!("{SECTION_MAGIC} {name}")[..]) {
            return Err(err(format!("expected `{SECTION_MAGIC} {name}` header")));
        }
        Ok(SectionReader {
            name: name.to_string(),
            lines: lines.collect(),
            pos: 0,
            payload,
            offset: 0,
        })
    }

    fn err(&self, m: impl std::fmt::Display) -> Error {
        Error::Load(format!("section `{}` line {}: {m}", self.name, self.pos + 1))
    }

    fn keyed(&mut self, key: &str) -> Result<Vec<&'a str>> {
        let line = *self.lines.get(self.pos).ok_or_else(|| self.err(format!("expected `{key}`, found end")))?;
        let mut f = line.split_ascii_whitespace();
        if f.next() != Some(key) {
            return Err(self.err(format!("expected `{key}`")));
        }
        self.pos += 1;
        Ok(f.collect())
    }

    fn values<T: std::str::FromStr>(&mut self, key: &str, n: usize) -> Result<Vec<T>> {
        let f = self.keyed(key)?;
        if f.len() != n {
            self.pos -= 1;
            return Err(self.err(format!("`{key}` needs {n} values, got {}", f.len())));
        }
        f.iter()
            .map(|s| s.parse().map_err(|_| self.err(format!("cannot parse `{s}` in `{key}`"))))
            .collect()
    }

    fn value<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        Ok(self.values(key, 1)?.pop().expect("one value"))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let end = self.offset + 4 * n;
        if end > self.payload.len() {
            return Err(Error::Load(format!(
                "section `{}`: payload ends at byte {}, need {end}",
                self.name,
                self.payload.len()
            )));
        }
        let v = self.payload[self.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        self.offset = end;
        Ok(v)
    }

    fn ensemble(&mut self, name: &str) -> Result<TreeEnsemble> {
        let f = self.keyed("ensemble")?;
        if f.len() != 2 || f[0] != name {
            self.pos -= 1;
            return Err(self.err(format!("expected ensemble `{name}`")));
        }
        let n: usize = f[1].parse().map_err(|_| self.err("bad ensemble line count"))?;
        let end = self.pos + n;
        if end > self.lines.len() {
            return Err(self.err(format!("ensemble `{name}` is truncated")));
        }
        let text = self.lines[self.pos..end].join("\n");
        self.pos = end;
        TreeEnsemble::from_text(&text).map_err(|e| Error::Load(format!("section `{}`, ensemble `{name}`: {e}", self.name)))
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.lines.len() || self.offset != self.payload.len() {
            return Err(Error::Load(format!("section `{}` has trailing content", self.name)));
        }
        Ok(())
    }
}

fn dims_str(d: Dims) -> String {
    format!("{} {} {} {}", d.h, d.w, d.t, d.c)
}

fn read_dims(r: &mut SectionReader, key: &str) -> Result<Dims> {
    let v: Vec<usize> = r.values(key, 4)?;
    Ok(Dims::new(v[0], v[1], v[2], v[3]))
}

fn scope_str(s: SelectionScope) -> &'static str {
    match s {
        SelectionScope::HopWide => "hop_wide",
        SelectionScope::PerNode => "per_node",
    }
}

fn encode_encoder(m: &EncoderModel) -> Vec<u8> {
    let mut w = SectionWriter::default();
    w.line(format!("input {}", dims_str(m.input_dims())));
    w.line(format!("selection {}", scope_str(m.selection())));
    for (i, hop) in m.hops().iter().enumerate() {
        let c = &hop.config;
        w.line(format!(
            "hop {} window {} {} threshold {} margin {} pool {}",
            i + 1,
            c.spatial_window,
            c.temporal_window,
            fmt_f64(c.energy_threshold),
            c.safety_margin.map_or("auto".to_string(), |m| m.to_string()),
            c.pool_after as u8
        ));
        w.line(format!("hop_input {}", dims_str(hop.input_dims)));
        w.line(format!("banks {}", hop.banks.len()));
        for b in &hop.banks {
            w.line(format!("bank {} {}", b.dim(), b.num_ac()));
            w.floats([b.bias()]);
            w.floats(b.ac_filters().iter().copied());
            w.floats(b.eigenvalues().iter().copied());
            w.floats(b.spectrum().iter().copied());
        }
    }
    w.finish("encoder")
}

fn decode_encoder(bytes: &[u8]) -> Result<EncoderModel> {
    let mut r = SectionReader::parse("encoder", bytes)?;
    let input = read_dims(&mut r, "input")?;
    let selection = match r.value::<String>("selection")?.as_str() {
        "hop_wide" => SelectionScope::HopWide,
        "per_node" => SelectionScope::PerNode,
        other => return Err(r.err(format!("unknown selection `{other}`"))),
    };
    let mut hops = Vec::with_capacity(NUM_HOPS);
    for i in 0..NUM_HOPS {
        let f = r.keyed("hop")?;
        let bad = || Error::Load(format!("section `encoder`: malformed description of hop {}", i + 1));
        if f.len() != 10 || f[0] != (i + 1).to_string() || f[1] != "window" || f[4] != "threshold" || f[6] != "margin" || f[8] != "pool" {
            return Err(bad());
        }
        let config = HopConfig {
            spatial_window: f[2].parse().map_err(|_| bad())?,
            temporal_window: f[3].parse().map_err(|_| bad())?,
            energy_threshold: f[5].parse().map_err(|_| bad())?,
            safety_margin: match f[7] {
                "auto" => None,
                m => Some(m.parse().map_err(|_| bad())?),
            },
            pool_after: match f[9] {
                "0" => false,
                "1" => true,
                _ => return Err(bad()),
            },
        };
        config.validate().map_err(|e| Error::Load(format!("section `encoder`, hop {}: {e}", i + 1)))?;
        let input_dims = read_dims(&mut r, "hop_input")?;
        let nb: usize = r.value("banks")?;
        let mut banks = Vec::with_capacity(nb);
        for _ in 0..nb {
            let v: Vec<usize> = r.values("bank", 2)?;
            let (dim, k) = (v[0], v[1]);
            if dim == 0 || k >= dim {
                return Err(r.err(format!("bank keeps {k} filters of dimension {dim}")));
            }
            let bias = r.floats(1)?[0];
            let filters = r.floats(k * dim)?;
            let eig = r.floats(k)?;
            let spectrum = r.floats(dim - 1)?;
            let bank = SaabFilterBank::from_parts(dim, bias, filters, eig, spectrum)
                .map_err(|e| Error::Load(format!("section `encoder`: {e}")))?;
            banks.push(bank.quantized_f32());
        }
        hops.push(HopModel {
            config,
            input_dims,
            banks,
        });
    }
    r.finish()?;
    EncoderModel::from_hops(input, selection, hops).map_err(|e| Error::Load(format!("section `encoder`: {e}")))
}

fn encode_seg(m: &SegModel) -> Vec<u8> {
    let mut w = SectionWriter::default();
    w.line(format!("frame {} {}", m.frame.0, m.frame.1));
    w.line(format!("crop {} {} {} {}", m.crop.h0, m.crop.h1, m.crop.w0, m.crop.w1));
    let fd: Vec<String> = m.feature_dims.iter().map(|d| d.to_string()).collect();
    w.line(format!("feature_dims {}", fd.join(" ")));
    w.line(format!("threshold {}", fmt_f64(m.threshold)));
    w.line(format!("dilation_radius {}", m.dilation_radius));
    w.line(format!("roi_ratio {}", fmt_f64(m.roi_ratio)));
    w.ensemble("initial", &m.initial);
    for (i, e) in m.residual.iter().enumerate() {
        w.ensemble(&format!("residual{}", LEVELS - i), e);
    }
    w.finish("seg")
}

fn decode_seg(bytes: &[u8]) -> Result<SegModel> {
    let mut r = SectionReader::parse("seg", bytes)?;
    let frame: Vec<usize> = r.values("frame", 2)?;
    let c: Vec<usize> = r.values("crop", 4)?;
    let crop = CropBox {
        h0: c[0],
        h1: c[1],
        w0: c[2],
        w1: c[3],
    };
    crop.validate(frame[0], frame[1])
        .map_err(|e| Error::Load(format!("section `seg`: {e}")))?;
    let fd: Vec<usize> = r.values("feature_dims", LEVELS)?;
    let threshold: f64 = r.value("threshold")?;
    let dilation_radius: usize = r.value("dilation_radius")?;
    let roi_ratio: f64 = r.value("roi_ratio")?;
    let initial = r.ensemble("initial")?;
    let residual = (1..=LEVELS)
        .rev()
        .map(|l| r.ensemble(&format!("residual{l}")))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let feature_dims: [usize; LEVELS] = fd.try_into().expect("length checked");
    for (l, e) in std::iter::once((LEVELS, &initial)).chain((1..=LEVELS).rev().zip(&residual)) {
        if e.feature_dim != feature_dims[l - 1] {
            return Err(Error::Load(format!(
                "section `seg`: level {l} regressor expects {} features, schema says {}",
                e.feature_dim,
                feature_dims[l - 1]
            )));
        }
    }
    Ok(SegModel {
        frame: (frame[0], frame[1]),
        crop,
        feature_dims,
        threshold,
        dilation_radius,
        roi_ratio,
        initial,
        residual,
    })
}

fn encode_cls(m: &ClsModel) -> Vec<u8> {
    let mut w = SectionWriter::default();
    w.line(format!("hops {}", m.hops));
    let ch: Vec<String> = m.channels.iter().map(|c| c.to_string()).collect();
    w.line(format!("channels {}", ch.join(" ")));
    let a = &m.augmentation;
    let counts: Vec<String> = a.original_counts.iter().chain(&a.final_counts).map(|c| c.to_string()).collect();
    w.line(format!("counts {}", counts.join(" ")));
    w.line(format!("copies {}", a.copies.len()));
    for (i, n) in &a.copies {
        w.line(format!("copy {i} {n}"));
    }
    w.ensemble("classifier", &m.ensemble);
    w.finish("cls")
}

fn decode_cls(bytes: &[u8]) -> Result<ClsModel> {
    let mut r = SectionReader::parse("cls", bytes)?;
    let hops: HopMask = r
        .value::<String>("hops")?
        .parse()
        .map_err(|e| Error::Load(format!("section `cls`: {e}")))?;
    let ch: Vec<usize> = r.values("channels", NUM_HOPS)?;
    let counts: Vec<usize> = r.values("counts", 6)?;
    let n: usize = r.value("copies")?;
    let mut copies = Vec::with_capacity(n);
    for _ in 0..n {
        let v: Vec<usize> = r.values("copy", 2)?;
        copies.push((v[0], v[1]));
    }
    let ensemble = r.ensemble("classifier")?;
    r.finish()?;
    let model = ClsModel {
        hops,
        channels: ch.try_into().expect("length checked"),
        ensemble,
        augmentation: AugmentationRecord {
            original_counts: [counts[0], counts[1], counts[2]],
            final_counts: [counts[3], counts[4], counts[5]],
            copies,
        },
    };
    if model.ensemble.feature_dim != model.descriptor_len() {
        return Err(Error::Load(format!(
            "section `cls`: classifier expects {} features, descriptor schema gives {}",
            model.ensemble.feature_dim,
            model.descriptor_len()
        )));
    }
    Ok(model)
}

/// Serialized files of a container, by file name.
fn render(c: &ModelContainer) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut files = BTreeMap::new();
    files.insert(section_file("encoder"), encode_encoder(&c.encoder));
    if let Some(s) = &c.seg {
        files.insert(section_file("seg"), encode_seg(s));
    }
    if let Some(s) = &c.cls {
        files.insert(section_file("cls"), encode_cls(s));
    }
    let meta = Meta {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        sections: c.section_names().into_iter().map(String::from).collect(),
        preprocess: c.preprocess.clone(),
        config: c.config_echo.clone(),
    };
    let meta = toml::to_string(&meta).map_err(|e| Error::invalid(format!("cannot render model metadata: {e}")))?;
    files.insert(META_FILE.into(), meta.into_bytes());
    Ok(files)
}

/// Writes every file atomically, checksums last. Section files of a
/// previous model that this one lacks are removed.
pub fn save_model(c: &ModelContainer, dir: &Path) -> Result<()> {
    let files = render(c)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut sums = String::new();
    for (name, bytes) in &files {
        write_atomic(&dir.join(name), bytes)?;
        let _ = writeln!(sums, "{}  {name}", sha256_hex(bytes));
    }
    for stale in ["seg", "cls"] {
        let p = dir.join(section_file(stale));
        if !files.contains_key(&section_file(stale)) && p.exists() {
            std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    write_atomic(&dir.join(CHECKSUM_FILE), sums.as_bytes())
}

fn read_file(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let p = dir.join(name);
    std::fs::read(&p).map_err(|e| Error::io(p, e))
}

pub fn load_model(dir: &Path) -> Result<ModelContainer> {
    let sums = String::from_utf8(read_file(dir, CHECKSUM_FILE)?)
        .map_err(|_| Error::Load("checksums.txt is not UTF-8".into()))?;
    let mut expected = BTreeMap::new();
    for (i, line) in sums.lines().enumerate() {
        let (hash, name) = line
            .split_once("  ")
            .ok_or_else(|| Error::Load(format!("checksums.txt line {} is malformed", i + 1)))?;
        expected.insert(name.to_string(), hash.to_string());
    }
    let verified = |name: &str| -> Result<Vec<u8>> {
        let section = name.trim_end_matches(".bin").trim_end_matches(".txt").to_string();
        let hash = expected
            .get(name)
            .ok_or_else(|| Error::Load(format!("checksums.txt has no entry for {name}")))?;
        let bytes = read_file(dir, name)?;
        if &sha256_hex(&bytes) != hash {
            return Err(Error::Checksum { section });
        }
        Ok(bytes)
    };

    let meta_bytes = verified(META_FILE)?;
    let meta_text = String::from_utf8(meta_bytes).map_err(|_| Error::Load("meta.txt is not UTF-8".into()))?;
    let meta: Meta = toml::from_str(&meta_text).map_err(|e| Error::Load(format!("meta.txt: {e}")))?;
    if meta.format != FORMAT_NAME {
        return Err(Error::Load(format!("not a model directory (format `{}`)", meta.format)));
    }
    if meta.version != FORMAT_VERSION {
        return Err(Error::Load(format!(
            "model format version {} is not supported (expected {FORMAT_VERSION})",
            meta.version
        )));
    }
    let has = |s: &str| meta.sections.iter().any(|x| x == s);
    for s in &meta.sections {
        if !["encoder", "seg", "cls"].contains(&s.as_str()) {
            return Err(Error::Load(format!("unknown section `{s}` in meta.txt")));
        }
    }
    if !has("encoder") {
        return Err(Error::Load("model has no encoder section".into()));
    }
    let encoder = decode_encoder(&verified(&section_file("encoder"))?)?;
    let seg = if has("seg") {
        Some(decode_seg(&verified(&section_file("seg"))?)?)
    } else {
        None
    };
    let cls = if has("cls") {
        Some(decode_cls(&verified(&section_file("cls"))?)?)
    } else {
        None
    };
    let channels = encoder.per_hop_channel_counts();
    if let Some(s) = &seg {
        if s.feature_dims[..] != channels[..] {
            return Err(Error::Load(format!(
                "seg section was trained on channels {:?}, encoder produces {:?}",
                s.feature_dims, channels
            )));
        }
    }
    if let Some(c) = &cls {
        if c.channels[..] != channels[..] {
            return Err(Error::Load(format!(
                "cls section was trained on channels {:?}, encoder produces {:?}",
                c.channels, channels
            )));
        }
    }
    Ok(ModelContainer {
        preprocess: meta.preprocess,
        config_echo: meta.config,
        encoder,
        seg,
        cls,
    })
}
