//! Bit-exact binary persistence.
//!
//! Two formats, both little-endian:
//!
//! * Tensor file: magic `BCRT`, version byte (1), dtype byte (0 = 64-bit
//!   float), rank byte, one reserved byte, then `rank` u64 extents and the
//!   row-major payload (channel index fastest where the tensor has one).
//! * Container: magic `BCRC`, version byte (1), three reserved bytes, a u64
//!   manifest length, the JSON manifest, then the concatenated payload
//!   blobs. The manifest records the artifact kind, a config echo, and the
//!   named entries with byte offsets and CRC-32C checksums. Checksums are
//!   verified on load; unknown manifest fields are ignored, unknown kinds
//!   rejected.
//!
//! Datasets, nonstandard forms, and model checkpoints are containers whose
//! entries are tensor-file blobs.

use crate::apps::{Dataset, TaskKind, TaskSample};
use crate::bcrnet::{build_bcrnet, Mode, NetConfig, TransformInit};
use crate::grad::{Normalization, TrainedModel};
use crate::layers::Activation;
use crate::nsform::{Band, LevelBands, NonstandardForm};
use crate::wavelet::make_filters;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

pub const TENSOR_MAGIC: &[u8; 4] = b"BCRT";
pub const CONTAINER_MAGIC: &[u8; 4] = b"BCRC";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Debug)]
pub enum PersistError {
    Io(std::io::Error),
    BadMagic,
    BadVersion { got: u8 },
    BadDtype { got: u8 },
    BadRank { got: u8 },
    EmptyExtent,
    Truncated { expected: usize, got: usize },
    ChecksumMismatch { entry: String },
    MissingEntry { entry: String },
    WrongKind { expected: &'static str, got: String },
    Manifest(String),
    Rebuild(String),
}

impl fmt::Display for PersistError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PersistError::Io(e) => write!(f, "io error: {e}"),
            PersistError::BadMagic => write!(f, "bad magic bytes; not a recognized file"),
            PersistError::BadVersion { got } => {
                write!(f, "unsupported format version {got} (this build reads {FORMAT_VERSION})")
            }
            PersistError::BadDtype { got } => write!(f, "unsupported dtype code {got}"),
            PersistError::BadRank { got } => write!(f, "unsupported rank {got}"),
            PersistError::EmptyExtent => write!(f, "tensors must have nonzero extents"),
            PersistError::Truncated { expected, got } => {
                write!(f, "truncated payload: expected {expected} bytes, got {got}")
            }
            PersistError::ChecksumMismatch { entry } => {
                write!(f, "checksum mismatch in entry '{entry}'")
            }
            PersistError::MissingEntry { entry } => write!(f, "missing entry '{entry}'"),
            PersistError::WrongKind { expected, got } => {
                write!(f, "artifact kind '{got}' where '{expected}' was expected")
            }
            PersistError::Manifest(msg) => write!(f, "manifest error: {msg}"),
            PersistError::Rebuild(msg) => write!(f, "could not rebuild artifact: {msg}"),
        }
    }
}

impl std::error::Error for PersistError {}

impl From<std::io::Error> for PersistError {
    fn from(e: std::io::Error) -> Self {
        PersistError::Io(e)
    }
}

/// CRC-32C (Castagnoli), reflected, table-driven.
pub fn crc32c(data: &[u8]) -> u32 {
    const POLY: u32 = 0x82F6_3B78;
    static TABLE: std::sync::OnceLock<[u32; 256]> = std::sync::OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = [0u32; 256];
        for (i, slot) in t.iter_mut().enumerate() {
            let mut crc = i as u32;
            for _ in 0..8 {
                crc = if crc & 1 != 0 { (crc >> 1) ^ POLY } else { crc >> 1 };
            }
            *slot = crc;
        }
        t
    });
    let mut crc = !0u32;
    for &b in data {
        crc = (crc >> 8) ^ table[((crc ^ b as u32) & 0xFF) as usize];
    }
    !crc
}

/// Encode extents and row-major values as a tensor-file blob.
pub fn encode_tensor(extents: &[u64], data: &[f64]) -> Result<Vec<u8>, PersistError> {
    if extents.is_empty() || extents.len() > 4 {
        return Err(PersistError::BadRank { got: extents.len() as u8 });
    }
    if extents.iter().any(|&e| e == 0) {
        return Err(PersistError::EmptyExtent);
    }
    let want: u64 = extents.iter().product();
    if want as usize != data.len() {
        return Err(PersistError::Truncated { expected: want as usize * 8, got: data.len() * 8 });
    }
    let mut out = Vec::with_capacity(8 + extents.len() * 8 + data.len() * 8);
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(FORMAT_VERSION);
    out.push(0); // dtype: f64 little-endian
    out.push(extents.len() as u8);
    out.push(0); // reserved
    for e in extents {
        out.extend_from_slice(&e.to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Decode a tensor-file blob.
pub fn decode_tensor(bytes: &[u8]) -> Result<(Vec<u64>, Vec<f64>), PersistError> {
    if bytes.len() < 8 {
        return Err(PersistError::Truncated { expected: 8, got: bytes.len() });
    }
    if &bytes[0..4] != TENSOR_MAGIC {
        return Err(PersistError::BadMagic);
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(PersistError::BadVersion { got: bytes[4] });
    }
    if bytes[5] != 0 {
        return Err(PersistError::BadDtype { got: bytes[5] });
    }
    let rank = bytes[6] as usize;
    if rank == 0 || rank > 4 {
        return Err(PersistError::BadRank { got: bytes[6] });
    }
    let header = 8 + rank * 8;
    if bytes.len() < header {
        return Err(PersistError::Truncated { expected: header, got: bytes.len() });
    }
    let mut extents = Vec::with_capacity(rank);
    for i in 0..rank {
        let mut buf = [0u8; 8];
        buf.copy_from_slice(&bytes[8 + i * 8..16 + i * 8]);
        extents.push(u64::from_le_bytes(buf));
    }
    if extents.iter().any(|&e| e == 0) {
        return Err(PersistError::EmptyExtent);
    }
    let count: u64 = extents.iter().product();
    let want = header + count as usize * 8;
    if bytes.len() != want {
        return Err(PersistError::Truncated { expected: want, got: bytes.len() });
    }
    let mut data = Vec::with_capacity(count as usize);
    for i in 0..count as usize {
        let mut buf = [0u8; 8];
        buf.copy_from_slice(&bytes[header + i * 8..header + i * 8 + 8]);
        data.push(f64::from_le_bytes(buf));
    }
    Ok((extents, data))
}

pub fn write_tensor(path: &Path, extents: &[u64], data: &[f64]) -> Result<(), PersistError> {
    let bytes = encode_tensor(extents, data)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<(Vec<u64>, Vec<f64>), PersistError> {
    let bytes = fs::read(path)?;
    decode_tensor(&bytes)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EntryMeta {
    name: String,
    offset: u64,
    len: u64,
    crc32c: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ArtifactConfig {
    Dataset(DatasetDesc),
    Nsform(NsformDesc),
    Checkpoint(CheckpointDesc),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetDesc {
    task: String,
    grid: u64,
    coarse: u64,
    seed: u64,
    n_train: u64,
    n_test: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NsformDesc {
    dim: u64,
    finest: u64,
    coarsest: u64,
    order: u64,
    band_width: u64,
    /// Documentation of the stored block order per level.
    block_order: String,
}

fn norm_default() -> f64 {
    0.0
}

fn scale_default() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointDesc {
    dim: u64,
    order: u64,
    finest: u64,
    coarsest: u64,
    band_width: u64,
    channels: u64,
    depth: u64,
    mode: String,
    activation: String,
    transform_init: String,
    transform_trainable: bool,
    #[serde(default = "norm_default")]
    input_shift: f64,
    #[serde(default = "scale_default")]
    input_scale: f64,
    #[serde(default = "norm_default")]
    target_shift: f64,
    #[serde(default = "scale_default")]
    target_scale: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    #[serde(flatten)]
    config: ArtifactConfig,
    entries: Vec<EntryMeta>,
}

fn write_container(
    path: &Path,
    config: ArtifactConfig,
    entries: &[(String, Vec<u8>)],
) -> Result<(), PersistError> {
    let mut metas = Vec::with_capacity(entries.len());
    let mut offset = 0u64;
    for (name, bytes) in entries {
        metas.push(EntryMeta {
            name: name.clone(),
            offset,
            len: bytes.len() as u64,
            crc32c: crc32c(bytes),
        });
        offset += bytes.len() as u64;
    }
    let manifest = Manifest { config, entries: metas };
    let json = serde_json::to_vec(&manifest).map_err(|e| PersistError::Manifest(e.to_string()))?;
    let mut f = fs::File::create(path)?;
    f.write_all(CONTAINER_MAGIC)?;
    f.write_all(&[FORMAT_VERSION, 0, 0, 0])?;
    f.write_all(&(json.len() as u64).to_le_bytes())?;
    f.write_all(&json)?;
    for (_, bytes) in entries {
        f.write_all(bytes)?;
    }
    Ok(())
}

struct Container {
    config: ArtifactConfig,
    entries: Vec<(String, Vec<u8>)>,
}

fn read_container(path: &Path) -> Result<Container, PersistError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 {
        return Err(PersistError::Truncated { expected: 16, got: bytes.len() });
    }
    if &bytes[0..4] != CONTAINER_MAGIC {
        return Err(PersistError::BadMagic);
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(PersistError::BadVersion { got: bytes[4] });
    }
    let mut buf = [0u8; 8];
    buf.copy_from_slice(&bytes[8..16]);
    let json_len = u64::from_le_bytes(buf) as usize;
    if bytes.len() < 16 + json_len {
        return Err(PersistError::Truncated { expected: 16 + json_len, got: bytes.len() });
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + json_len])
        .map_err(|e| PersistError::Manifest(e.to_string()))?;
    let payload = &bytes[16 + json_len..];
    let mut entries = Vec::with_capacity(manifest.entries.len());
    for meta in &manifest.entries {
        let lo = meta.offset as usize;
        let hi = lo + meta.len as usize;
        if payload.len() < hi {
            return Err(PersistError::Truncated { expected: hi, got: payload.len() });
        }
        let blob = payload[lo..hi].to_vec();
        if crc32c(&blob) != meta.crc32c {
            return Err(PersistError::ChecksumMismatch { entry: meta.name.clone() });
        }
        entries.push((meta.name.clone(), blob));
    }
    Ok(Container { config: manifest.config, entries })
}

fn find_entry<'a>(c: &'a Container, name: &str) -> Result<&'a [u8], PersistError> {
    c.entries
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, b)| b.as_slice())
        .ok_or_else(|| PersistError::MissingEntry { entry: name.to_string() })
}

fn samples_to_blobs(prefix: &str, samples: &[TaskSample]) -> Result<Vec<(String, Vec<u8>)>, PersistError> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let n = samples.len() as u64;
    let len = samples[0].input.len() as u64;
    let mut inputs = Vec::with_capacity((n * len) as usize);
    let mut targets = Vec::with_capacity((n * len) as usize);
    for s in samples {
        inputs.extend_from_slice(&s.input);
        targets.extend_from_slice(&s.target);
    }
    Ok(vec![
        (format!("{prefix}_inputs"), encode_tensor(&[n, len], &inputs)?),
        (format!("{prefix}_targets"), encode_tensor(&[n, len], &targets)?),
    ])
}

fn blobs_to_samples(c: &Container, prefix: &str, expect: u64) -> Result<Vec<TaskSample>, PersistError> {
    if expect == 0 {
        return Ok(Vec::new());
    }
    let (ie, input) = decode_tensor(find_entry(c, &format!("{prefix}_inputs"))?)?;
    let (te, target) = decode_tensor(find_entry(c, &format!("{prefix}_targets"))?)?;
    if ie.len() != 2 || te.len() != 2 || ie != te || ie[0] != expect {
        return Err(PersistError::Rebuild(format!(
            "sample tensors for '{prefix}' have unexpected extents {ie:?} / {te:?}"
        )));
    }
    let (n, len) = (ie[0] as usize, ie[1] as usize);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        out.push(TaskSample {
            input: input[i * len..(i + 1) * len].to_vec(),
            target: target[i * len..(i + 1) * len].to_vec(),
        });
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<(), PersistError> {
    let desc = DatasetDesc {
        task: ds.task.name().to_string(),
        grid: ds.grid as u64,
        coarse: ds.coarse as u64,
        seed: ds.seed,
        n_train: ds.train.len() as u64,
        n_test: ds.test.len() as u64,
    };
    let mut entries = samples_to_blobs("train", &ds.train)?;
    entries.extend(samples_to_blobs("test", &ds.test)?);
    write_container(path, ArtifactConfig::Dataset(desc), &entries)
}

pub fn load_dataset(path: &Path) -> Result<Dataset, PersistError> {
    let c = read_container(path)?;
    let desc = match &c.config {
        ArtifactConfig::Dataset(d) => d.clone(),
        other => {
            return Err(PersistError::WrongKind { expected: "dataset", got: kind_name(other) })
        }
    };
    let task = TaskKind::parse(&desc.task).map_err(|e| PersistError::Rebuild(e.to_string()))?;
    Ok(Dataset {
        task,
        grid: desc.grid as usize,
        coarse: desc.coarse as usize,
        seed: desc.seed,
        train: blobs_to_samples(&c, "train", desc.n_train)?,
        test: blobs_to_samples(&c, "test", desc.n_test)?,
    })
}

const BLOCK_ORDER_DOC: &str = "per level: detail blocks row-major over analysis channel pairs \
(wavelet channels first, pure scaling last); the scaling-scaling position is the next coarser \
matrix, stored once as 'top'";

pub fn save_nsform(path: &Path, ns: &NonstandardForm) -> Result<(), PersistError> {
    let desc = NsformDesc {
        dim: ns.dim() as u64,
        finest: ns.finest_level() as u64,
        coarsest: ns.coarsest_level() as u64,
        order: ns.order() as u64,
        band_width: ns.band_width() as u64,
        block_order: BLOCK_ORDER_DOC.to_string(),
    };
    let mut entries = Vec::new();
    for lv in ns.levels() {
        for (j, b) in lv.blocks.iter().enumerate() {
            let side = b.side() as u64;
            let w = b.window() as u64;
            let extents: Vec<u64> = if ns.dim() == 1 {
                vec![side, w]
            } else {
                vec![side, side, w, w]
            };
            entries.push((
                format!("level{}.block{}", lv.level, j + 1),
                encode_tensor(&extents, b.data())?,
            ));
        }
    }
    let n0 = 1u64 << (ns.dim() * ns.coarsest_level());
    entries.push(("top".to_string(), encode_tensor(&[n0, n0], ns.top())?));
    write_container(path, ArtifactConfig::Nsform(desc), &entries)
}

pub fn load_nsform(path: &Path) -> Result<NonstandardForm, PersistError> {
    let c = read_container(path)?;
    let desc = match &c.config {
        ArtifactConfig::Nsform(d) => d.clone(),
        other => return Err(PersistError::WrongKind { expected: "nsform", got: kind_name(other) }),
    };
    let dim = desc.dim as usize;
    let blocks_per_level = if dim == 1 { 3 } else { 15 };
    let filters = make_filters(desc.order as usize)
        .map_err(|e| PersistError::Rebuild(e.to_string()))?;
    let mut levels = Vec::new();
    for level in desc.coarsest..desc.finest {
        let mut blocks = Vec::with_capacity(blocks_per_level);
        for j in 1..=blocks_per_level {
            let bytes = find_entry(&c, &format!("level{level}.block{j}"))?;
            let (extents, data) = decode_tensor(bytes)?;
            let (side, w) = match (dim, extents.as_slice()) {
                (1, [s, w]) => (*s as usize, *w as usize),
                (2, [s1, s2, w1, w2]) if s1 == s2 && w1 == w2 => (*s1 as usize, *w1 as usize),
                _ => {
                    return Err(PersistError::Rebuild(format!(
                        "block extents {extents:?} do not match dim {dim}"
                    )))
                }
            };
            let band = Band::from_raw(dim, side, w, data)
                .map_err(|e| PersistError::Rebuild(e.to_string()))?;
            blocks.push(band);
        }
        levels.push(LevelBands { level: level as usize, blocks });
    }
    let (_, top) = decode_tensor(find_entry(&c, "top")?)?;
    NonstandardForm::from_parts(
        dim,
        desc.finest as usize,
        desc.coarsest as usize,
        desc.band_width as usize,
        filters,
        levels,
        top,
    )
    .map_err(|e| PersistError::Rebuild(e.to_string()))
}

fn mode_name(m: Mode) -> &'static str {
    m.name()
}

fn parse_mode(s: &str) -> Result<Mode, PersistError> {
    match s {
        "lc" => Ok(Mode::Lc),
        "conv" => Ok(Mode::ConvEquivariant),
        other => Err(PersistError::Rebuild(format!("unknown mode '{other}'"))),
    }
}

fn parse_activation(s: &str) -> Result<Activation, PersistError> {
    match s {
        "id" => Ok(Activation::Id),
        "relu" => Ok(Activation::Relu),
        "sigmoid" => Ok(Activation::Sigmoid),
        other => Err(PersistError::Rebuild(format!("unknown activation '{other}'"))),
    }
}

fn parse_transform_init(s: &str) -> Result<TransformInit, PersistError> {
    match s {
        "wavelet" => Ok(TransformInit::Wavelet),
        "random" => Ok(TransformInit::Random),
        other => Err(PersistError::Rebuild(format!("unknown transform init '{other}'"))),
    }
}

pub fn save_checkpoint(path: &Path, model: &TrainedModel) -> Result<(), PersistError> {
    let net = &model.net;
    let cfg = &net.cfg;
    let desc = CheckpointDesc {
        dim: cfg.dim as u64,
        order: cfg.order as u64,
        finest: cfg.finest as u64,
        coarsest: cfg.coarsest as u64,
        band_width: cfg.band_width as u64,
        channels: cfg.channels as u64,
        depth: cfg.depth as u64,
        mode: mode_name(cfg.mode).to_string(),
        activation: cfg.activation.name().to_string(),
        transform_init: cfg.transform_init.name().to_string(),
        transform_trainable: cfg.transform_trainable,
        input_shift: model.norm.input_shift,
        input_scale: model.norm.input_scale,
        target_shift: model.norm.target_shift,
        target_scale: model.norm.target_scale,
    };
    let names = net.layer_names();
    let mut entries = Vec::new();
    for (layer, name) in net.layers().iter().zip(names) {
        entries.push((
            format!("{name}.weights"),
            encode_tensor(&[layer.weights.len() as u64], &layer.weights)?,
        ));
        entries.push((
            format!("{name}.bias"),
            encode_tensor(&[layer.bias.len() as u64], &layer.bias)?,
        ));
    }
    write_container(path, ArtifactConfig::Checkpoint(desc), &entries)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel, PersistError> {
    let c = read_container(path)?;
    let desc = match &c.config {
        ArtifactConfig::Checkpoint(d) => d.clone(),
        other => {
            return Err(PersistError::WrongKind { expected: "checkpoint", got: kind_name(other) })
        }
    };
    let cfg = NetConfig {
        dim: desc.dim as usize,
        order: desc.order as usize,
        finest: desc.finest as usize,
        coarsest: desc.coarsest as usize,
        band_width: desc.band_width as usize,
        channels: desc.channels as usize,
        depth: desc.depth as usize,
        mode: parse_mode(&desc.mode)?,
        activation: parse_activation(&desc.activation)?,
        transform_init: parse_transform_init(&desc.transform_init)?,
        transform_trainable: desc.transform_trainable,
    };
    let mut net = build_bcrnet(&cfg, 0).map_err(|e| PersistError::Rebuild(e.to_string()))?;
    let names = net.layer_names();
    for (layer, name) in net.layers_mut().into_iter().zip(names) {
        let (we, wd) = decode_tensor(find_entry(&c, &format!("{name}.weights"))?)?;
        let (be, bd) = decode_tensor(find_entry(&c, &format!("{name}.bias"))?)?;
        if we[0] as usize != layer.weights.len() || be[0] as usize != layer.bias.len() {
            return Err(PersistError::Rebuild(format!(
                "parameter '{name}' has unexpected size"
            )));
        }
        layer.weights = wd;
        layer.bias = bd;
    }
    Ok(TrainedModel {
        net,
        norm: Normalization {
            input_shift: desc.input_shift,
            input_scale: desc.input_scale,
            target_shift: desc.target_shift,
            target_scale: desc.target_scale,
        },
    })
}

fn kind_name(c: &ArtifactConfig) -> String {
    match c {
        ArtifactConfig::Dataset(_) => "dataset".into(),
        ArtifactConfig::Nsform(_) => "nsform".into(),
        ArtifactConfig::Checkpoint(_) => "checkpoint".into(),
    }
}
