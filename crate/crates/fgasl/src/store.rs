//! On-disk formats for tasks and model checkpoints.
//!
//! Both are a directory of flat little-endian arrays plus a JSON manifest
//! describing every array's file, element type and shape.

use std::fs;
use std::path::{Path, PathBuf};

use fgasl_core::domainsim::{DomainData, DomainSpec, FederationTask, Sample};
use fgasl_core::segnet::{Architecture, Manifest, ModelParams};
use fgasl_core::tensor::{Image, Mask};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    U8,
    U64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F64 | Dtype::U64 => 8,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub file: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
}

impl ArrayEntry {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(Error::io(path))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(Error::io(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    write_file(path, text.as_bytes())
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    let de = &mut serde_json::Deserializer::from_slice(&bytes);
    serde_path_to_error::deserialize(de).map_err(|e| Error::format(path, e))
}

fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn u64_bytes(values: &[u64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn write_array(dir: &Path, file: String, dtype: Dtype, shape: Vec<usize>, bytes: &[u8]) -> Result<ArrayEntry> {
    let entry = ArrayEntry { file, dtype, shape };
    debug_assert_eq!(entry.len() * dtype.width(), bytes.len());
    write_file(&dir.join(&entry.file), bytes)?;
    Ok(entry)
}

fn read_array(dir: &Path, entry: &ArrayEntry, dtype: Dtype) -> Result<Vec<u8>> {
    let path = dir.join(&entry.file);
    if entry.dtype != dtype {
        return Err(Error::format(&path, format!("expected {dtype:?}, manifest says {:?}", entry.dtype)));
    }
    let bytes = read_file(&path)?;
    if bytes.len() != entry.len() * dtype.width() {
        return Err(Error::format(
            &path,
            format!("{} bytes for shape {:?}", bytes.len(), entry.shape),
        ));
    }
    Ok(bytes)
}

fn to_f64(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

fn to_u64(bytes: &[u8]) -> Vec<u64> {
    bytes
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainRole {
    Seen,
    Unseen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainEntry {
    pub role: DomainRole,
    pub spec: DomainSpec,
    pub labeled_images: ArrayEntry,
    pub labeled_masks: ArrayEntry,
    pub labeled_index: ArrayEntry,
    pub unlabeled_images: ArrayEntry,
    /// Ground truth of unlabeled images, read only by the fully-labeled
    /// reference strategy.
    pub unlabeled_truth: Option<ArrayEntry>,
    pub unlabeled_index: ArrayEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub seed: u64,
    pub num_classes: usize,
    pub image_size: usize,
    pub domains: Vec<DomainEntry>,
}

fn save_domain(dir: &Path, role: DomainRole, d: &DomainData, size: usize) -> Result<DomainEntry> {
    let id = d.spec.domain_id;
    let images = |set: &[Sample]| -> Vec<u8> { set.iter().flat_map(|s| f64_bytes(s.image.pixels())).collect() };
    let index = |set: &[Sample]| -> Vec<u8> { u64_bytes(&set.iter().map(|s| s.index as u64).collect::<Vec<_>>()) };
    let img_shape = |n: usize| vec![n, size, size];
    let (nl, nu) = (d.labeled.len(), d.unlabeled.len());

    let masks: Vec<u8> = d
        .labeled
        .iter()
        .flat_map(|s| s.mask.as_ref().expect("labeled sample has a mask").labels().to_vec())
        .collect();
    let truth: Option<Vec<u8>> = d
        .unlabeled
        .iter()
        .map(|s| s.diagnostic_mask().map(|m| m.labels().to_vec()))
        .collect::<Option<Vec<_>>>()
        .map(|v| v.concat());
    Ok(DomainEntry {
        role,
        spec: d.spec.clone(),
        labeled_images: write_array(dir, format!("d{id}_labeled_images.bin"), Dtype::F64, img_shape(nl), &images(&d.labeled))?,
        labeled_masks: write_array(dir, format!("d{id}_labeled_masks.bin"), Dtype::U8, img_shape(nl), &masks)?,
        labeled_index: write_array(dir, format!("d{id}_labeled_index.bin"), Dtype::U64, vec![nl], &index(&d.labeled))?,
        unlabeled_images: write_array(dir, format!("d{id}_unlabeled_images.bin"), Dtype::F64, img_shape(nu), &images(&d.unlabeled))?,
        unlabeled_truth: match truth {
            Some(t) if nu > 0 => Some(write_array(dir, format!("d{id}_unlabeled_truth.bin"), Dtype::U8, img_shape(nu), &t)?),
            _ => None,
        },
        unlabeled_index: write_array(dir, format!("d{id}_unlabeled_index.bin"), Dtype::U64, vec![nu], &index(&d.unlabeled))?,
    })
}

/// Writes a task into `dir`, creating it if needed.
pub fn save_task(task: &FederationTask, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut domains = Vec::with_capacity(task.seen.len() + 1);
    for d in &task.seen {
        domains.push(save_domain(dir, DomainRole::Seen, d, task.image_size)?);
    }
    domains.push(save_domain(dir, DomainRole::Unseen, &task.unseen, task.image_size)?);
    write_json(
        &dir.join("task.json"),
        &TaskManifest {
            seed: task.seed,
            num_classes: task.num_classes,
            image_size: task.image_size,
            domains,
        },
    )
}

fn load_images(dir: &Path, entry: &ArrayEntry, size: usize) -> Result<Vec<Image>> {
    let values = to_f64(&read_array(dir, entry, Dtype::F64)?);
    values
        .chunks_exact(size * size)
        .map(|c| Image::new(size, c.to_vec()).map_err(Error::from))
        .collect()
}

fn load_masks(dir: &Path, entry: &ArrayEntry, size: usize) -> Result<Vec<Mask>> {
    let values = read_array(dir, entry, Dtype::U8)?;
    values
        .chunks_exact(size * size)
        .map(|c| Mask::new(size, c.to_vec()).map_err(Error::from))
        .collect()
}

fn load_domain(dir: &Path, e: &DomainEntry, size: usize) -> Result<DomainData> {
    let id = e.spec.domain_id;
    let li = to_u64(&read_array(dir, &e.labeled_index, Dtype::U64)?);
    let ui = to_u64(&read_array(dir, &e.unlabeled_index, Dtype::U64)?);
    let labeled = load_images(dir, &e.labeled_images, size)?
        .into_iter()
        .zip(load_masks(dir, &e.labeled_masks, size)?)
        .zip(li)
        .map(|((img, m), i)| Sample::labeled(img, m, id, i as usize))
        .collect();
    let truth: Vec<Option<Mask>> = match &e.unlabeled_truth {
        Some(t) => load_masks(dir, t, size)?.into_iter().map(Some).collect(),
        None => vec![None; ui.len()],
    };
    let unlabeled = load_images(dir, &e.unlabeled_images, size)?
        .into_iter()
        .zip(truth)
        .zip(ui)
        .map(|((img, t), i)| Sample::unlabeled(img, t, id, i as usize))
        .collect();
    Ok(DomainData {
        spec: e.spec.clone(),
        labeled,
        unlabeled,
    })
}

/// Reads a task written by [`save_task`].
pub fn load_task(dir: &Path) -> Result<FederationTask> {
    let manifest: TaskManifest = read_json(&dir.join("task.json"))?;
    let mut seen = Vec::new();
    let mut unseen = None;
    for e in &manifest.domains {
        let d = load_domain(dir, e, manifest.image_size)?;
        match e.role {
            DomainRole::Seen => seen.push(d),
            DomainRole::Unseen if unseen.is_none() => unseen = Some(d),
            DomainRole::Unseen => return Err(Error::format(dir.join("task.json"), "more than one unseen domain")),
        }
    }
    Ok(FederationTask {
        seen,
        unseen: unseen.ok_or_else(|| Error::format(dir.join("task.json"), "no unseen domain"))?,
        num_classes: manifest.num_classes,
        image_size: manifest.image_size,
        seed: manifest.seed,
    })
}

/// JSON half of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub architecture: Architecture,
    /// SHA-256 over the architecture and parameter layout.
    pub architecture_hash: String,
    pub round: usize,
    pub params: ArrayEntry,
    pub layers: Manifest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub architecture: Architecture,
    pub params: ModelParams,
    pub round: usize,
}

/// Hex SHA-256 of an architecture and its parameter layout.
pub fn architecture_hash(arch: &Architecture) -> String {
    let mut h = Sha256::new();
    h.update(arch.tag().as_bytes());
    for l in &arch.manifest().layers {
        h.update(l.name.as_bytes());
        for &d in &l.shape {
            h.update((d as u64).to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `<dir>/<name>.bin` and `<dir>/<name>.json`.
pub fn save_checkpoint(dir: &Path, name: &str, arch: &Architecture, params: &ModelParams, round: usize) -> Result<PathBuf> {
    arch.check_params(params)?;
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let entry = write_array(dir, format!("{name}.bin"), Dtype::F64, vec![params.len()], &f64_bytes(params.values()))?;
    let path = dir.join(format!("{name}.json"));
    write_json(
        &path,
        &CheckpointManifest {
            architecture: *arch,
            architecture_hash: architecture_hash(arch),
            round,
            params: entry,
            layers: params.manifest().clone(),
        },
    )?;
    Ok(path)
}

/// Reads a checkpoint, checking its hash and layout against the architecture
/// it declares.
pub fn load_checkpoint(dir: &Path, name: &str) -> Result<Checkpoint> {
    let path = dir.join(format!("{name}.json"));
    let m: CheckpointManifest = read_json(&path)?;
    if architecture_hash(&m.architecture) != m.architecture_hash {
        return Err(Error::format(&path, "architecture hash does not match the architecture"));
    }
    if m.architecture.manifest() != m.layers {
        return Err(Error::format(&path, "layer layout does not match the architecture"));
    }
    let values = to_f64(&read_array(dir, &m.params, Dtype::F64)?);
    Ok(Checkpoint {
        architecture: m.architecture,
        params: ModelParams::new(values, m.layers)?,
        round: m.round,
    })
}
