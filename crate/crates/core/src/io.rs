//! External file formats.
//!
//! Binary arrays use the BGRM format (f64 matrices) and BGRP format (u32
//! panoptic rasters); structured data rides in JSON sidecars. Every reader
//! validates magic bytes, dimensions, payload length and value constraints
//! before constructing a value, reporting the byte offset of the first
//! problem, and every writer is canonical so write→read→write is
//! byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{BitMask, ClassRaster, InstancePrediction, PanopticMap, Segment};
use crate::graphs::{FeatureMap, ScoreMap};
use crate::metrics::{ClassTable, PqResult};
use crate::pipeline::{PipelineConfig, PipelineParams};
use crate::tensor::Mat;
use crate::toytask::GenConfig;

const BGRM_MAGIC: &[u8; 4] = b"BGRM";
const BGRP_MAGIC: &[u8; 4] = b"BGRP";
const HEADER_LEN: usize = 16;

// ---------------------------------------------------------------------------
// BGRM: f64 matrix
// ---------------------------------------------------------------------------

/// Encode a matrix: magic `BGRM`, u32-le rows, u32-le cols, 4 zero bytes,
/// then rows×cols f64-le values row-major.
pub fn write_bgrm(mat: &Mat) -> Result<Vec<u8>> {
    mat.check_finite("write_bgrm")?;
    if mat.rows() > u32::MAX as usize || mat.cols() > u32::MAX as usize {
        return Err(Error::Config(format!(
            "matrix {} too large for BGRM",
            mat.shape_str()
        )));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * mat.len());
    out.extend_from_slice(BGRM_MAGIC);
    out.extend_from_slice(&(mat.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(mat.cols() as u32).to_le_bytes());
    out.extend_from_slice(&[0u8; 4]);
    for v in mat.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Decode a BGRM matrix, validating the header, the exact payload length and
/// the finiteness of every value.
pub fn read_bgrm(bytes: &[u8]) -> Result<Mat> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            bytes.len() as u64,
            format!("BGRM header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
        ));
    }
    if &bytes[0..4] != BGRM_MAGIC {
        return Err(Error::format(0, "bad magic, expected 'BGRM'"));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as u64;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as u64;
    if bytes[12..16] != [0u8; 4] {
        return Err(Error::format(12, "reserved header bytes must be zero"));
    }
    let expected = HEADER_LEN as u128 + 8u128 * rows as u128 * cols as u128;
    if bytes.len() as u128 != expected {
        return Err(Error::format(
            HEADER_LEN as u64,
            format!(
                "{rows}x{cols} matrix needs {expected} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    let count = (rows * cols) as usize;
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let off = HEADER_LEN + 8 * i;
        let v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(off as u64, format!("non-finite value {v}")));
        }
        data.push(v);
    }
    Mat::new(rows as usize, cols as usize, data)
}

pub fn save_bgrm(path: &Path, mat: &Mat) -> Result<()> {
    fs::write(path, write_bgrm(mat)?)?;
    Ok(())
}

pub fn load_bgrm(path: &Path) -> Result<Mat> {
    read_bgrm(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Feature/score map sidecar
// ---------------------------------------------------------------------------

/// Sidecar describing how a BGRM matrix maps back to a CHW raster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapSidecar {
    pub layout: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl MapSidecar {
    pub fn chw(channels: usize, height: usize, width: usize) -> Self {
        MapSidecar {
            layout: "CHW".into(),
            channels,
            height,
            width,
        }
    }

    pub fn parse(json: &str) -> Result<Self> {
        let sidecar: MapSidecar = serde_json::from_str(json)?;
        sidecar.validate()?;
        Ok(sidecar)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layout != "CHW" {
            return Err(Error::Config(format!(
                "unsupported layout '{}', expected 'CHW'",
                self.layout
            )));
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "sidecar dims must be >= 1, got {}x{}x{}",
                self.channels, self.height, self.width
            )));
        }
        Ok(())
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".json");
    PathBuf::from(os)
}

fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

/// Feature map as `path` (BGRM, channels × HW) plus `path.json` sidecar.
pub fn save_feature_map(path: &Path, map: &FeatureMap) -> Result<()> {
    save_bgrm(path, &map.to_mat())?;
    write_json_file(
        &sidecar_path(path),
        &MapSidecar::chw(map.channels(), map.height(), map.width()),
    )
}

pub fn load_feature_map(path: &Path) -> Result<FeatureMap> {
    let sidecar = MapSidecar::parse(&fs::read_to_string(sidecar_path(path))?)?;
    let mat = load_bgrm(path)?;
    if mat.rows() != sidecar.channels || mat.cols() != sidecar.height * sidecar.width {
        return Err(Error::Config(format!(
            "matrix {} does not match sidecar {}x{}x{}",
            mat.shape_str(),
            sidecar.channels,
            sidecar.height,
            sidecar.width
        )));
    }
    FeatureMap::from_mat(&mat, sidecar.height, sidecar.width)
}

/// Score map as `path` (BGRM, HW × classes) plus `path.json` sidecar.
pub fn save_score_map(path: &Path, map: &ScoreMap) -> Result<()> {
    save_bgrm(path, &map.to_mat())?;
    write_json_file(
        &sidecar_path(path),
        &MapSidecar::chw(map.classes(), map.height(), map.width()),
    )
}

pub fn load_score_map(path: &Path) -> Result<ScoreMap> {
    let sidecar = MapSidecar::parse(&fs::read_to_string(sidecar_path(path))?)?;
    let mat = load_bgrm(path)?;
    if mat.rows() != sidecar.height * sidecar.width || mat.cols() != sidecar.channels {
        return Err(Error::Config(format!(
            "matrix {} does not match sidecar {}x{}x{}",
            mat.shape_str(),
            sidecar.channels,
            sidecar.height,
            sidecar.width
        )));
    }
    ScoreMap::from_mat(&mat, sidecar.height, sidecar.width)
}

// ---------------------------------------------------------------------------
// BGRP: panoptic map
// ---------------------------------------------------------------------------

/// Encode the raster: magic `BGRP`, u32-le height, u32-le width, 4 zero
/// bytes, then H×W u32-le segment ids.
pub fn write_bgrp_raster(map: &PanopticMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * map.ids().len());
    out.extend_from_slice(BGRP_MAGIC);
    out.extend_from_slice(&(map.height() as u32).to_le_bytes());
    out.extend_from_slice(&(map.width() as u32).to_le_bytes());
    out.extend_from_slice(&[0u8; 4]);
    for id in map.ids() {
        out.extend_from_slice(&id.to_le_bytes());
    }
    out
}

/// Decode a BGRP raster into (height, width, ids) without segment-table
/// validation; pair with [`panoptic_from_parts`].
pub fn read_bgrp_raster(bytes: &[u8]) -> Result<(usize, usize, Vec<u32>)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            bytes.len() as u64,
            format!("BGRP header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
        ));
    }
    if &bytes[0..4] != BGRP_MAGIC {
        return Err(Error::format(0, "bad magic, expected 'BGRP'"));
    }
    let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as u64;
    let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as u64;
    if bytes[12..16] != [0u8; 4] {
        return Err(Error::format(12, "reserved header bytes must be zero"));
    }
    let expected = HEADER_LEN as u128 + 4u128 * height as u128 * width as u128;
    if bytes.len() as u128 != expected {
        return Err(Error::format(
            HEADER_LEN as u64,
            format!(
                "{height}x{width} raster needs {expected} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    let count = (height * width) as usize;
    let mut ids = Vec::with_capacity(count);
    for i in 0..count {
        let off = HEADER_LEN + 4 * i;
        ids.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
    }
    Ok((height as usize, width as usize, ids))
}

/// Parse the segment-table sidecar.
pub fn parse_segment_table(json: &str) -> Result<Vec<Segment>> {
    Ok(serde_json::from_str(json)?)
}

/// Assemble and validate a panoptic map from its two parts.
pub fn panoptic_from_parts(
    height: usize,
    width: usize,
    ids: Vec<u32>,
    segments: Vec<Segment>,
) -> Result<PanopticMap> {
    PanopticMap::new(height, width, ids, segments)
}

/// Panoptic map as `path` (BGRP raster) plus `path.json` segment table.
pub fn save_panoptic(path: &Path, map: &PanopticMap) -> Result<()> {
    fs::write(path, write_bgrp_raster(map))?;
    write_json_file(&sidecar_path(path), &map.segments().to_vec())
}

pub fn load_panoptic(path: &Path) -> Result<PanopticMap> {
    let (h, w, ids) = read_bgrp_raster(&fs::read(path)?)?;
    let segments = parse_segment_table(&fs::read_to_string(sidecar_path(path))?)?;
    panoptic_from_parts(h, w, ids, segments)
}

// ---------------------------------------------------------------------------
// Instance predictions
// ---------------------------------------------------------------------------

/// JSON carrier for scored instance masks; masks are rows of '0'/'1' digits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstancesFile {
    pub height: usize,
    pub width: usize,
    pub instances: Vec<InstanceEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceEntry {
    pub class_id: u32,
    pub score: f64,
    pub mask: Vec<String>,
}

impl InstancesFile {
    pub fn parse(json: &str) -> Result<Self> {
        let file: InstancesFile = serde_json::from_str(json)?;
        file.to_instances()?;
        Ok(file)
    }

    pub fn from_instances(instances: &[InstancePrediction], height: usize, width: usize) -> Result<Self> {
        let mut entries = Vec::with_capacity(instances.len());
        for inst in instances {
            if inst.mask.height() != height || inst.mask.width() != width {
                return Err(Error::shape(
                    "InstancesFile",
                    format!("{height}x{width}"),
                    format!("{}x{}", inst.mask.height(), inst.mask.width()),
                ));
            }
            let mask = (0..height)
                .map(|y| {
                    (0..width)
                        .map(|x| if inst.mask.get(y, x) { '1' } else { '0' })
                        .collect()
                })
                .collect();
            entries.push(InstanceEntry {
                class_id: inst.class_id,
                score: inst.score,
                mask,
            });
        }
        Ok(InstancesFile {
            height,
            width,
            instances: entries,
        })
    }

    pub fn to_instances(&self) -> Result<Vec<InstancePrediction>> {
        let mut out = Vec::with_capacity(self.instances.len());
        for (i, entry) in self.instances.iter().enumerate() {
            // Validate every dimension before allocating anything sized by
            // the declared height × width.
            if entry.mask.len() != self.height {
                return Err(Error::Config(format!(
                    "instance {i}: mask has {} rows, expected {}",
                    entry.mask.len(),
                    self.height
                )));
            }
            for (y, row) in entry.mask.iter().enumerate() {
                if row.len() != self.width {
                    return Err(Error::Config(format!(
                        "instance {i} row {y}: {} columns, expected {}",
                        row.len(),
                        self.width
                    )));
                }
            }
            let mut bits = Vec::with_capacity(self.height.saturating_mul(self.width));
            for (y, row) in entry.mask.iter().enumerate() {
                for ch in row.chars() {
                    match ch {
                        '0' => bits.push(false),
                        '1' => bits.push(true),
                        other => {
                            return Err(Error::Config(format!(
                                "instance {i} row {y}: invalid mask character '{other}'"
                            )))
                        }
                    }
                }
            }
            out.push(InstancePrediction::new(
                BitMask::new(self.height, self.width, bits)?,
                entry.class_id,
                entry.score,
            )?);
        }
        Ok(out)
    }
}

pub fn save_instances(path: &Path, file: &InstancesFile) -> Result<()> {
    write_json_file(path, file)
}

pub fn load_instances(path: &Path) -> Result<InstancesFile> {
    InstancesFile::parse(&fs::read_to_string(path)?)
}

// ---------------------------------------------------------------------------
// Semantic class raster (BGRM of class ids)
// ---------------------------------------------------------------------------

/// Class rasters travel as BGRM H×W matrices of integer-valued class ids.
pub fn class_raster_to_mat(raster: &ClassRaster) -> Mat {
    Mat::new(
        raster.height(),
        raster.width(),
        raster.as_slice().iter().map(|&c| c as f64).collect(),
    )
    .expect("layout")
}

pub fn class_raster_from_mat(mat: &Mat) -> Result<ClassRaster> {
    let mut classes = Vec::with_capacity(mat.len());
    for (i, &v) in mat.as_slice().iter().enumerate() {
        if v < 0.0 || v > u32::MAX as f64 || v.fract() != 0.0 {
            return Err(Error::Config(format!(
                "semantic raster entry {i} is {v}, expected a non-negative integer"
            )));
        }
        classes.push(v as u32);
    }
    ClassRaster::new(mat.rows(), mat.cols(), classes)
}

// ---------------------------------------------------------------------------
// Class embeddings (cosine mode)
// ---------------------------------------------------------------------------

/// Word-embedding table keyed by class name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingFile {
    pub dim: usize,
    pub embeddings: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingFile {
    pub fn parse(json: &str) -> Result<Self> {
        let file: EmbeddingFile = serde_json::from_str(json)?;
        file.validate()?;
        Ok(file)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("embedding dim must be >= 1".into()));
        }
        for (name, vec) in &self.embeddings {
            if vec.len() != self.dim {
                return Err(Error::Config(format!(
                    "embedding '{name}' has {} values, expected {}",
                    vec.len(),
                    self.dim
                )));
            }
            if vec.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("embedding '{name}' has non-finite values")));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        self.embeddings
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Config(format!("no embedding for class '{name}'")))
    }

    /// Stack embeddings for an ordered list of class names.
    pub fn stack(&self, names: &[String]) -> Result<Mat> {
        let rows: Vec<Vec<f64>> = names
            .iter()
            .map(|n| self.get(n).map(|v| v.to_vec()))
            .collect::<Result<_>>()?;
        Mat::from_rows(&rows)
    }
}

pub fn save_embeddings(path: &Path, file: &EmbeddingFile) -> Result<()> {
    write_json_file(path, file)
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingFile> {
    EmbeddingFile::parse(&fs::read_to_string(path)?)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Checkpoint manifest: pipeline structure, generator settings, the class
/// table and the parameter file map grouped by layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub version: u32,
    pub pipeline: PipelineConfig,
    pub gen: GenConfig,
    pub class_table: ClassTable,
    /// group ("layer0", "projection", …) → parameter → file name
    pub params: BTreeMap<String, BTreeMap<String, String>>,
}

impl CheckpointManifest {
    pub fn parse(json: &str) -> Result<Self> {
        let manifest: CheckpointManifest = serde_json::from_str(json)?;
        if manifest.version != 1 {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                manifest.version
            )));
        }
        manifest.pipeline.validate()?;
        manifest.gen.validate()?;
        Ok(manifest)
    }
}

fn split_param_name(name: &str) -> (String, String) {
    match name.split_once('.') {
        Some((group, rest)) => (group.to_string(), rest.to_string()),
        None => ("misc".to_string(), name.to_string()),
    }
}

/// Write manifest plus one BGRM file per parameter into `dir`.
pub fn save_checkpoint(
    dir: &Path,
    cfg: &PipelineConfig,
    gen: &GenConfig,
    class_table: &ClassTable,
    params: &PipelineParams,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut file_map: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    for (name, mat) in params.named() {
        let file = format!("{}.bgrm", name.replace('.', "_"));
        save_bgrm(&dir.join(&file), mat)?;
        let (group, leaf) = split_param_name(&name);
        file_map.entry(group).or_default().insert(leaf, file);
    }
    let manifest = CheckpointManifest {
        version: 1,
        pipeline: cfg.clone(),
        gen: gen.clone(),
        class_table: class_table.clone(),
        params: file_map,
    };
    write_json_file(&dir.join("manifest.json"), &manifest)
}

/// Load a checkpoint directory back into parameters. File-level problems
/// surface as their own errors rather than as missing parameters.
pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointManifest, PipelineParams)> {
    let manifest = CheckpointManifest::parse(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut mats: BTreeMap<String, Mat> = BTreeMap::new();
    for (group, entries) in &manifest.params {
        for (leaf, file) in entries {
            mats.insert(format!("{group}.{leaf}"), load_bgrm(&dir.join(file))?);
        }
    }
    let params = PipelineParams::from_named(&manifest.pipeline, &|name: &str| {
        mats.get(name).cloned()
    })?;
    Ok((manifest, params))
}

// ---------------------------------------------------------------------------
// PQ report
// ---------------------------------------------------------------------------

/// The exact JSON key layout of the `pq` and `eval` commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PqReport {
    pub per_class: BTreeMap<u32, crate::metrics::ClassQuality>,
    #[serde(rename = "PQ")]
    pub pq: f64,
    #[serde(rename = "PQ_th")]
    pub pq_th: f64,
    #[serde(rename = "PQ_st")]
    pub pq_st: f64,
    #[serde(rename = "SQ")]
    pub sq: f64,
    #[serde(rename = "RQ")]
    pub rq: f64,
}

impl From<&PqResult> for PqReport {
    fn from(res: &PqResult) -> Self {
        PqReport {
            per_class: res.per_class.clone(),
            pq: res.pq,
            pq_th: res.pq_things,
            pq_st: res.pq_stuff,
            sq: res.sq,
            rq: res.rq,
        }
    }
}

pub fn save_pq_report(path: &Path, report: &PqReport) -> Result<()> {
    write_json_file(path, report)
}
