//! On-disk dataset layout.
//!
//! A dataset directory holds `manifest.json`, one little-endian `f32` file per
//! feature matrix, the text bank (`textbank.f32`) and a ground-truth JSON file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::types::{Dataset, GroundTruth, Segment, SnippetFeatureBundle, Subset, TextBank, Video};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TEXT_BANK_FILE: &str = "textbank.f32";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

fn default_text_bank() -> String {
    TEXT_BANK_FILE.into()
}

fn default_ground_truth() -> String {
    GROUND_TRUTH_FILE.into()
}

fn default_snippet_len() -> usize {
    16
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub dim: usize,
    pub vlp_dim: usize,
    pub classes: Vec<String>,
    pub videos: Vec<ManifestVideo>,
    #[serde(default = "default_text_bank")]
    pub text_bank: String,
    #[serde(default = "default_ground_truth")]
    pub ground_truth: String,
    #[serde(default = "default_snippet_len")]
    pub snippet_len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestVideo {
    pub id: String,
    pub num_snippets: usize,
    pub fps: f64,
    pub duration_s: f64,
    pub rgb: String,
    pub flow: String,
    pub vlp: String,
    #[serde(default)]
    pub subset: Subset,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct GtFile {
    version: String,
    database: BTreeMap<String, GtVideo>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct GtVideo {
    annotations: Vec<GtAnnotation>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct GtAnnotation {
    label: String,
    segment: [f64; 2],
}

/// Reads a row-major little-endian `f32` matrix of the given shape.
pub fn read_f32_matrix(path: &Path, rows: usize, cols: usize) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = rows * cols * 4;
    if bytes.len() != expected {
        return Err(Error::Shape(format!(
            "{}: {} bytes, expected {expected} for [{rows} x {cols}] f32",
            path.display(),
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(path.display().to_string()));
    }
    Ok(Tensor::matrix(rows, cols, data)?)
}

/// Writes a tensor as little-endian `f32`, narrowing each value.
pub fn write_f32_matrix(path: &Path, t: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(t.numel() * 4);
    for &v in t.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Parses a ground-truth file against a known class list.
pub fn read_ground_truth(path: &Path, classes: &[String]) -> Result<GroundTruth> {
    let file: GtFile = read_json(path)?;
    let mut videos = BTreeMap::new();
    for (vid, entry) in file.database {
        let mut segs = Vec::with_capacity(entry.annotations.len());
        for a in entry.annotations {
            let class_id = classes
                .iter()
                .position(|c| *c == a.label)
                .ok_or_else(|| Error::UnknownClass(a.label.clone()))?;
            let [start, end] = a.segment;
            if !(start.is_finite() && end.is_finite()) {
                return Err(Error::NonFinite(format!("{vid} segment")));
            }
            segs.push(Segment { class_id, start, end });
        }
        videos.insert(vid, segs);
    }
    Ok(GroundTruth { classes: classes.to_vec(), videos })
}

/// Parses a ground-truth file, taking the class list from its labels in
/// lexical order.
pub fn read_ground_truth_infer_classes(path: &Path) -> Result<GroundTruth> {
    let file: GtFile = read_json(path)?;
    let mut classes: Vec<String> = Vec::new();
    for entry in file.database.values() {
        for a in &entry.annotations {
            if !classes.contains(&a.label) {
                classes.push(a.label.clone());
            }
        }
    }
    classes.sort();
    read_ground_truth(path, &classes)
}

pub fn write_ground_truth(path: &Path, gt: &GroundTruth) -> Result<()> {
    let database = gt
        .videos
        .iter()
        .map(|(vid, segs)| {
            let annotations = segs
                .iter()
                .map(|s| GtAnnotation { label: gt.classes[s.class_id].clone(), segment: [s.start, s.end] })
                .collect();
            (vid.clone(), GtVideo { annotations })
        })
        .collect();
    write_json(path, &GtFile { version: "1.0".into(), database })
}

/// Loads and validates a dataset from its manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest: Manifest = read_json(manifest_path)?;
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let c = manifest.classes.len();

    let bank = read_f32_matrix(&root.join(&manifest.text_bank), c + 1, manifest.vlp_dim)?;
    let text_bank = TextBank::new(bank, manifest.classes.clone())?;

    let gt_path = root.join(&manifest.ground_truth);
    let gt = if gt_path.exists() {
        read_ground_truth(&gt_path, &manifest.classes)?
    } else {
        GroundTruth { classes: manifest.classes.clone(), videos: BTreeMap::new() }
    };

    let mut videos = Vec::with_capacity(manifest.videos.len());
    for mv in &manifest.videos {
        let n = mv.num_snippets;
        if n == 0 {
            return Err(Error::Data(format!("{}: no snippets", mv.id)));
        }
        let features = SnippetFeatureBundle {
            video_id: mv.id.clone(),
            rgb: read_f32_matrix(&root.join(&mv.rgb), n, manifest.dim)?,
            flow: read_f32_matrix(&root.join(&mv.flow), n, manifest.dim)?,
            vlp_image: read_f32_matrix(&root.join(&mv.vlp), n, manifest.vlp_dim)?,
            fps: mv.fps,
            duration: mv.duration_s,
            snippet_len: manifest.snippet_len,
        };
        let segments = gt.videos.get(&mv.id).cloned().unwrap_or_default();
        videos.push(Video { features, segments, subset: mv.subset });
    }
    for vid in gt.videos.keys() {
        if !manifest.videos.iter().any(|v| &v.id == vid) {
            log::warn!("ground truth names video {vid:?} absent from the manifest");
        }
    }
    let ds = Dataset { dim: manifest.dim, vlp_dim: manifest.vlp_dim, videos, text_bank };
    ds.validate()?;
    Ok(ds)
}

/// Writes `ds` under `dir` (created if missing); returns the manifest path.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut videos = Vec::with_capacity(ds.videos.len());
    for v in &ds.videos {
        let f = &v.features;
        let names = [format!("{}_rgb.f32", f.video_id), format!("{}_flow.f32", f.video_id), format!("{}_vlp.f32", f.video_id)];
        write_f32_matrix(&dir.join(&names[0]), &f.rgb)?;
        write_f32_matrix(&dir.join(&names[1]), &f.flow)?;
        write_f32_matrix(&dir.join(&names[2]), &f.vlp_image)?;
        let [rgb, flow, vlp] = names;
        videos.push(ManifestVideo {
            id: f.video_id.clone(),
            num_snippets: f.num_snippets(),
            fps: f.fps,
            duration_s: f.duration,
            rgb,
            flow,
            vlp,
            subset: v.subset,
        });
    }
    let snippet_len = ds.videos.first().map_or(16, |v| v.features.snippet_len);
    let manifest = Manifest {
        dim: ds.dim,
        vlp_dim: ds.vlp_dim,
        classes: ds.classes().to_vec(),
        videos,
        text_bank: TEXT_BANK_FILE.into(),
        ground_truth: GROUND_TRUTH_FILE.into(),
        snippet_len,
    };
    write_f32_matrix(&dir.join(TEXT_BANK_FILE), &ds.text_bank.embeddings)?;
    write_ground_truth(&dir.join(GROUND_TRUTH_FILE), &ds.ground_truth(None))?;
    let path = dir.join(MANIFEST_FILE);
    write_json(&path, &manifest)?;
    Ok(path)
}
