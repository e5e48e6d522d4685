//! Image containers and the raw + JSON sidecar file format.
//!
//! A volume `<id>` is stored as `<id>.raw` (little-endian `f32`, C order over `(z, y, x)`) and
//! `<id>.json` (`{"shape":[K,I,J],"spacing":[dz,dy,dx],"dtype":"f32le"}`). Label volumes use one
//! pair per class with the suffix `_<class>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const ABNORMALITY_CLASSES: [&str; 4] =
    ["metastatic_tumor_analog", "extracranial_tumor_analog", "cavity_analog", "structural_change_analog"];

/// Anatomy classes segmented by the fidelity network. Index 0 is background.
pub const ANATOMY_CLASSES: [&str; 6] =
    ["background", "skull_analog", "brain_analog", "ventricle_analog", "eye_left_analog", "eye_right_analog"];

/// A 3D scalar image indexed `(z, y, x)` with voxel spacing in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub data: Array3<f32>,
    pub spacing: [f64; 3],
    pub id: String,
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: [f64; 3], id: impl Into<String>) -> Result<Self> {
        let v = Self { data, spacing, id: id.into() };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(invalid(format!("volume {} has non-positive spacing {:?}", self.id, self.spacing)));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(invalid(format!("volume {} contains non-finite values", self.id)));
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 3] {
        let (k, i, j) = self.data.dim();
        [k, i, j]
    }
}

/// One axial image in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    pub data: Array2<f32>,
    pub source_id: String,
    pub index_k: usize,
}

/// Per-class binary masks aligned with a [`Volume`]. Abnormality classes may overlap.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabelVolume {
    pub masks: BTreeMap<String, Array3<u8>>,
}

impl LabelVolume {
    pub fn mask(&self, class: &str) -> Option<&Array3<u8>> {
        self.masks.get(class)
    }

    /// Union of all abnormality masks.
    pub fn any_abnormality(&self, shape: [usize; 3]) -> Array3<u8> {
        let mut out = Array3::<u8>::zeros((shape[0], shape[1], shape[2]));
        for class in ABNORMALITY_CLASSES {
            if let Some(m) = self.masks.get(class) {
                ndarray::Zip::from(&mut out).and(m).for_each(|o, &v| *o |= v);
            }
        }
        out
    }

    /// Anatomy label map (index into [`ANATOMY_CLASSES`]); later classes win on overlap.
    pub fn anatomy_map(&self, shape: [usize; 3]) -> Array3<u8> {
        let mut out = Array3::<u8>::zeros((shape[0], shape[1], shape[2]));
        for (idx, class) in ANATOMY_CLASSES.iter().enumerate().skip(1) {
            if let Some(m) = self.masks.get(&anatomy_key(class)) {
                ndarray::Zip::from(&mut out).and(m).for_each(|o, &v| {
                    if v != 0 {
                        *o = idx as u8;
                    }
                });
            }
        }
        out
    }

    pub fn validate(&self, shape: [usize; 3]) -> Result<()> {
        for (name, m) in &self.masks {
            if m.shape() != shape {
                return Err(invalid(format!("mask {name} has shape {:?}, expected {shape:?}", m.shape())));
            }
            if m.iter().any(|&v| v > 1) {
                return Err(invalid(format!("mask {name} is not binary")));
            }
        }
        Ok(())
    }
}

pub fn anatomy_key(class: &str) -> String {
    format!("anatomy_{class}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
}

impl VolumeHeader {
    pub fn new(shape: [usize; 3], spacing: [f64; 3]) -> Self {
        Self { shape, spacing, dtype: "f32le".into(), normalization: None, stride: None }
    }
}

fn pair_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{id}.raw")), dir.join(format!("{id}.json")))
}

pub fn write_array(dir: &Path, id: &str, data: &Array3<f32>, header: &VolumeHeader) -> Result<()> {
    let (raw, json) = pair_paths(dir, id);
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data.as_standard_layout().iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;
    fs::write(&json, serde_json::to_vec(header)?).map_err(|e| Error::io(&json, e))?;
    Ok(())
}

pub fn read_array(dir: &Path, id: &str) -> Result<(Array3<f32>, VolumeHeader)> {
    let (raw, json) = pair_paths(dir, id);
    if !json.exists() {
        return Err(Error::MissingArtifact(json));
    }
    let header: VolumeHeader = serde_json::from_slice(&fs::read(&json).map_err(|e| Error::io(&json, e))?)?;
    if header.dtype != "f32le" {
        return Err(invalid(format!("{}: unsupported dtype {}", json.display(), header.dtype)));
    }
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let n: usize = header.shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(invalid(format!("{}: expected {} bytes, found {}", raw.display(), n * 4, bytes.len())));
    }
    let values: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let [k, i, j] = header.shape;
    let data = Array3::from_shape_vec((k, i, j), values).map_err(|e| invalid(e.to_string()))?;
    Ok((data, header))
}

pub fn write_volume(dir: &Path, v: &Volume) -> Result<()> {
    write_array(dir, &v.id, &v.data, &VolumeHeader::new(v.shape(), v.spacing))
}

pub fn read_volume(dir: &Path, id: &str) -> Result<Volume> {
    let (data, header) = read_array(dir, id)?;
    Volume::new(data, header.spacing, id)
}

pub fn write_labels(dir: &Path, id: &str, labels: &LabelVolume, spacing: [f64; 3]) -> Result<()> {
    for (class, mask) in &labels.masks {
        let (k, i, j) = mask.dim();
        write_array(dir, &format!("{id}_{class}"), &mask.mapv(f32::from), &VolumeHeader::new([k, i, j], spacing))?;
    }
    Ok(())
}

/// Reads every class in `classes` that exists on disk.
pub fn read_labels<'a>(dir: &Path, id: &str, classes: impl IntoIterator<Item = &'a str>) -> Result<LabelVolume> {
    let mut masks = BTreeMap::new();
    for class in classes {
        match read_array(dir, &format!("{id}_{class}")) {
            Ok((data, _)) => {
                masks.insert(class.to_string(), data.mapv(|v| u8::from(v > 0.5)));
            }
            Err(Error::MissingArtifact(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(LabelVolume { masks })
}

/// All label keys written by the phantom generator.
pub fn all_label_keys() -> Vec<String> {
    ABNORMALITY_CLASSES
        .iter()
        .map(|c| c.to_string())
        .chain(ANATOMY_CLASSES.iter().map(|c| anatomy_key(c)))
        .collect()
}
