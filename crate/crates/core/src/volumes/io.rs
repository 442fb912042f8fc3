//! Sidecar volume format: `<name>.json` header plus `<name>.raw` little-endian
//! payload of exactly `D*H*W` elements in `DHW` row-major order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{voxel_count, LabelMap, LabelSemantics, Modality, Volume};
use crate::{Error, Result};

const ORDER: &str = "DHW-row-major";
const LABEL_MODALITY: &str = "LABEL";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    U8,
    U16,
}

impl Dtype {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "u8" => Ok(Dtype::U8),
            "u16" => Ok(Dtype::U16),
            other => Err(Error::UnknownDtype(other.to_string())),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::U8 => "u8",
            Dtype::U16 => "u16",
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
            Dtype::U16 => 2,
        }
    }
}

/// The JSON header, field order as written to disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub dtype: String,
    pub modality: String,
    pub order: String,
}

/// Resolves `name`, `name.json` or `name.raw` to the `(json, raw)` pair.
pub fn sidecar_paths(path: &Path) -> (PathBuf, PathBuf) {
    let base = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut json = base.clone().into_os_string();
    json.push(".json");
    let mut raw = base.into_os_string();
    raw.push(".raw");
    (PathBuf::from(json), PathBuf::from(raw))
}

fn modality_str(m: Modality) -> &'static str {
    match m {
        Modality::PetSuv => "PET_SUV",
        Modality::CtHu => "CT_HU",
        Modality::Prob => "PROB",
    }
}

fn parse_modality(s: &str, path: &Path) -> Result<Modality> {
    match s {
        "PET_SUV" => Ok(Modality::PetSuv),
        "CT_HU" => Ok(Modality::CtHu),
        "PROB" => Ok(Modality::Prob),
        other => Err(Error::Sidecar {
            path: path.to_path_buf(),
            message: format!("modality {other:?} is not a scalar image modality"),
        }),
    }
}

fn write_pair(path: &Path, header: &Sidecar, payload: &[u8]) -> Result<()> {
    let (json, raw) = sidecar_paths(path);
    if let Some(parent) = json.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(header).map_err(|source| Error::Json { path: json.clone(), source })?;
    text.push('\n');
    fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    fs::write(&raw, payload).map_err(|e| Error::io(&raw, e))?;
    Ok(())
}

fn read_pair(path: &Path) -> Result<(Sidecar, Dtype, Vec<u8>, PathBuf)> {
    let (json, raw) = sidecar_paths(path);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let header: Sidecar = serde_json::from_str(&text).map_err(|source| Error::Json { path: json.clone(), source })?;
    if header.order != ORDER {
        return Err(Error::Sidecar { path: json, message: format!("unsupported order {:?}", header.order) });
    }
    let dtype = Dtype::parse(&header.dtype)?;
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let expected = voxel_count(header.shape) * dtype.size();
    if bytes.len() != expected {
        return Err(Error::PayloadSize { path: raw, expected, found: bytes.len() });
    }
    Ok((header, dtype, bytes, json))
}

fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

fn decode_u16(bytes: &[u8]) -> Vec<u16> {
    bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect()
}

pub fn write_volume(vol: &Volume, path: &Path) -> Result<()> {
    let header = Sidecar {
        shape: vol.shape(),
        spacing_mm: vol.spacing(),
        dtype: Dtype::F32.as_str().to_string(),
        modality: modality_str(vol.modality()).to_string(),
        order: ORDER.to_string(),
    };
    let mut payload = Vec::with_capacity(vol.data().len() * 4);
    for v in vol.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    write_pair(path, &header, &payload)
}

/// Reads a scalar volume. Integer payloads are widened to `f32`.
pub fn read_volume(path: &Path) -> Result<Volume> {
    let (header, dtype, bytes, json) = read_pair(path)?;
    let modality = parse_modality(&header.modality, &json)?;
    let data = match dtype {
        Dtype::F32 => decode_f32(&bytes),
        Dtype::U8 => bytes.iter().map(|&b| b as f32).collect(),
        Dtype::U16 => decode_u16(&bytes).into_iter().map(|v| v as f32).collect(),
    };
    Volume::new(header.shape, header.spacing_mm, modality, data)
}

/// Writes a label map as `u8` when every value fits, `u16` otherwise.
pub fn write_labels(labels: &LabelMap, path: &Path) -> Result<()> {
    let max = labels.data().iter().copied().max().unwrap_or(0);
    let (dtype, payload) = if max <= u8::MAX as u32 {
        (Dtype::U8, labels.data().iter().map(|&v| v as u8).collect::<Vec<_>>())
    } else if max <= u16::MAX as u32 {
        let mut p = Vec::with_capacity(labels.data().len() * 2);
        for &v in labels.data() {
            p.extend_from_slice(&(v as u16).to_le_bytes());
        }
        (Dtype::U16, p)
    } else {
        return Err(Error::LabelValue { value: max, semantics: "u16 label file".to_string() });
    };
    let header = Sidecar {
        shape: labels.shape(),
        spacing_mm: labels.spacing(),
        dtype: dtype.as_str().to_string(),
        modality: LABEL_MODALITY.to_string(),
        order: ORDER.to_string(),
    };
    write_pair(path, &header, &payload)
}

pub fn read_labels(path: &Path, semantics: LabelSemantics) -> Result<LabelMap> {
    let (header, dtype, bytes, json) = read_pair(path)?;
    if header.modality != LABEL_MODALITY {
        return Err(Error::Sidecar {
            path: json,
            message: format!("expected LABEL modality, found {:?}", header.modality),
        });
    }
    let data: Vec<u32> = match dtype {
        Dtype::U8 => bytes.iter().map(|&b| b as u32).collect(),
        Dtype::U16 => decode_u16(&bytes).into_iter().map(u32::from).collect(),
        Dtype::F32 => {
            return Err(Error::Sidecar { path: json, message: "label maps must use an integer dtype".to_string() })
        }
    };
    LabelMap::new(header.shape, header.spacing_mm, semantics, data)
}
