//! Canonical on-disk dataset layout: one directory per case holding
//! `volume.raw` (little-endian i16, C-order `D*H*W`), optional `mask.raw`
//! (u8, same order), `boxes.json`, and `meta.json`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use super::{boxes_from_volume, Box2D, BoxSet, CtVolume, DataError, SegMask};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseMeta {
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub dtype: String,
    #[serde(default)]
    pub truncated: bool,
}

/// One fully loaded case.
#[derive(Debug, Clone)]
pub struct CaseData {
    pub volume: CtVolume,
    pub mask: Option<SegMask>,
    pub boxes: BoxSet,
    pub soft_label: Option<Array4<f32>>,
}

pub fn case_dir(root: &Path, case_id: &str) -> PathBuf {
    root.join(case_id)
}

/// Write a case in the canonical layout. Boxes default to the circumscribed
/// rectangles of the mask when a mask is present and `boxes` is `None`.
pub fn write_case(
    root: &Path,
    volume: &CtVolume,
    mask: Option<&SegMask>,
    boxes: Option<&BoxSet>,
) -> Result<PathBuf, DataError> {
    let dir = case_dir(root, &volume.case_id);
    fs::create_dir_all(&dir)?;
    let (d, h, w) = volume.shape();

    let mut vw = BufWriter::new(File::create(dir.join("volume.raw"))?);
    for v in volume.voxels.iter() {
        vw.write_all(&v.to_le_bytes())?;
    }
    vw.flush()?;

    if let Some(m) = mask {
        if m.labels.dim() != volume.voxels.dim() {
            return Err(DataError::InvalidMask {
                case_id: volume.case_id.clone(),
                reason: "mask shape differs from volume".into(),
            });
        }
        let mut mw = BufWriter::new(File::create(dir.join("mask.raw"))?);
        mw.write_all(m.labels.as_slice().expect("contiguous mask"))?;
        mw.flush()?;
    }

    let derived;
    let boxes = match (boxes, mask) {
        (Some(b), _) => b,
        (None, Some(m)) => {
            derived = boxes_from_volume(m);
            &derived
        }
        (None, None) => {
            derived = BoxSet::new(volume.case_id.clone());
            &derived
        }
    };
    let all: Vec<&Box2D> = boxes.iter().collect();
    serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join("boxes.json"))?), &all)?;

    let meta = CaseMeta {
        shape: [d, h, w],
        spacing_mm: volume.spacing_mm,
        dtype: "int16".into(),
        truncated: volume.truncated,
    };
    serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join("meta.json"))?), &meta)?;
    Ok(dir)
}

pub fn read_case(root: &Path, case_id: &str) -> Result<CaseData, DataError> {
    let dir = case_dir(root, case_id);
    let meta: CaseMeta = serde_json::from_reader(BufReader::new(File::open(dir.join("meta.json"))?))?;
    let [d, h, w] = meta.shape;
    let n = d * h * w;

    let mut raw = Vec::with_capacity(n * 2);
    BufReader::new(File::open(dir.join("volume.raw"))?).read_to_end(&mut raw)?;
    if raw.len() != n * 2 {
        return Err(DataError::Store(format!(
            "{case_id}: volume.raw has {} bytes, expected {}",
            raw.len(),
            n * 2
        )));
    }
    let voxels: Vec<i16> = raw
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]))
        .collect();
    let mut volume = CtVolume::new(
        Array3::from_shape_vec((d, h, w), voxels).expect("shape"),
        meta.spacing_mm,
        case_id,
    )?;
    volume.truncated = meta.truncated;
    volume.validate()?;

    let mask_path = dir.join("mask.raw");
    let mask = if mask_path.exists() {
        let mut mraw = Vec::with_capacity(n);
        BufReader::new(File::open(mask_path)?).read_to_end(&mut mraw)?;
        if mraw.len() != n {
            return Err(DataError::Store(format!(
                "{case_id}: mask.raw has {} bytes, expected {n}",
                mraw.len()
            )));
        }
        Some(SegMask::new(Array3::from_shape_vec((d, h, w), mraw).expect("shape"), case_id)?)
    } else {
        None
    };

    let raw_boxes: Vec<Box2D> =
        serde_json::from_reader(BufReader::new(File::open(dir.join("boxes.json"))?))?;
    let boxes = BoxSet::from_boxes(case_id, raw_boxes);

    let soft_path = dir.join("soft_label.raw");
    let soft_label = if soft_path.exists() { Some(read_soft_label(&dir, d, h, w)?) } else { None };

    Ok(CaseData { volume, mask, boxes, soft_label })
}

/// Teacher-produced soft labels, stored as float32 `[3, D, H, W]`.
pub fn write_soft_label(dir: &Path, soft: &Array4<f32>) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(dir.join("soft_label.raw"))?);
    for v in soft.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_soft_label(dir: &Path, d: usize, h: usize, w: usize) -> Result<Array4<f32>, DataError> {
    let n = 3 * d * h * w;
    let mut raw = Vec::with_capacity(n * 4);
    BufReader::new(File::open(dir.join("soft_label.raw"))?).read_to_end(&mut raw)?;
    if raw.len() != n * 4 {
        return Err(DataError::Store(format!(
            "soft_label.raw has {} bytes, expected {}",
            raw.len(),
            n * 4
        )));
    }
    let vals: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Array4::from_shape_vec((3, d, h, w), vals).expect("shape"))
}

/// Case ids are the sorted directory names under the dataset root that
/// contain a `meta.json`.
pub fn list_cases(root: &Path) -> Result<Vec<String>, DataError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        if entry.path().join("meta.json").exists() {
            out.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    out.sort();
    Ok(out)
}
