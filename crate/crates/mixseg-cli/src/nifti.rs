//! Minimal NIfTI-1 import adapter: converts external scans (and optional
//! label volumes) into the canonical raw dataset layout. Supports single
//! `.nii` / `.nii.gz` files with the common scalar datatypes.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use anyhow::{bail, Context, Result};
use ndarray::Array3;

use mixseg::data::{CtVolume, SegMask};

struct Header {
    dims: [usize; 3],
    datatype: i16,
    pixdim: [f32; 3],
    vox_offset: usize,
    scl_slope: f32,
    scl_inter: f32,
    swap: bool,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .with_context(|| format!("opening {}", path.display()))?
        .read_to_end(&mut raw)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        return Ok(out);
    }
    Ok(raw)
}

fn i16_at(b: &[u8], off: usize, swap: bool) -> i16 {
    let v = [b[off], b[off + 1]];
    if swap {
        i16::from_be_bytes(v)
    } else {
        i16::from_le_bytes(v)
    }
}

fn f32_at(b: &[u8], off: usize, swap: bool) -> f32 {
    let v = [b[off], b[off + 1], b[off + 2], b[off + 3]];
    if swap {
        f32::from_be_bytes(v)
    } else {
        f32::from_le_bytes(v)
    }
}

fn parse_header(b: &[u8]) -> Result<Header> {
    if b.len() < 352 {
        bail!("file too short for a NIfTI-1 header");
    }
    if &b[344..347] != b"n+1" {
        bail!("not a single-file NIfTI-1 volume (magic mismatch)");
    }
    // dim[0] outside 1..=7 signals the opposite byte order
    let mut swap = false;
    let mut ndim = i16_at(b, 40, false);
    if !(1..=7).contains(&ndim) {
        swap = true;
        ndim = i16_at(b, 40, true);
    }
    if ndim < 3 {
        bail!("expected a 3D volume, got {ndim} dims");
    }
    let dim = |i: usize| i16_at(b, 40 + 2 * i, swap).max(1) as usize;
    for extra in 4..=ndim as usize {
        if dim(extra) > 1 {
            bail!("volumes with a non-singleton dim {extra} are not supported");
        }
    }
    let datatype = i16_at(b, 70, swap);
    let slope = f32_at(b, 112, swap);
    Ok(Header {
        dims: [dim(1), dim(2), dim(3)],
        datatype,
        pixdim: [f32_at(b, 80, swap), f32_at(b, 84, swap), f32_at(b, 88, swap)],
        vox_offset: f32_at(b, 108, swap) as usize,
        scl_slope: if slope == 0.0 { 1.0 } else { slope },
        scl_inter: f32_at(b, 116, swap),
        swap,
    })
}

fn voxels_f64(b: &[u8], h: &Header) -> Result<Vec<f64>> {
    let n = h.dims[0] * h.dims[1] * h.dims[2];
    let data = &b[h.vox_offset..];
    let fetch = |i: usize, size: usize| -> &[u8] { &data[i * size..(i + 1) * size] };
    let get = |i: usize| -> Result<f64> {
        Ok(match h.datatype {
            2 => fetch(i, 1)[0] as f64,
            256 => fetch(i, 1)[0] as i8 as f64,
            4 => i16_at(data, i * 2, h.swap) as f64,
            512 => {
                let v = i16_at(data, i * 2, h.swap) as u16;
                v as f64
            }
            8 => {
                let s = fetch(i, 4);
                let v = [s[0], s[1], s[2], s[3]];
                (if h.swap { i32::from_be_bytes(v) } else { i32::from_le_bytes(v) }) as f64
            }
            16 => f32_at(data, i * 4, h.swap) as f64,
            64 => {
                let s = fetch(i, 8);
                let mut v = [0u8; 8];
                v.copy_from_slice(s);
                if h.swap {
                    f64::from_be_bytes(v)
                } else {
                    f64::from_le_bytes(v)
                }
            }
            other => bail!("unsupported NIfTI datatype {other}"),
        })
    };
    if data.len() < n * (if h.datatype == 64 { 8 } else { 1 }) {
        bail!("data section shorter than the declared dimensions");
    }
    (0..n).map(get).collect()
}

/// Load a NIfTI scan as a `[D, H, W]` HU volume (`D` is the slice axis).
pub fn load_volume(path: &Path, case_id: &str) -> Result<CtVolume> {
    let raw = read_bytes(path)?;
    let h = parse_header(&raw)?;
    let vals = voxels_f64(&raw, &h)?;
    let [nx, ny, nz] = h.dims;
    let mut voxels = Array3::<i16>::zeros((nz, ny, nx));
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let v = vals[i + nx * (j + ny * k)];
                let hu = (h.scl_slope as f64 * v + h.scl_inter as f64).round();
                voxels[(k, j, i)] = hu.clamp(i16::MIN as f64, i16::MAX as f64) as i16;
            }
        }
    }
    Ok(CtVolume::new(
        voxels,
        [h.pixdim[2].max(1e-3) as f64, h.pixdim[1].max(1e-3) as f64, h.pixdim[0].max(1e-3) as f64],
        case_id,
    )?)
}

/// Load a NIfTI segmentation; values clamp into {0, 1, 2}.
pub fn load_mask(path: &Path, case_id: &str) -> Result<SegMask> {
    let raw = read_bytes(path)?;
    let h = parse_header(&raw)?;
    let vals = voxels_f64(&raw, &h)?;
    let [nx, ny, nz] = h.dims;
    let mut labels = Array3::<u8>::zeros((nz, ny, nx));
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                labels[(k, j, i)] = (vals[i + nx * (j + ny * k)].round().max(0.0) as u8).min(2);
            }
        }
    }
    Ok(SegMask::new(labels, case_id)?)
}
