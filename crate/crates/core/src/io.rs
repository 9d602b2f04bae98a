//! On-disk formats: the LTDL tensor container, a flat-binary import path
//! for external datasets, and 16-bit PGM export for visual inspection.
//!
//! Container layout (all integers and floats little-endian):
//! magic `LTDL` (4 bytes), format version `u16`, order `u16`, dims as
//! `u32` per mode, payload of `f64` in the fixed tensor layout. A 2-order
//! file stores a column-major matrix. Files round-trip bit-exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::dictionary::DictionaryPair;
use crate::error::{LtdlError, Result};
use crate::grouping::Msi;
use crate::tensor::{Matrix, Tensor3};

const MAGIC: &[u8; 4] = b"LTDL";
const FORMAT_VERSION: u16 = 1;

fn format_err(message: impl Into<String>, offset: u64) -> LtdlError {
    LtdlError::Format { message: message.into(), offset: Some(offset) }
}

/// Writes bytes atomically: a temp file in the same directory, then rename.
fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = {
        let mut name = path.file_name().unwrap_or_default().to_os_string();
        name.push(format!(".tmp.{}", std::process::id()));
        path.with_file_name(name)
    };
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn encode(dims: &[usize], data: &[f64]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(8 + 4 * dims.len() + 8 * data.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(dims.len() as u16).to_le_bytes());
    for &d in dims {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

fn decode(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f64>)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(format_err("bad magic, expected \"LTDL\"", 0));
    }
    if bytes.len() < 8 {
        return Err(format_err("truncated header", 4));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(format_err(
            format!("unsupported format version {version}, expected {FORMAT_VERSION}"),
            4,
        ));
    }
    let order = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    if order == 0 || order > 8 {
        return Err(format_err(format!("implausible tensor order {order}"), 6));
    }
    let dims_end = 8 + 4 * order;
    if bytes.len() < dims_end {
        return Err(format_err("truncated dimension list", 8));
    }
    let mut dims = Vec::with_capacity(order);
    for i in 0..order {
        let off = 8 + 4 * i;
        let d = u32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]);
        if d == 0 {
            return Err(format_err(format!("dimension {i} is zero"), off as u64));
        }
        dims.push(d as usize);
    }
    let count: usize = dims.iter().product();
    let expected = dims_end + 8 * count;
    if bytes.len() != expected {
        return Err(format_err(
            format!(
                "payload length mismatch: expected {expected} bytes total, found {}",
                bytes.len()
            ),
            dims_end as u64,
        ));
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let off = dims_end + 8 * i;
        let mut raw = [0u8; 8];
        raw.copy_from_slice(&bytes[off..off + 8]);
        data.push(f64::from_le_bytes(raw));
    }
    Ok((dims, data))
}

pub fn save_tensor(path: &Path, t: &Tensor3) -> Result<()> {
    let (i1, i2, i3) = t.dims();
    atomic_write(path, &encode(&[i1, i2, i3], t.as_slice()))
}

pub fn load_tensor(path: &Path) -> Result<Tensor3> {
    let bytes = fs::read(path)?;
    let (dims, data) = decode(&bytes)?;
    if dims.len() != 3 {
        return Err(format_err(format!("expected a 3-order tensor, found order {}", dims.len()), 6));
    }
    Tensor3::from_vec((dims[0], dims[1], dims[2]), data)
}

pub fn save_matrix(path: &Path, m: &Matrix) -> Result<()> {
    atomic_write(path, &encode(&[m.nrows(), m.ncols()], m.as_slice()))
}

pub fn load_matrix(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path)?;
    let (dims, data) = decode(&bytes)?;
    if dims.len() != 2 {
        return Err(format_err(format!("expected a matrix, found order {}", dims.len()), 6));
    }
    Ok(Matrix::from_column_slice(dims[0], dims[1], &data))
}

pub fn save_msi(path: &Path, msi: &Msi) -> Result<()> {
    save_tensor(path, &msi.cube)
}

/// Loads an MSI: either a native container or, for external datasets, a
/// band-stacked flat binary of `L*W*H` little-endian `f64` with a sidecar
/// text header `<path>.hdr` holding `L W H`.
pub fn load_msi(path: &Path) -> Result<Msi> {
    let mut magic = [0u8; 4];
    let mut file = fs::File::open(path)?;
    let got = file.read(&mut magic)?;
    drop(file);
    if got == 4 && &magic == MAGIC {
        return Ok(Msi::new(load_tensor(path)?));
    }
    let sidecar = sidecar_path(path);
    if sidecar.exists() {
        return load_flat_binary(path, &sidecar);
    }
    Err(LtdlError::Format {
        message: format!(
            "{} is neither an LTDL container nor accompanied by a {} header",
            path.display(),
            sidecar.display()
        ),
        offset: Some(0),
    })
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".hdr");
    path.with_file_name(name)
}

fn load_flat_binary(path: &Path, sidecar: &Path) -> Result<Msi> {
    let header = fs::read_to_string(sidecar)?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|tok| {
            tok.parse::<usize>().map_err(|_| LtdlError::Format {
                message: format!("sidecar header token {tok:?} is not a positive integer"),
                offset: None,
            })
        })
        .collect::<Result<_>>()?;
    if dims.len() != 3 || dims.contains(&0) {
        return Err(LtdlError::Format {
            message: format!("sidecar header must hold \"L W H\", found {header:?}"),
            offset: None,
        });
    }
    let bytes = fs::read(path)?;
    let count = dims[0] * dims[1] * dims[2];
    if bytes.len() != 8 * count {
        return Err(format_err(
            format!("flat binary holds {} bytes, expected {}", bytes.len(), 8 * count),
            0,
        ));
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let mut raw = [0u8; 8];
        raw.copy_from_slice(&bytes[8 * i..8 * i + 8]);
        data.push(f64::from_le_bytes(raw));
    }
    Ok(Msi::new(Tensor3::from_vec((dims[0], dims[1], dims[2]), data)?))
}

/// Writes one band as a 16-bit binary PGM (values clamped to `[0, 1]` and
/// scaled to `[0, 65535]`; samples big-endian per the format).
pub fn export_band_pgm(msi: &Msi, band: usize, path: &Path) -> Result<()> {
    let (l, w, h) = msi.dims();
    if band >= h {
        return Err(LtdlError::Argument(format!("band {band} out of range (H = {h})")));
    }
    let mut bytes = Vec::with_capacity(32 + 2 * l * w);
    write!(&mut bytes, "P5\n{w} {l}\n65535\n")?;
    for i in 0..l {
        for j in 0..w {
            let v = msi.cube.get(i, j, band).clamp(0.0, 1.0);
            let q = (v * 65535.0).round() as u16;
            bytes.extend_from_slice(&q.to_be_bytes());
        }
    }
    atomic_write(path, &bytes)
}

/// Normalizes an atom to `[0, 1]` for visualization.
fn normalize_atom(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span <= 0.0 {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - lo) / span).collect()
}

/// Exports a learned pair into `dir`: both dictionaries as containers plus
/// per-atom PGM tiles of the spatial atoms reorganized into `d_l x d_w`
/// patches.
pub fn export_dictionaries(dir: &Path, pair: &DictionaryPair, d_l: usize, d_w: usize) -> Result<()> {
    if d_l * d_w != pair.d_a.nrows() {
        return Err(LtdlError::Shape(format!(
            "spatial atoms have {} entries, cannot reshape to {d_l}x{d_w}",
            pair.d_a.nrows()
        )));
    }
    fs::create_dir_all(dir)?;
    save_matrix(&dir.join("spatial_dictionary.ltdl"), &pair.d_a)?;
    save_matrix(&dir.join("spectral_dictionary.ltdl"), &pair.d_e)?;
    let atoms_dir = dir.join("atoms");
    fs::create_dir_all(&atoms_dir)?;
    for c in 0..pair.d_a.ncols() {
        let column: Vec<f64> = pair.d_a.column(c).iter().copied().collect();
        let normalized = normalize_atom(&column);
        let tile = Msi::new(Tensor3::from_vec((d_l, d_w, 1), normalized)?);
        export_band_pgm(&tile, 0, &atoms_dir.join(format!("atom_{c:03}.pgm")))?;
    }
    Ok(())
}
