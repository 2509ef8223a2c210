//! Dataset directory: `manifest.json` plus one binary file per record array.
//!
//! Array file layout: `u32` LE header length, UTF-8 JSON header
//! `{"dtype": "f64" | "c128", "shape": [..]}`, then row-major little-endian
//! data (complex values interleaved as re, im).

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, IxDyn};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetManifest, SliceRecord, FORMAT_VERSION};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct ArrayHeader {
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F64(ArrayD<f64>),
    C128(ArrayD<Complex64>),
}

pub fn write_array(path: &Path, data: &ArrayData) -> Result<()> {
    let (dtype, shape, payload) = match data {
        ArrayData::F64(a) => (
            "f64",
            a.shape().to_vec(),
            a.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>(),
        ),
        ArrayData::C128(a) => (
            "c128",
            a.shape().to_vec(),
            a.iter()
                .flat_map(|v| v.re.to_le_bytes().into_iter().chain(v.im.to_le_bytes()))
                .collect(),
        ),
    };
    let header = serde_json::to_vec(&ArrayHeader {
        dtype: dtype.into(),
        shape,
    })?;
    let mut bytes = Vec::with_capacity(4 + header.len() + payload.len());
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_array(path: &Path) -> Result<ArrayData> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Ingestion {
        path: path.to_path_buf(),
        msg: msg.into(),
    };
    if bytes.len() < 4 {
        return Err(bad("truncated array header"));
    }
    let hlen = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    let body_start = 4 + hlen;
    if bytes.len() < body_start {
        return Err(bad("truncated array header"));
    }
    let header: ArrayHeader = serde_json::from_slice(&bytes[4..body_start])?;
    let n: usize = header.shape.iter().product();
    let body = &bytes[body_start..];
    let f64s = |count: usize| -> Result<Vec<f64>> {
        if body.len() != count * 8 {
            return Err(bad("payload length does not match header"));
        }
        Ok(body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    };
    let shape = IxDyn(&header.shape);
    match header.dtype.as_str() {
        "f64" => Ok(ArrayData::F64(
            ArrayD::from_shape_vec(shape, f64s(n)?).map_err(|e| bad(&e.to_string()))?,
        )),
        "c128" => {
            let v = f64s(2 * n)?;
            let c = v.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect();
            Ok(ArrayData::C128(
                ArrayD::from_shape_vec(shape, c).map_err(|e| bad(&e.to_string()))?,
            ))
        }
        other => Err(bad(&format!("unknown dtype {other}"))),
    }
}

fn record_path(dir: &Path, index: usize, field: &str) -> PathBuf {
    dir.join("records").join(format!("{index:06}.{field}.bin"))
}

fn to_2d<T>(a: ArrayD<T>, path: &Path) -> Result<Array2<T>> {
    a.into_dimensionality().map_err(|_| Error::Ingestion {
        path: path.to_path_buf(),
        msg: "expected a 2-D array".into(),
    })
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let records_dir = dir.join("records");
    if records_dir.exists() {
        fs::remove_dir_all(&records_dir).map_err(|e| Error::io(&records_dir, e))?;
    }
    fs::create_dir_all(&records_dir).map_err(|e| Error::io(&records_dir, e))?;
    let mut manifest = dataset.manifest.clone();
    manifest.records = dataset.records.iter().map(super::entry_of).collect();
    for (i, r) in dataset.records.iter().enumerate() {
        write_array(
            &record_path(dir, i, "magnitude"),
            &ArrayData::F64(r.magnitude.clone().into_dyn()),
        )?;
        if let Some(p) = &r.phase {
            write_array(&record_path(dir, i, "phase"), &ArrayData::F64(p.clone().into_dyn()))?;
        }
        if let Some(k) = &r.kspace {
            write_array(&record_path(dir, i, "kspace"), &ArrayData::C128(k.clone().into_dyn()))?;
        }
    }
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Ingestion {
            path,
            msg: format!("unsupported format version {}", manifest.version),
        });
    }
    let mut records = Vec::with_capacity(manifest.records.len());
    for (i, e) in manifest.records.iter().enumerate() {
        let mag_path = record_path(dir, i, "magnitude");
        let magnitude = match read_array(&mag_path)? {
            ArrayData::F64(a) => to_2d(a, &mag_path)?,
            _ => {
                return Err(Error::Ingestion {
                    path: mag_path,
                    msg: "magnitude must be f64".into(),
                })
            }
        };
        let phase = if e.has_phase {
            let p = record_path(dir, i, "phase");
            match read_array(&p)? {
                ArrayData::F64(a) => Some(to_2d(a, &p)?),
                _ => return Err(Error::Ingestion { path: p, msg: "phase must be f64".into() }),
            }
        } else {
            None
        };
        let kspace = if e.has_kspace {
            let p = record_path(dir, i, "kspace");
            match read_array(&p)? {
                ArrayData::C128(a) => Some(to_2d(a, &p)?),
                _ => return Err(Error::Ingestion { path: p, msg: "k-space must be c128".into() }),
            }
        } else {
            None
        };
        records.push(SliceRecord {
            patient_id: e.patient_id.clone(),
            slice_index: e.slice_index,
            magnitude,
            scale: e.scale,
            phase,
            kspace,
            provenance: e.provenance.clone(),
        });
    }
    Ok(Dataset { manifest, records })
}
