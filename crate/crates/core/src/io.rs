//! NIfTI-1 single-file volumes (`.nii`, `.nii.gz`) and JSON documents, both
//! written atomically (temporary file, then rename).

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian as LE};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::volume::{Geometry, LabelMap, Volume};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;
pub const DT_UINT8: i16 = 2;
pub const DT_FLOAT32: i16 = 16;
const DESCRIP: &[u8] = b"multirecon";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Compressed {
    No,
    Gzip,
}

fn kind(path: &Path) -> Result<Compressed> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    if name.ends_with(".nii.gz") {
        Ok(Compressed::Gzip)
    } else if name.ends_with(".nii") {
        Ok(Compressed::No)
    } else {
        Err(Error::UnsupportedFormat(format!("{}: expected a .nii or .nii.gz file", path.display())))
    }
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp: PathBuf = path.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

/// Header bytes for a grid and datatype.
pub fn encode_header(g: &Geometry, datatype: i16) -> [u8; VOX_OFFSET] {
    let mut h = [0u8; VOX_OFFSET];
    LE::write_i32(&mut h[0..4], HEADER_SIZE as i32);
    h[38] = b'r';
    let d = g.dims();
    let dim = [3i16, d[0] as i16, d[1] as i16, d[2] as i16, 1, 1, 1, 1];
    for (i, v) in dim.iter().enumerate() {
        LE::write_i16(&mut h[40 + 2 * i..42 + 2 * i], *v);
    }
    LE::write_i16(&mut h[70..72], datatype);
    LE::write_i16(&mut h[72..74], if datatype == DT_UINT8 { 8 } else { 32 });
    let s = g.spacing();
    let pixdim = [1.0f32, s[0] as f32, s[1] as f32, s[2] as f32, 0.0, 0.0, 0.0, 0.0];
    for (i, v) in pixdim.iter().enumerate() {
        LE::write_f32(&mut h[76 + 4 * i..80 + 4 * i], *v);
    }
    LE::write_f32(&mut h[108..112], VOX_OFFSET as f32);
    LE::write_f32(&mut h[112..116], 1.0);
    LE::write_f32(&mut h[116..120], 0.0);
    h[123] = 2; // millimetres, no time unit
    h[148..148 + DESCRIP.len()].copy_from_slice(DESCRIP);
    LE::write_i16(&mut h[252..254], 0);
    LE::write_i16(&mut h[254..256], 1);
    let a = g.affine();
    for r in 0..3 {
        for c in 0..4 {
            let off = 280 + 16 * r + 4 * c;
            LE::write_f32(&mut h[off..off + 4], a[r][c] as f32);
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

fn encode(g: &Geometry, datatype: i16, payload: &[u8], path: &Path) -> Result<()> {
    let compressed = kind(path)?;
    let mut bytes = Vec::with_capacity(VOX_OFFSET + payload.len());
    bytes.extend_from_slice(&encode_header(g, datatype));
    bytes.extend_from_slice(payload);
    let bytes = match compressed {
        Compressed::No => bytes,
        Compressed::Gzip => {
            let mut enc = GzEncoder::new(Vec::new(), Compression::default());
            enc.write_all(&bytes)?;
            enc.finish()?
        }
    };
    write_atomic(path, &bytes)
}

/// Writes intensities as 32-bit floats.
pub fn write_volume(v: &Volume, path: &Path) -> Result<()> {
    let mut payload = vec![0u8; 4 * v.data().len()];
    for (chunk, x) in payload.chunks_exact_mut(4).zip(v.data()) {
        LE::write_f32(chunk, *x as f32);
    }
    encode(v.geometry(), DT_FLOAT32, &payload, path)
}

pub fn write_labels(l: &LabelMap, path: &Path) -> Result<()> {
    encode(l.geometry(), DT_UINT8, l.labels(), path)
}

struct Decoded {
    geometry: Geometry,
    datatype: i16,
    slope: f32,
    inter: f32,
    payload: Vec<u8>,
}

fn load(path: &Path) -> Result<Vec<u8>> {
    let compressed = kind(path)?;
    let raw = fs::read(path)?;
    match compressed {
        Compressed::No => Ok(raw),
        Compressed::Gzip => {
            let mut out = Vec::new();
            GzDecoder::new(&raw[..])
                .read_to_end(&mut out)
                .map_err(|e| Error::CorruptFile(format!("{}: {e}", path.display())))?;
            Ok(out)
        }
    }
}

/// Parses a NIfTI-1 byte stream (header plus data).
fn decode(bytes: &[u8], what: &str) -> Result<Decoded> {
    let corrupt = |m: &str| Error::CorruptFile(format!("{what}: {m}"));
    if bytes.len() < HEADER_SIZE {
        return Err(corrupt("shorter than a NIfTI-1 header"));
    }
    let sizeof_hdr = LE::read_i32(&bytes[0..4]);
    if sizeof_hdr != HEADER_SIZE as i32 {
        if sizeof_hdr.swap_bytes() == HEADER_SIZE as i32 {
            return Err(Error::UnsupportedFormat(format!("{what}: big-endian files are not supported")));
        }
        return Err(corrupt("sizeof_hdr is not 348"));
    }
    match &bytes[344..348] {
        b"n+1\0" => {}
        b"ni1\0" => return Err(Error::UnsupportedFormat(format!("{what}: two-file NIfTI is not supported"))),
        _ => return Err(corrupt("bad magic")),
    }
    let dim: Vec<i16> = (0..8).map(|i| LE::read_i16(&bytes[40 + 2 * i..42 + 2 * i])).collect();
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(corrupt("invalid dim[0]"));
    }
    if (4..=ndim as usize).any(|i| dim[i] > 1) {
        return Err(Error::UnsupportedFormat(format!("{what}: multi-frame images are not supported")));
    }
    let dims = [0, 1, 2].map(|a| if a < ndim as usize { dim[a + 1].max(0) as usize } else { 1 });
    let datatype = LE::read_i16(&bytes[70..72]);
    let bpv = match datatype {
        DT_UINT8 => 1,
        DT_FLOAT32 => 4,
        other => return Err(Error::UnsupportedFormat(format!("{what}: datatype {other}"))),
    };
    let pixdim: Vec<f32> = (0..8).map(|i| LE::read_f32(&bytes[76 + 4 * i..80 + 4 * i])).collect();
    let vox_offset = LE::read_f32(&bytes[108..112]);
    if !(vox_offset >= VOX_OFFSET as f32) || vox_offset.fract() != 0.0 {
        return Err(corrupt("invalid vox_offset"));
    }
    let slope = LE::read_f32(&bytes[112..116]);
    let inter = LE::read_f32(&bytes[116..120]);
    let spacing = [1, 2, 3].map(|i| pixdim[i].abs() as f64);
    let qform_code = LE::read_i16(&bytes[252..254]);
    let sform_code = LE::read_i16(&bytes[254..256]);
    let mut affine = [[0.0; 4]; 4];
    affine[3][3] = 1.0;
    if sform_code > 0 {
        for (r, row) in affine.iter_mut().take(3).enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                let off = 280 + 16 * r + 4 * c;
                *v = LE::read_f32(&bytes[off..off + 4]) as f64;
            }
        }
    } else if qform_code > 0 {
        let q: Vec<f64> = (0..6).map(|i| LE::read_f32(&bytes[256 + 4 * i..260 + 4 * i]) as f64).collect();
        let (b, c, d) = (q[0], q[1], q[2]);
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let rot = [
            [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
            [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
            [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ];
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let scale = [spacing[0], spacing[1], spacing[2] * qfac];
        for r in 0..3 {
            for c in 0..3 {
                affine[r][c] = rot[r][c] * scale[c];
            }
            affine[r][3] = q[3 + r];
        }
    } else {
        for a in 0..3 {
            affine[a][a] = spacing[a];
        }
    }
    let geometry = Geometry::new(dims, spacing, affine)?;
    let start = vox_offset as usize;
    let len = geometry.len() * bpv;
    if bytes.len() < start + len {
        return Err(corrupt("truncated voxel data"));
    }
    Ok(Decoded { geometry, datatype, slope, inter, payload: bytes[start..start + len].to_vec() })
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = load(path)?;
    let d = decode(&bytes, &path.display().to_string())?;
    let (slope, inter) = if d.slope == 0.0 { (1.0, 0.0) } else { (d.slope as f64, d.inter as f64) };
    let raw: Vec<f64> = match d.datatype {
        DT_FLOAT32 => d.payload.chunks_exact(4).map(|c| LE::read_f32(c) as f64).collect(),
        _ => d.payload.iter().map(|&b| b as f64).collect(),
    };
    let data = if slope == 1.0 && inter == 0.0 { raw } else { raw.iter().map(|v| v * slope + inter).collect() };
    Volume::new(d.geometry, data).map_err(|e| match e {
        Error::InvalidGeometry(m) => Error::CorruptFile(m),
        other => other,
    })
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let bytes = load(path)?;
    let d = decode(&bytes, &path.display().to_string())?;
    if d.datatype != DT_UINT8 {
        return Err(Error::UnsupportedFormat(format!("{}: label maps must be uint8", path.display())));
    }
    if !((d.slope == 0.0 || d.slope == 1.0) && d.inter == 0.0) {
        return Err(Error::UnsupportedFormat(format!("{}: scaled label maps", path.display())));
    }
    LabelMap::new(d.geometry, d.payload)
}
