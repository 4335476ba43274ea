//! Minimal single-file NIfTI-1 (`.nii` / `.nii.gz`) reader and writer.
//!
//! Only 3D scalar images are accepted. Voxel values are rescaled with
//! `scl_slope` / `scl_inter` and stored as `f32`. NIfTI `(x, y, z)` maps to
//! `(H, W, D)` so the file's voxel order is reused without a transpose.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use thiserror::Error;

use crate::volume::{voxel_count, Dims, LesionMask, Modality, Volume3D, VolumeError};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;
const DT_UINT32: i16 = 768;

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed NIfTI header: {0}")]
    MalformedHeader(String),
    #[error("expected a 3D image, header declares {0} dimensions")]
    UnsupportedDimensionality(usize),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("image contains non-finite voxel values")]
    NonFiniteData,
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Header fields this crate cares about.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    /// `(D, W, H)`, i.e. `(dim[3], dim[2], dim[1])`.
    pub dims: Dims,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub datatype: i16,
    pub vox_offset: usize,
    pub scl_slope: f64,
    pub scl_inter: f64,
    big_endian: bool,
}

struct Fields<'a> {
    buf: &'a [u8],
    big: bool,
}

impl Fields<'_> {
    fn bytes<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.buf[at..at + N]);
        if self.big {
            b.reverse();
        }
        b
    }
    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.bytes(at))
    }
    fn i32(&self, at: usize) -> i32 {
        i32::from_le_bytes(self.bytes(at))
    }
    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.bytes(at))
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, NiftiError> {
    let raw = fs::read(path)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn parse_header(buf: &[u8]) -> Result<NiftiHeader, NiftiError> {
    if buf.len() < HEADER_SIZE {
        return Err(NiftiError::MalformedHeader(format!(
            "file is {} bytes, header needs {HEADER_SIZE}",
            buf.len()
        )));
    }
    let le = Fields { buf, big: false };
    let big = match le.i32(0) {
        348 => false,
        _ if (Fields { buf, big: true }).i32(0) == 348 => true,
        other => {
            return Err(NiftiError::MalformedHeader(format!("sizeof_hdr is {other}, expected 348")))
        }
    };
    let f = Fields { buf, big };
    match &buf[344..348] {
        b"n+1\0" => {}
        b"ni1\0" => {
            return Err(NiftiError::MalformedHeader(
                "two-file (.hdr/.img) NIfTI is not supported".into(),
            ))
        }
        other => return Err(NiftiError::MalformedHeader(format!("bad magic {other:?}"))),
    }
    let ndim = f.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(NiftiError::MalformedHeader(format!("dim[0] = {ndim}")));
    }
    let ndim = ndim as usize;
    let dim: Vec<i16> = (0..8).map(|i| f.i16(40 + 2 * i)).collect();
    if ndim < 3 || (4..=ndim).any(|i| dim[i] > 1) {
        return Err(NiftiError::UnsupportedDimensionality(ndim));
    }
    if (1..=3).any(|i| dim[i] < 1) {
        return Err(NiftiError::MalformedHeader(format!("nonpositive extent in dim {:?}", &dim[1..4])));
    }
    let pixdim: Vec<f64> = (0..8).map(|i| f.f32(76 + 4 * i) as f64).collect();
    let spacing = [pixdim[3].abs(), pixdim[2].abs(), pixdim[1].abs()];
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(NiftiError::MalformedHeader(format!("invalid pixdim {:?}", &pixdim[1..4])));
    }
    let vox_offset = f.f32(108);
    if !(vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32) {
        return Err(NiftiError::MalformedHeader(format!("vox_offset {vox_offset}")));
    }
    let sform_code = f.i16(254);
    let (x, y, z) = if sform_code > 0 {
        (f.f32(280 + 12), f.f32(296 + 12), f.f32(312 + 12))
    } else {
        (f.f32(268), f.f32(272), f.f32(276))
    };
    let slope = f.f32(112) as f64;
    let inter = f.f32(116) as f64;
    let (scl_slope, scl_inter) = if slope == 0.0 || !slope.is_finite() {
        (1.0, 0.0)
    } else {
        (slope, if inter.is_finite() { inter } else { 0.0 })
    };
    Ok(NiftiHeader {
        dims: [dim[3] as usize, dim[2] as usize, dim[1] as usize],
        spacing,
        origin: [z as f64, y as f64, x as f64],
        datatype: f.i16(70),
        vox_offset: vox_offset as usize,
        scl_slope,
        scl_inter,
        big_endian: big,
    })
}

fn decode_voxels(header: &NiftiHeader, payload: &[u8]) -> Result<Vec<f64>, NiftiError> {
    let n = voxel_count(header.dims);
    let width = match header.datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_UINT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(NiftiError::UnsupportedDatatype(other)),
    };
    if payload.len() < n * width {
        return Err(NiftiError::MalformedHeader(format!(
            "payload holds {} bytes, {} voxels of width {width} need {}",
            payload.len(),
            n,
            n * width
        )));
    }
    let big = header.big_endian;
    macro_rules! decode {
        ($t:ty, $w:expr) => {
            payload[..n * $w]
                .chunks_exact($w)
                .map(|c| {
                    let mut b = [0u8; $w];
                    b.copy_from_slice(c);
                    if big {
                        b.reverse();
                    }
                    <$t>::from_le_bytes(b) as f64
                })
                .collect()
        };
    }
    Ok(match header.datatype {
        DT_UINT8 => payload[..n].iter().map(|&b| b as f64).collect(),
        DT_INT8 => payload[..n].iter().map(|&b| b as i8 as f64).collect(),
        DT_INT16 => decode!(i16, 2),
        DT_UINT16 => decode!(u16, 2),
        DT_INT32 => decode!(i32, 4),
        DT_UINT32 => decode!(u32, 4),
        DT_FLOAT32 => decode!(f32, 4),
        DT_FLOAT64 => decode!(f64, 8),
        _ => unreachable!(),
    })
}

fn read_scaled(path: &Path) -> Result<(NiftiHeader, Vec<f32>), NiftiError> {
    let bytes = read_bytes(path)?;
    let header = parse_header(&bytes)?;
    if header.vox_offset > bytes.len() {
        return Err(NiftiError::MalformedHeader("vox_offset past end of file".into()));
    }
    let raw = decode_voxels(&header, &bytes[header.vox_offset..])?;
    let mut data = Vec::with_capacity(raw.len());
    for r in raw {
        let v = (r * header.scl_slope + header.scl_inter) as f32;
        if !v.is_finite() {
            return Err(NiftiError::NonFiniteData);
        }
        data.push(v);
    }
    Ok((header, data))
}

/// Reads a 3D NIfTI-1 image as a [`Volume3D`] with `f32` storage.
pub fn load_nifti(path: impl AsRef<Path>, modality: Modality) -> Result<Volume3D, NiftiError> {
    let (header, data) = read_scaled(path.as_ref())?;
    Ok(Volume3D::new(header.dims, header.spacing, header.origin, data, modality)?)
}

/// Reads a NIfTI label image as a mask; any nonzero voxel is foreground.
/// Returns the mask with the file's voxel spacing.
pub fn load_mask(path: impl AsRef<Path>) -> Result<(LesionMask, [f64; 3]), NiftiError> {
    let (header, data) = read_scaled(path.as_ref())?;
    let mask = LesionMask::from_indices(
        header.dims,
        data.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i),
    );
    Ok((mask, header.spacing))
}

fn build_header(dims: Dims, spacing: [f64; 3], origin: [f64; 3], datatype: i16, bitpix: i16) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    let put = |h: &mut [u8], at: usize, b: &[u8]| h[at..at + b.len()].copy_from_slice(b);
    put(&mut h, 0, &348i32.to_le_bytes());
    let dim: [i16; 8] = [3, dims[2] as i16, dims[1] as i16, dims[0] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        put(&mut h, 40 + 2 * i, &d.to_le_bytes());
    }
    put(&mut h, 70, &datatype.to_le_bytes());
    put(&mut h, 72, &bitpix.to_le_bytes());
    let pixdim: [f32; 8] = [1.0, spacing[2] as f32, spacing[1] as f32, spacing[0] as f32, 1.0, 0.0, 0.0, 0.0];
    for (i, p) in pixdim.iter().enumerate() {
        put(&mut h, 76 + 4 * i, &p.to_le_bytes());
    }
    put(&mut h, 108, &(VOX_OFFSET as f32).to_le_bytes());
    put(&mut h, 112, &1f32.to_le_bytes());
    h[123] = 2; // mm
    put(&mut h, 252, &1i16.to_le_bytes());
    put(&mut h, 254, &1i16.to_le_bytes());
    let (x, y, z) = (origin[2] as f32, origin[1] as f32, origin[0] as f32);
    put(&mut h, 268, &x.to_le_bytes());
    put(&mut h, 272, &y.to_le_bytes());
    put(&mut h, 276, &z.to_le_bytes());
    let srow = [
        [spacing[2] as f32, 0.0, 0.0, x],
        [0.0, spacing[1] as f32, 0.0, y],
        [0.0, 0.0, spacing[0] as f32, z],
    ];
    for (r, row) in srow.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            put(&mut h, 280 + 16 * r + 4 * c, &v.to_le_bytes());
        }
    }
    put(&mut h, 344, b"n+1\0");
    h
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), NiftiError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let gz = path.extension().is_some_and(|e| e == "gz");
    if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes)?;
        fs::write(path, enc.finish()?)?;
    } else {
        fs::write(path, bytes)?;
    }
    Ok(())
}

/// Serializes a volume as float32 NIfTI-1 bytes (uncompressed).
pub fn encode_volume(v: &Volume3D) -> Vec<u8> {
    let mut bytes = build_header(v.dims(), v.spacing(), v.origin(), DT_FLOAT32, 32);
    bytes.reserve(v.len() * 4);
    for x in v.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    bytes
}

/// Writes a float32 NIfTI-1 file; a `.gz` extension selects gzip.
pub fn write_nifti(path: impl AsRef<Path>, v: &Volume3D) -> Result<(), NiftiError> {
    write_bytes(path.as_ref(), &encode_volume(v))
}

/// Writes a mask as a uint8 NIfTI-1 file with values in {0, 1}.
pub fn write_mask(
    path: impl AsRef<Path>,
    m: &LesionMask,
    spacing: [f64; 3],
    origin: [f64; 3],
) -> Result<(), NiftiError> {
    let mut bytes = build_header(m.dims(), spacing, origin, DT_UINT8, 8);
    bytes.extend_from_slice(&m.to_bytes());
    write_bytes(path.as_ref(), &bytes)
}
