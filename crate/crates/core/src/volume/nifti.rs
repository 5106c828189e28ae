//! Import-only subset of single-file NIfTI-1 (`.nii`): three dimensions,
//! datatype codes 2 (u8), 4 (i16), 8 (i32) and 16 (f32), spacing from
//! `pixdim`. Orientation matrices are ignored and compressed files are not
//! handled.

use std::fs;
use std::path::Path;

use super::{Dims, LabelVolume, Modality, Result, ScalarVolume, VolumeError, VoxelSpacing, MAX_LABEL};

const HEADER_SIZE: usize = 348;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Endian {
    Little,
    Big,
}

struct Reader<'a> {
    bytes: &'a [u8],
    endian: Endian,
}

impl Reader<'_> {
    fn arr<const N: usize>(&self, off: usize) -> [u8; N] {
        self.bytes[off..off + N].try_into().unwrap()
    }

    fn i16(&self, off: usize) -> i16 {
        match self.endian {
            Endian::Little => i16::from_le_bytes(self.arr(off)),
            Endian::Big => i16::from_be_bytes(self.arr(off)),
        }
    }

    fn i32(&self, off: usize) -> i32 {
        match self.endian {
            Endian::Little => i32::from_le_bytes(self.arr(off)),
            Endian::Big => i32::from_be_bytes(self.arr(off)),
        }
    }

    fn f32(&self, off: usize) -> f32 {
        match self.endian {
            Endian::Little => f32::from_le_bytes(self.arr(off)),
            Endian::Big => f32::from_be_bytes(self.arr(off)),
        }
    }
}

/// Decoded voxel grid before choosing an image or label interpretation.
#[derive(Debug, Clone)]
pub struct NiftiVolume {
    pub dims: Dims,
    pub spacing: VoxelSpacing,
    pub datatype: i16,
    pub values: Vec<f64>,
}

fn parse(bytes: &[u8]) -> Result<NiftiVolume> {
    if bytes.len() < HEADER_SIZE + 4 {
        return Err(VolumeError::CorruptHeader(format!("file too short ({} bytes)", bytes.len())));
    }
    let endian = if i32::from_le_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
        Endian::Little
    } else if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
        Endian::Big
    } else {
        return Err(VolumeError::CorruptHeader("sizeof_hdr is not 348".into()));
    };
    if &bytes[344..348] != b"n+1\0" {
        return Err(VolumeError::CorruptHeader("magic is not \"n+1\"".into()));
    }
    let r = Reader { bytes, endian };
    let ndim = r.i16(40);
    if ndim != 3 {
        return Err(VolumeError::DimensionMismatch(format!("expected 3 dimensions, header has {ndim}")));
    }
    let dim = |i: usize| -> Result<usize> {
        let d = r.i16(40 + 2 * i);
        usize::try_from(d)
            .ok()
            .filter(|&d| d > 0)
            .ok_or_else(|| VolumeError::CorruptHeader(format!("dim[{i}] = {d}")))
    };
    let dims = Dims::new(dim(1)?, dim(2)?, dim(3)?)?;
    let pix = |i: usize| r.f32(76 + 4 * i) as f64;
    let spacing = VoxelSpacing::new(pix(1).abs(), pix(2).abs(), pix(3).abs())
        .map_err(|e| VolumeError::CorruptHeader(e.to_string()))?;
    let datatype = r.i16(70);
    let width = match datatype {
        2 => 1,
        4 => 2,
        8 | 16 => 4,
        other => return Err(VolumeError::UnsupportedDatatype(format!("NIfTI datatype code {other}"))),
    };
    let vox_offset = r.f32(108);
    if !(vox_offset >= HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
        return Err(VolumeError::CorruptHeader(format!("vox_offset {vox_offset}")));
    }
    let start = vox_offset as usize;
    let end = start + width * dims.len();
    if bytes.len() < end {
        return Err(VolumeError::CorruptHeader(format!(
            "voxel data truncated: need {end} bytes, file has {}",
            bytes.len()
        )));
    }
    let data = &bytes[start..end];
    let raw = Reader { bytes: data, endian };
    let mut values: Vec<f64> = (0..dims.len())
        .map(|i| match datatype {
            2 => data[i] as f64,
            4 => raw.i16(2 * i) as f64,
            8 => raw.i32(4 * i) as f64,
            _ => raw.f32(4 * i) as f64,
        })
        .collect();
    let (slope, inter) = (r.f32(112) as f64, r.f32(116) as f64);
    if slope != 0.0 && slope.is_finite() && inter.is_finite() && (slope != 1.0 || inter != 0.0) {
        values.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    Ok(NiftiVolume { dims, spacing, datatype, values })
}

fn read_file(path: &Path) -> Result<NiftiVolume> {
    let bytes = fs::read(path).map_err(|e| VolumeError::io(path, e))?;
    parse(&bytes)
}

/// Import an image volume. NIfTI stores x fastest, then y, then z, which is
/// already this crate's voxel order.
pub fn import_nifti_minimal(path: &Path, modality: Modality) -> Result<ScalarVolume> {
    let n = read_file(path)?;
    ScalarVolume::new(n.dims, n.spacing, modality, n.values)
}

/// Import a label volume. Float data is accepted only when every value is
/// integral; values must lie in {0, 1, 2}.
pub fn import_nifti_labels(path: &Path) -> Result<LabelVolume> {
    let n = read_file(path)?;
    if let Some(v) = n.values.iter().find(|v| v.fract() != 0.0 || !v.is_finite()) {
        return Err(VolumeError::UnsupportedDatatype(format!(
            "label volume holds non-integral value {v}"
        )));
    }
    if let Some(v) = n.values.iter().find(|&&v| !(0.0..=MAX_LABEL as f64).contains(&v)) {
        return Err(VolumeError::InvariantViolation(format!("label {v} outside {{0,1,2}}")));
    }
    LabelVolume::new(n.dims, n.spacing, n.values.into_iter().map(|v| v as u8).collect())
}
