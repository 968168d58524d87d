//! Single-file, uncompressed NIfTI-1 (`.nii`) reading and writing.
//!
//! Only the header fields needed to reconstruct a [`Volume`] are
//! interpreted. Byte order is detected from `sizeof_hdr`.

use std::fs;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::volume::{Volume, VolumeGrid};

pub const HEADER_SIZE: usize = 348;
/// Header plus the four-byte extension flag.
pub const DATA_OFFSET: usize = 352;
pub const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const DESCRIP: usize = 148;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const QUATERN_B: usize = 256;
    pub const QOFFSET_X: usize = 268;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

/// Payload data types this crate understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NiftiDataType {
    Int16,
    Float32,
    Float64,
}

impl NiftiDataType {
    pub fn code(self) -> i16 {
        match self {
            Self::Int16 => 4,
            Self::Float32 => 16,
            Self::Float64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Option<Self> {
        match code {
            4 => Some(Self::Int16),
            16 => Some(Self::Float32),
            64 => Some(Self::Float64),
            _ => None,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Self::Int16 => 2,
            Self::Float32 => 4,
            Self::Float64 => 8,
        }
    }
}

/// The subset of header fields exposed to callers.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub datatype: NiftiDataType,
    pub dims: [usize; 3],
    pub channels: usize,
    pub pixdim: [f32; 8],
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub qform_code: i16,
    pub sform_code: i16,
    pub description: String,
    pub little_endian: bool,
}

#[derive(Debug, Clone)]
pub struct WriteOptions {
    pub datatype: NiftiDataType,
    /// Free text stored in the 80-byte `descrip` field (truncated if longer).
    pub description: String,
}

impl Default for WriteOptions {
    fn default() -> Self {
        Self {
            datatype: NiftiDataType::Float32,
            description: String::new(),
        }
    }
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    read_nifti_with_header(path).map(|(v, _)| v)
}

pub fn read_nifti_with_header(path: impl AsRef<Path>) -> Result<(Volume, NiftiHeader)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_nifti(&bytes)
}

/// Parse a complete in-memory `.nii` file.
pub fn parse_nifti(bytes: &[u8]) -> Result<(Volume, NiftiHeader)> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Corruption(format!(
            "file is {} bytes, shorter than the {HEADER_SIZE}-byte header",
            bytes.len()
        )));
    }
    if LittleEndian::read_i32(&bytes[offsets::SIZEOF_HDR..]) == HEADER_SIZE as i32 {
        parse_with::<LittleEndian>(bytes, true)
    } else if BigEndian::read_i32(&bytes[offsets::SIZEOF_HDR..]) == HEADER_SIZE as i32 {
        parse_with::<BigEndian>(bytes, false)
    } else {
        Err(Error::Format("sizeof_hdr is not 348 in either byte order".into()))
    }
}

fn parse_with<B: ByteOrder>(bytes: &[u8], little_endian: bool) -> Result<(Volume, NiftiHeader)> {
    let magic = &bytes[offsets::MAGIC..offsets::MAGIC + 4];
    if magic != MAGIC_SINGLE {
        return Err(Error::Format(format!(
            "bad magic {magic:?}; only single-file NIfTI-1 (\"n+1\\0\") is supported"
        )));
    }

    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = B::read_i16(&bytes[offsets::DIM + 2 * i..]);
    }
    let ndim = dim[0];
    if ndim != 3 && ndim != 4 {
        return Err(Error::Unsupported(format!("dim[0] = {ndim}, expected 3 or 4")));
    }
    if dim[1..=ndim as usize].iter().any(|&d| d < 1) {
        return Err(Error::Format(format!("non-positive dimension in {dim:?}")));
    }
    let dims = [dim[1] as usize, dim[2] as usize, dim[3] as usize];
    let channels = if ndim == 4 { dim[4] as usize } else { 1 };

    let code = B::read_i16(&bytes[offsets::DATATYPE..]);
    let datatype = NiftiDataType::from_code(code)
        .ok_or_else(|| Error::Unsupported(format!("datatype code {code}")))?;

    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = B::read_f32(&bytes[offsets::PIXDIM + 4 * i..]);
    }
    let voxel_size = [
        pixdim[1].abs() as f64,
        pixdim[2].abs() as f64,
        pixdim[3].abs() as f64,
    ];
    if voxel_size.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Format(format!("non-positive pixdim {pixdim:?}")));
    }

    let vox_offset = B::read_f32(&bytes[offsets::VOX_OFFSET..]);
    if !(vox_offset >= HEADER_SIZE as f32) {
        return Err(Error::Format(format!("vox_offset {vox_offset} inside header")));
    }
    let vox_offset = vox_offset as usize;

    let mut scl_slope = B::read_f32(&bytes[offsets::SCL_SLOPE..]);
    let scl_inter = B::read_f32(&bytes[offsets::SCL_INTER..]);
    let qform_code = B::read_i16(&bytes[offsets::QFORM_CODE..]);
    let sform_code = B::read_i16(&bytes[offsets::SFORM_CODE..]);

    let descrip_raw = &bytes[offsets::DESCRIP..offsets::DESCRIP + 80];
    let end = descrip_raw.iter().position(|&b| b == 0).unwrap_or(80);
    let description = String::from_utf8_lossy(&descrip_raw[..end]).into_owned();

    let affine = if sform_code > 0 {
        let mut a = [[0.0; 4]; 4];
        for (r, row) in a.iter_mut().take(3).enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = B::read_f32(&bytes[offsets::SROW_X + 16 * r + 4 * c..]) as f64;
            }
        }
        a[3][3] = 1.0;
        a
    } else if qform_code > 0 {
        let read = |i: usize| B::read_f32(&bytes[offsets::QUATERN_B + 4 * i..]) as f64;
        let offs = |i: usize| B::read_f32(&bytes[offsets::QOFFSET_X + 4 * i..]) as f64;
        qform_affine(
            [read(0), read(1), read(2)],
            [offs(0), offs(1), offs(2)],
            voxel_size,
            pixdim[0],
        )
    } else {
        VolumeGrid::with_voxel_size(dims, voxel_size).affine
    };

    let n = dims[0] * dims[1] * dims[2] * channels;
    let need = vox_offset + n * datatype.bytes();
    if bytes.len() < need {
        return Err(Error::Corruption(format!(
            "payload truncated: need {need} bytes, file has {}",
            bytes.len()
        )));
    }
    let payload = &bytes[vox_offset..need];
    let mut data: Vec<f64> = match datatype {
        NiftiDataType::Int16 => payload.chunks_exact(2).map(|c| B::read_i16(c) as f64).collect(),
        NiftiDataType::Float32 => payload.chunks_exact(4).map(|c| B::read_f32(c) as f64).collect(),
        NiftiDataType::Float64 => payload.chunks_exact(8).map(B::read_f64).collect(),
    };

    // scl_slope == 0 means "no scaling"
    if scl_slope == 0.0 || !scl_slope.is_finite() {
        scl_slope = 1.0;
    }
    let inter = if scl_inter.is_finite() { scl_inter } else { 0.0 };
    if scl_slope != 1.0 || inter != 0.0 {
        let (s, i) = (scl_slope as f64, inter as f64);
        data.iter_mut().for_each(|v| *v = *v * s + i);
    }

    let grid = VolumeGrid::new(dims, voxel_size, affine)?;
    let volume = Volume::new(grid, channels, data)?;
    let header = NiftiHeader {
        datatype,
        dims,
        channels,
        pixdim,
        scl_slope,
        scl_inter,
        qform_code,
        sform_code,
        description,
        little_endian,
    };
    Ok((volume, header))
}

fn qform_affine(quat: [f64; 3], offset: [f64; 3], voxel: [f64; 3], qfac: f32) -> [[f64; 4]; 4] {
    let [b, c, d] = quat;
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    let r = Matrix3::new(
        a * a + b * b - c * c - d * d,
        2.0 * (b * c - a * d),
        2.0 * (b * d + a * c),
        2.0 * (b * c + a * d),
        a * a + c * c - b * b - d * d,
        2.0 * (c * d - a * b),
        2.0 * (b * d - a * c),
        2.0 * (c * d + a * b),
        a * a + d * d - c * c - b * b,
    );
    let qfac = if qfac < 0.0 { -1.0 } else { 1.0 };
    let scale = [voxel[0], voxel[1], voxel[2] * qfac];
    let mut out = [[0.0; 4]; 4];
    for (row, o) in out.iter_mut().take(3).enumerate() {
        for col in 0..3 {
            o[col] = r[(row, col)] * scale[col];
        }
        o[3] = offset[row];
    }
    out[3][3] = 1.0;
    out
}

pub fn write_nifti(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_nifti_with(volume, path, &WriteOptions::default())
}

pub fn write_nifti_with(volume: &Volume, path: impl AsRef<Path>, opts: &WriteOptions) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_nifti(volume, opts)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Serialize a volume to little-endian `.nii` bytes.
pub fn encode_nifti(volume: &Volume, opts: &WriteOptions) -> Result<Vec<u8>> {
    volume.validate()?;
    let grid = &volume.grid;
    if grid.dims.iter().any(|&d| d > i16::MAX as usize) || volume.channels > i16::MAX as usize {
        return Err(Error::Unsupported("dimension exceeds NIfTI-1 i16 range".into()));
    }
    type E = LittleEndian;
    let mut buf = vec![0u8; DATA_OFFSET + volume.data.len() * opts.datatype.bytes()];
    E::write_i32(&mut buf[offsets::SIZEOF_HDR..], HEADER_SIZE as i32);

    let ndim: i16 = if volume.channels > 1 { 4 } else { 3 };
    let mut dim = [1i16; 8];
    dim[0] = ndim;
    dim[1] = grid.dims[0] as i16;
    dim[2] = grid.dims[1] as i16;
    dim[3] = grid.dims[2] as i16;
    dim[4] = volume.channels as i16;
    for (i, d) in dim.iter().enumerate() {
        E::write_i16(&mut buf[offsets::DIM + 2 * i..], *d);
    }
    E::write_i16(&mut buf[offsets::DATATYPE..], opts.datatype.code());
    E::write_i16(&mut buf[offsets::BITPIX..], (opts.datatype.bytes() * 8) as i16);

    let mut pixdim = [1f32; 8];
    for a in 0..3 {
        pixdim[a + 1] = grid.voxel_size[a] as f32;
    }
    for (i, p) in pixdim.iter().enumerate() {
        E::write_f32(&mut buf[offsets::PIXDIM + 4 * i..], *p);
    }
    E::write_f32(&mut buf[offsets::VOX_OFFSET..], DATA_OFFSET as f32);
    E::write_f32(&mut buf[offsets::SCL_SLOPE..], 1.0);
    E::write_f32(&mut buf[offsets::SCL_INTER..], 0.0);
    buf[offsets::XYZT_UNITS] = 2 | 8; // mm, seconds

    let desc = opts.description.as_bytes();
    let len = desc.len().min(79);
    buf[offsets::DESCRIP..offsets::DESCRIP + len].copy_from_slice(&desc[..len]);

    E::write_i16(&mut buf[offsets::QFORM_CODE..], 0);
    E::write_i16(&mut buf[offsets::SFORM_CODE..], 2);
    for r in 0..3 {
        for c in 0..4 {
            E::write_f32(&mut buf[offsets::SROW_X + 16 * r + 4 * c..], grid.affine[r][c] as f32);
        }
    }
    buf[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(MAGIC_SINGLE);

    let payload = &mut buf[DATA_OFFSET..];
    match opts.datatype {
        NiftiDataType::Int16 => {
            for (chunk, v) in payload.chunks_exact_mut(2).zip(&volume.data) {
                let r = v.round();
                if r < i16::MIN as f64 || r > i16::MAX as f64 {
                    return Err(Error::Argument(format!("value {v} out of int16 range")));
                }
                E::write_i16(chunk, r as i16);
            }
        }
        NiftiDataType::Float32 => {
            for (chunk, v) in payload.chunks_exact_mut(4).zip(&volume.data) {
                E::write_f32(chunk, *v as f32);
            }
        }
        NiftiDataType::Float64 => {
            for (chunk, v) in payload.chunks_exact_mut(8).zip(&volume.data) {
                E::write_f64(chunk, *v);
            }
        }
    }
    Ok(buf)
}
