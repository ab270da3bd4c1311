//! NIfTI-1 single-file reader and writer.
//!
//! Only `.nii` / `.nii.gz` with uint8, int16 or float32 voxels are supported.
//! Gzip input is detected from the `1F 8B` prefix rather than the extension;
//! output is compressed when the path ends in `.gz`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use nalgebra::{Matrix3, Matrix4};

use crate::error::{Error, Result};
use crate::volume::{diagonal_affine, DType, Volume};

pub const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;

mod offsets {
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

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

/// How voxel values are stored on disk: `stored = round((value - inter) / slope)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Encoding {
    pub dtype: DType,
    pub slope: f32,
    pub inter: f32,
}

impl Encoding {
    pub fn float32() -> Self {
        Encoding {
            dtype: DType::F32,
            slope: 1.0,
            inter: 0.0,
        }
    }

    pub fn uint8() -> Self {
        Encoding {
            dtype: DType::U8,
            slope: 1.0,
            inter: 0.0,
        }
    }

    pub fn int16() -> Self {
        Encoding {
            dtype: DType::I16,
            slope: 1.0,
            inter: 0.0,
        }
    }

    /// Probabilities in [0, 1] quantized to 255 levels.
    pub fn probability_u8() -> Self {
        Encoding {
            dtype: DType::U8,
            slope: 1.0 / 255.0,
            inter: 0.0,
        }
    }

    pub fn plain(dtype: DType) -> Self {
        Encoding {
            dtype,
            slope: 1.0,
            inter: 0.0,
        }
    }
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_nifti(&raw)
}

/// Parses an in-memory `.nii` or `.nii.gz` image.
pub fn decode_nifti(raw: &[u8]) -> Result<Volume> {
    let bytes;
    let buf: &[u8] = if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(raw)
            .read_to_end(&mut out)
            .map_err(|e| Error::CorruptHeader(format!("gzip stream: {e}")))?;
        bytes = out;
        &bytes
    } else {
        raw
    };
    if buf.len() < HEADER_SIZE {
        return Err(Error::TruncatedData {
            expected: HEADER_SIZE,
            found: buf.len(),
        });
    }
    if LittleEndian::read_i32(&buf[0..4]) == HEADER_SIZE as i32 {
        parse::<LittleEndian>(buf)
    } else if BigEndian::read_i32(&buf[0..4]) == HEADER_SIZE as i32 {
        parse::<BigEndian>(buf)
    } else {
        Err(Error::CorruptHeader(format!(
            "sizeof_hdr is {}, expected 348",
            LittleEndian::read_i32(&buf[0..4])
        )))
    }
}

fn parse<B: ByteOrder>(buf: &[u8]) -> Result<Volume> {
    use offsets::*;
    let magic = &buf[MAGIC..MAGIC + 4];
    if magic != b"n+1\0" {
        return Err(Error::CorruptHeader(format!("magic {magic:?} is not single-file NIfTI-1")));
    }
    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = B::read_i16(&buf[DIM + 2 * i..]);
    }
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(Error::CorruptHeader(format!("dim[0] = {ndim}")));
    }
    let mut dims = [1usize; 3];
    for a in 0..3 {
        if (a as i16) < ndim {
            let d = dim[a + 1];
            if d < 1 {
                return Err(Error::CorruptHeader(format!("dim[{}] = {d}", a + 1)));
            }
            dims[a] = d as usize;
        }
    }
    for a in 4..=(ndim as usize) {
        if dim[a] > 1 {
            return Err(Error::CorruptHeader(format!("only 3D volumes are supported, dim[{a}] = {}", dim[a])));
        }
    }
    let datatype = B::read_i16(&buf[DATATYPE..]);
    let bitpix = B::read_i16(&buf[BITPIX..]);
    let (dtype, width) = match datatype {
        DT_UINT8 => (DType::U8, 1),
        DT_INT16 => (DType::I16, 2),
        DT_FLOAT32 => (DType::F32, 4),
        other => return Err(Error::UnsupportedDtype(other)),
    };
    if bitpix as usize != width * 8 {
        return Err(Error::CorruptHeader(format!("bitpix {bitpix} inconsistent with datatype {datatype}")));
    }
    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = B::read_f32(&buf[PIXDIM + 4 * i..]);
    }
    let spacing = [1, 2, 3].map(|i| {
        let s = pixdim[i].abs() as f64;
        if s > 0.0 && s.is_finite() {
            s
        } else {
            1.0
        }
    });
    let vox_offset = B::read_f32(&buf[VOX_OFFSET..]);
    if !(vox_offset >= HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
        return Err(Error::CorruptHeader(format!("vox_offset {vox_offset}")));
    }
    let start = vox_offset as usize;
    let n: usize = dims.iter().product();
    let expected = start + n * width;
    if buf.len() < expected {
        return Err(Error::TruncatedData {
            expected,
            found: buf.len(),
        });
    }
    let payload = &buf[start..expected];
    let mut data: Vec<f32> = match dtype {
        DType::U8 => payload.iter().map(|&b| b as f32).collect(),
        DType::I16 => payload.chunks_exact(2).map(|c| B::read_i16(c) as f32).collect(),
        DType::F32 => payload.chunks_exact(4).map(B::read_f32).collect(),
    };
    let slope = B::read_f32(&buf[SCL_SLOPE..]);
    let inter = B::read_f32(&buf[SCL_INTER..]);
    if slope != 0.0 && slope.is_finite() && inter.is_finite() && (slope != 1.0 || inter != 0.0) {
        let (s, i) = (slope as f64, inter as f64);
        for v in &mut data {
            *v = (*v as f64 * s + i) as f32;
        }
    }

    let affine = header_affine::<B>(buf, &pixdim, spacing);
    Volume::new(dims, data, spacing, affine).map(|v| v.with_dtype(dtype))
}

fn invertible(m: &Matrix4<f64>) -> bool {
    let lin: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
    let det = lin.determinant();
    det.is_finite() && det.abs() > 1e-12
}

/// sform if set and invertible, else qform, else diagonal spacing.
fn header_affine<B: ByteOrder>(buf: &[u8], pixdim: &[f32; 8], spacing: [f64; 3]) -> Matrix4<f64> {
    use offsets::*;
    let sform_code = B::read_i16(&buf[SFORM_CODE..]);
    if sform_code > 0 {
        let mut m = Matrix4::identity();
        for r in 0..3 {
            for c in 0..4 {
                m[(r, c)] = B::read_f32(&buf[SROW_X + 16 * r + 4 * c..]) as f64;
            }
        }
        if invertible(&m) {
            return m;
        }
    }
    let qform_code = B::read_i16(&buf[QFORM_CODE..]);
    if qform_code > 0 {
        let b = B::read_f32(&buf[QUATERN_B..]) as f64;
        let c = B::read_f32(&buf[QUATERN_B + 4..]) as f64;
        let d = B::read_f32(&buf[QUATERN_B + 8..]) as f64;
        let offset = [0, 1, 2].map(|i| B::read_f32(&buf[QOFFSET_X + 4 * i..]) as f64);
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let m = quaternion_affine([b, c, d], offset, spacing, qfac);
        if invertible(&m) {
            return m;
        }
    }
    diagonal_affine(spacing)
}

fn quaternion_affine(q: [f64; 3], offset: [f64; 3], spacing: [f64; 3], qfac: f64) -> Matrix4<f64> {
    let [mut b, mut c, mut d] = q;
    let mut a = 1.0 - (b * b + c * c + d * d);
    if a < 1e-7 {
        let norm = (b * b + c * c + d * d).sqrt();
        b /= norm;
        c /= norm;
        d /= norm;
        a = 0.0;
    } else {
        a = a.sqrt();
    }
    let r = [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ];
    let scale = [spacing[0], spacing[1], spacing[2] * qfac];
    let mut m = Matrix4::identity();
    for i in 0..3 {
        for j in 0..3 {
            m[(i, j)] = r[i][j] * scale[j];
        }
        m[(i, 3)] = offset[i];
    }
    m
}

/// Writes `v` as single-file NIfTI-1 with the sform set from its affine.
pub fn write_nifti(v: &Volume, path: impl AsRef<Path>, encoding: Encoding) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_nifti(v, encoding)?;
    let gz = path.extension().is_some_and(|e| e == "gz");
    let out = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::new(6));
        enc.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        bytes
    };
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Serializes `v` to uncompressed NIfTI-1 bytes.
pub fn encode_nifti(v: &Volume, encoding: Encoding) -> Result<Vec<u8>> {
    use offsets::*;
    let Encoding { dtype, slope, inter } = encoding;
    if !(slope != 0.0 && slope.is_finite() && inter.is_finite()) {
        return Err(Error::InvalidConfig(format!("invalid scaling slope={slope} inter={inter}")));
    }
    let (code, width) = match dtype {
        DType::U8 => (DT_UINT8, 1usize),
        DType::I16 => (DT_INT16, 2),
        DType::F32 => (DT_FLOAT32, 4),
    };
    let mut buf = vec![0u8; DATA_OFFSET + v.len() * width];
    LittleEndian::write_i32(&mut buf[0..4], HEADER_SIZE as i32);
    let dims = v.dims();
    let dim: [i16; 8] = [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
    if dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(Error::InvalidVolume(format!("dims {dims:?} exceed the NIfTI-1 limit")));
    }
    for (i, d) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut buf[DIM + 2 * i..], *d);
    }
    LittleEndian::write_i16(&mut buf[DATATYPE..], code);
    LittleEndian::write_i16(&mut buf[BITPIX..], (width * 8) as i16);
    let sp = v.spacing();
    let pixdim = [1.0f32, sp[0] as f32, sp[1] as f32, sp[2] as f32, 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut buf[PIXDIM + 4 * i..], *p);
    }
    LittleEndian::write_f32(&mut buf[offsets::VOX_OFFSET..], DATA_OFFSET as f32);
    let identity = dtype == DType::F32 && slope == 1.0 && inter == 0.0;
    LittleEndian::write_f32(&mut buf[SCL_SLOPE..], if identity { 0.0 } else { slope });
    LittleEndian::write_f32(&mut buf[SCL_INTER..], if identity { 0.0 } else { inter });
    buf[XYZT_UNITS] = 2; // mm
    let descrip = b"deepbet";
    buf[DESCRIP..DESCRIP + descrip.len()].copy_from_slice(descrip);
    LittleEndian::write_i16(&mut buf[QFORM_CODE..], 0);
    LittleEndian::write_i16(&mut buf[SFORM_CODE..], 1);
    let a = v.affine();
    for r in 0..3 {
        for c in 0..4 {
            LittleEndian::write_f32(&mut buf[SROW_X + 16 * r + 4 * c..], a[(r, c)] as f32);
        }
    }
    buf[MAGIC..MAGIC + 4].copy_from_slice(b"n+1\0");

    let payload = &mut buf[DATA_OFFSET..];
    let (s, i) = (slope as f64, inter as f64);
    match dtype {
        DType::F32 => {
            for (chunk, &x) in payload.chunks_exact_mut(4).zip(v.data()) {
                let stored = if identity { x } else { ((x as f64 - i) / s) as f32 };
                LittleEndian::write_f32(chunk, stored);
            }
        }
        DType::U8 => {
            for (b, &x) in payload.iter_mut().zip(v.data()) {
                *b = quantize(x, s, i, 0.0, 255.0, dtype)? as u8;
            }
        }
        DType::I16 => {
            for (chunk, &x) in payload.chunks_exact_mut(2).zip(v.data()) {
                let q = quantize(x, s, i, i16::MIN as f64, i16::MAX as f64, dtype)?;
                LittleEndian::write_i16(chunk, q as i16);
            }
        }
    }
    Ok(buf)
}

fn quantize(x: f32, slope: f64, inter: f64, lo: f64, hi: f64, dtype: DType) -> Result<f64> {
    let q = ((x as f64 - inter) / slope).round();
    if !(q >= lo && q <= hi) {
        return Err(Error::RangeOverflow {
            value: x as f64,
            dtype: dtype.name(),
        });
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_header(datatype: i16, bitpix: i16, dims: [i16; 3]) -> Vec<u8> {
        let mut h = vec![0u8; DATA_OFFSET];
        LittleEndian::write_i32(&mut h[0..4], 348);
        let dim = [3, dims[0], dims[1], dims[2], 1, 1, 1, 1];
        for (i, d) in dim.iter().enumerate() {
            LittleEndian::write_i16(&mut h[offsets::DIM + 2 * i..], *d);
        }
        LittleEndian::write_i16(&mut h[offsets::DATATYPE..], datatype);
        LittleEndian::write_i16(&mut h[offsets::BITPIX..], bitpix);
        for i in 0..4 {
            LittleEndian::write_f32(&mut h[offsets::PIXDIM + 4 * i..], 1.0);
        }
        LittleEndian::write_f32(&mut h[offsets::VOX_OFFSET..], DATA_OFFSET as f32);
        h[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(b"n+1\0");
        h
    }

    #[test]
    fn reads_minimal_int16_file() {
        let mut raw = minimal_header(DT_INT16, 16, [2, 2, 2]);
        for i in 0..8i16 {
            raw.extend_from_slice(&(i - 3).to_le_bytes());
        }
        let v = decode_nifti(&raw).unwrap();
        assert_eq!(v.dims(), [2, 2, 2]);
        assert_eq!(v.dtype(), DType::I16);
        assert_eq!(v.data(), &[-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(v.affine(), &Matrix4::identity());
    }

    #[test]
    fn applies_slope_and_intercept() {
        let mut raw = minimal_header(DT_INT16, 16, [1, 1, 1]);
        LittleEndian::write_f32(&mut raw[offsets::SCL_SLOPE..], 2.0);
        LittleEndian::write_f32(&mut raw[offsets::SCL_INTER..], 1.0);
        raw.extend_from_slice(&3i16.to_le_bytes());
        assert_eq!(decode_nifti(&raw).unwrap().data(), &[7.0]);
    }

    #[test]
    fn rejects_bad_headers() {
        let mut raw = minimal_header(DT_INT16, 16, [2, 2, 2]);
        raw.extend_from_slice(&[0u8; 16]);
        let mut bad_magic = raw.clone();
        bad_magic[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(b"ni1\0");
        assert!(matches!(decode_nifti(&bad_magic), Err(Error::CorruptHeader(_))));
        let mut bad_size = raw.clone();
        LittleEndian::write_i32(&mut bad_size[0..4], 540);
        assert!(matches!(decode_nifti(&bad_size), Err(Error::CorruptHeader(_))));
        let mut f64_type = raw.clone();
        LittleEndian::write_i16(&mut f64_type[offsets::DATATYPE..], 64);
        assert!(matches!(decode_nifti(&f64_type), Err(Error::UnsupportedDtype(64))));
        assert!(matches!(
            decode_nifti(&raw[..raw.len() - 1]),
            Err(Error::TruncatedData { .. })
        ));
        assert!(matches!(decode_nifti(&raw[..100]), Err(Error::TruncatedData { .. })));
    }

    #[test]
    fn reads_big_endian_header() {
        let mut h = vec![0u8; DATA_OFFSET];
        BigEndian::write_i32(&mut h[0..4], 348);
        for (i, d) in [3i16, 2, 1, 1, 1, 1, 1, 1].iter().enumerate() {
            BigEndian::write_i16(&mut h[offsets::DIM + 2 * i..], *d);
        }
        BigEndian::write_i16(&mut h[offsets::DATATYPE..], DT_FLOAT32);
        BigEndian::write_i16(&mut h[offsets::BITPIX..], 32);
        BigEndian::write_f32(&mut h[offsets::VOX_OFFSET..], 352.0);
        h[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(b"n+1\0");
        h.extend_from_slice(&1.5f32.to_be_bytes());
        h.extend_from_slice(&(-2.0f32).to_be_bytes());
        assert_eq!(decode_nifti(&h).unwrap().data(), &[1.5, -2.0]);
    }

    #[test]
    fn qform_used_when_sform_absent() {
        let mut raw = minimal_header(DT_UINT8, 8, [1, 1, 1]);
        LittleEndian::write_i16(&mut raw[offsets::QFORM_CODE..], 1);
        // 180 degrees about z: b=0, c=0, d=1
        LittleEndian::write_f32(&mut raw[offsets::QUATERN_B + 8..], 1.0);
        LittleEndian::write_f32(&mut raw[offsets::QOFFSET_X..], 5.0);
        raw.push(9);
        let v = decode_nifti(&raw).unwrap();
        let a = v.affine();
        assert!((a[(0, 0)] + 1.0).abs() < 1e-9 && (a[(1, 1)] + 1.0).abs() < 1e-9);
        assert!((a[(2, 2)] - 1.0).abs() < 1e-9 && (a[(0, 3)] - 5.0).abs() < 1e-9);
    }

    #[test]
    fn float_round_trip_is_bit_exact_and_gzip_detected() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..60).map(|i| (i as f32 * 0.37).sin() * 1e3).collect();
        let mut a = diagonal_affine([0.9, 1.1, 1.3]);
        a[(0, 3)] = -12.5;
        let v = Volume::new([3, 4, 5], data, [0.9, 1.1, 1.3], a).unwrap();
        for name in ["v.nii", "v.nii.gz"] {
            let p = dir.path().join(name);
            write_nifti(&v, &p, Encoding::float32()).unwrap();
            let r = read_nifti(&p).unwrap();
            assert_eq!(r.dims(), v.dims());
            assert_eq!(r.spacing(), [0.9f32 as f64, 1.1f32 as f64, 1.3f32 as f64]);
            let bits = |x: &Volume| x.data().iter().map(|f| f.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&r), bits(&v));
        }
    }

    #[test]
    fn probability_u8_quantization_bound() {
        let data: Vec<f32> = (0..1000).map(|i| ((i as f32) * 0.6180339).fract()).collect();
        let v = Volume::from_data([10, 10, 10], data, [1.0; 3]).unwrap();
        let back = decode_nifti(&encode_nifti(&v, Encoding::probability_u8()).unwrap()).unwrap();
        let worst = v
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1.0 / 510.0 + f32::EPSILON as f64, "{worst}");
    }

    #[test]
    fn integer_overflow_is_reported() {
        let v = Volume::from_data([1, 1, 2], vec![1.0, 70000.0], [1.0; 3]).unwrap();
        assert!(matches!(
            encode_nifti(&v, Encoding::int16()),
            Err(Error::RangeOverflow { dtype: "int16", .. })
        ));
        let neg = Volume::from_data([1, 1, 1], vec![-1.0], [1.0; 3]).unwrap();
        assert!(encode_nifti(&neg, Encoding::uint8()).is_err());
    }
}
