//! Minimal NIfTI-1 single-file (`.nii` / `.nii.gz`) reader and writer.
//!
//! Reading reorients the payload to canonical X,Y,Z using the sform (or
//! qform) direction matrix; oblique matrices are rejected. Writing always
//! emits an axis-aligned affine with positive spacing on the diagonal.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{Array3, Axis, ShapeBuilder};

use super::Volume;
use crate::error::{Error, Result};

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
const DT_INT64: i16 = 1024;

/// Largest off-axis component tolerated in a direction cosine.
const OBLIQUE_TOLERANCE: f64 = 1e-4;

fn is_gz(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

struct HeaderReader<'a> {
    buf: &'a [u8],
    swap: bool,
}

impl HeaderReader<'_> {
    fn bytes<const N: usize>(&self, off: usize) -> [u8; N] {
        let mut b: [u8; N] = self.buf[off..off + N].try_into().unwrap();
        if self.swap {
            b.reverse();
        }
        b
    }
    fn i16(&self, off: usize) -> i16 {
        i16::from_le_bytes(self.bytes(off))
    }
    fn f32(&self, off: usize) -> f32 {
        f32::from_le_bytes(self.bytes(off))
    }
}

/// Loads a NIfTI-1 volume, squeezing trailing singleton dimensions.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut raw = Vec::new();
    if is_gz(path) {
        GzDecoder::new(BufReader::new(file))
            .read_to_end(&mut raw)
            .map_err(|e| Error::io(path, e))?;
    } else {
        BufReader::new(file)
            .read_to_end(&mut raw)
            .map_err(|e| Error::io(path, e))?;
    }
    decode(&raw).map_err(|m| Error::format(path, m))
}

fn decode(raw: &[u8]) -> std::result::Result<Volume, String> {
    if raw.len() < HEADER_SIZE {
        return Err(format!(
            "file too short for a NIfTI-1 header ({} bytes)",
            raw.len()
        ));
    }
    let swap = match i32::from_le_bytes(raw[0..4].try_into().unwrap()) {
        348 => false,
        _ if i32::from_be_bytes(raw[0..4].try_into().unwrap()) == 348 => true,
        other => return Err(format!("bad sizeof_hdr {other}")),
    };
    let h = HeaderReader { buf: raw, swap };
    if &raw[344..347] != b"n+1" && &raw[344..347] != b"ni1" {
        return Err("missing NIfTI-1 magic".into());
    }

    let ndim = h.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(format!("invalid dim[0] = {ndim}"));
    }
    let dims: Vec<usize> = (1..=ndim as usize)
        .map(|i| h.i16(40 + 2 * i).max(0) as usize)
        .collect();
    if dims.len() < 3 {
        return Err(format!("payload is {}-dimensional, expected 3", dims.len()));
    }
    if dims[3..].iter().any(|&d| d != 1) {
        return Err(format!(
            "payload has non-singleton dimensions beyond 3: {dims:?}"
        ));
    }
    let shape = [dims[0], dims[1], dims[2]];
    if shape.contains(&0) {
        return Err(format!("zero-length dimension in {shape:?}"));
    }
    let n = shape.iter().product::<usize>();

    let datatype = h.i16(70);
    let vox_offset = h.f32(108).max(HEADER_SIZE as f32) as usize;
    let slope = h.f32(112);
    let inter = h.f32(116);
    let pixdim: Vec<f64> = (0..4).map(|i| h.f32(76 + 4 * i) as f64).collect();

    let width = match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_UINT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 | DT_INT64 => 8,
        other => return Err(format!("unsupported datatype code {other}")),
    };
    let payload = raw
        .get(vox_offset..vox_offset + n * width)
        .ok_or_else(|| "payload shorter than header dimensions".to_string())?;

    let mut values: Vec<f32> = payload
        .chunks_exact(width)
        .map(|c| {
            let mut b = [0u8; 8];
            b[..width].copy_from_slice(c);
            if swap {
                b[..width].reverse();
            }
            match datatype {
                DT_UINT8 => b[0] as f32,
                DT_INT8 => b[0] as i8 as f32,
                DT_INT16 => i16::from_le_bytes([b[0], b[1]]) as f32,
                DT_UINT16 => u16::from_le_bytes([b[0], b[1]]) as f32,
                DT_INT32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f32,
                DT_UINT32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f32,
                DT_FLOAT32 => f32::from_le_bytes(b[..4].try_into().unwrap()),
                DT_FLOAT64 => f64::from_le_bytes(b) as f32,
                DT_INT64 => i64::from_le_bytes(b) as f32,
                _ => unreachable!(),
            }
        })
        .collect();
    if slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0) {
        for v in &mut values {
            *v = *v * slope + inter;
        }
    }

    // On disk the first index varies fastest.
    let data = Array3::from_shape_vec(shape.f(), values).map_err(|e| e.to_string())?;
    let affine = read_affine(&h, &pixdim);
    reorient(data, affine)
}

/// Returns the 3x4 voxel-to-world matrix.
fn read_affine(h: &HeaderReader, pixdim: &[f64]) -> [[f64; 4]; 3] {
    let qform_code = h.i16(252);
    let sform_code = h.i16(254);
    if sform_code > 0 {
        let mut m = [[0.0; 4]; 3];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = h.f32(280 + 16 * r + 4 * c) as f64;
            }
        }
        return m;
    }
    let spacing = [pixdim[1].abs(), pixdim[2].abs(), pixdim[3].abs()];
    if qform_code > 0 {
        let (b, c, d) = (h.f32(256) as f64, h.f32(260) as f64, h.f32(264) as f64);
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let r = [
            [
                a * a + b * b - c * c - d * d,
                2.0 * (b * c - a * d),
                2.0 * (b * d + a * c),
            ],
            [
                2.0 * (b * c + a * d),
                a * a + c * c - b * b - d * d,
                2.0 * (c * d - a * b),
            ],
            [
                2.0 * (b * d - a * c),
                2.0 * (c * d + a * b),
                a * a + d * d - c * c - b * b,
            ],
        ];
        let offset = [h.f32(268) as f64, h.f32(272) as f64, h.f32(276) as f64];
        let scale = [spacing[0], spacing[1], qfac * spacing[2]];
        let mut m = [[0.0; 4]; 3];
        for row in 0..3 {
            for col in 0..3 {
                m[row][col] = r[row][col] * scale[col];
            }
            m[row][3] = offset[row];
        }
        return m;
    }
    [
        [spacing[0], 0.0, 0.0, 0.0],
        [0.0, spacing[1], 0.0, 0.0],
        [0.0, 0.0, spacing[2], 0.0],
    ]
}

/// Permutes and flips array axes so that array axis `i` runs along world
/// axis `i` in the positive direction.
fn reorient(data: Array3<f32>, m: [[f64; 4]; 3]) -> std::result::Result<Volume, String> {
    // world_axis[col] = which world axis array axis `col` points along.
    let mut world_axis = [0usize; 3];
    let mut sign = [1.0f64; 3];
    let mut spacing_by_array_axis = [0.0; 3];
    for col in 0..3 {
        let column = [m[0][col], m[1][col], m[2][col]];
        let norm = column.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 0.0 || !norm.is_finite() {
            return Err(format!("degenerate direction for axis {col}"));
        }
        let (best, _) = column
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap();
        for (r, v) in column.iter().enumerate() {
            if r != best && (v / norm).abs() > OBLIQUE_TOLERANCE {
                return Err("non-axis-aligned direction matrix".into());
            }
        }
        world_axis[col] = best;
        sign[col] = column[best].signum();
        spacing_by_array_axis[col] = norm;
    }
    let mut seen = [false; 3];
    for &w in &world_axis {
        if seen[w] {
            return Err("direction matrix maps two array axes onto one world axis".into());
        }
        seen[w] = true;
    }

    let mut origin = [m[0][3], m[1][3], m[2][3]];
    let mut data = data;
    for col in 0..3 {
        if sign[col] < 0.0 {
            let n = data.len_of(Axis(col));
            data.invert_axis(Axis(col));
            // voxel n-1 along this axis becomes the new index 0
            let w = world_axis[col];
            origin[w] += m[w][col] * (n as f64 - 1.0);
        }
    }
    // perm[world] = array axis currently pointing along `world`
    let mut perm = [0usize; 3];
    for col in 0..3 {
        perm[world_axis[col]] = col;
    }
    let data = data.permuted_axes(perm).as_standard_layout().into_owned();
    let spacing = [
        spacing_by_array_axis[perm[0]],
        spacing_by_array_axis[perm[1]],
        spacing_by_array_axis[perm[2]],
    ];
    Volume::new(data, spacing, origin).map_err(|e| e.to_string())
}

/// Saves a volume as NIfTI-1. Binary volumes are written as uint8, all
/// others as float32. A `.gz` extension selects gzip compression.
pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(v);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    if is_gz(path) {
        let mut gz = GzEncoder::new(w, Compression::fast());
        gz.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        w = gz.finish().map_err(|e| Error::io(path, e))?;
    } else {
        w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn encode(v: &Volume) -> Vec<u8> {
    let binary = v.is_binary();
    let (datatype, bitpix) = if binary {
        (DT_UINT8, 8i16)
    } else {
        (DT_FLOAT32, 32i16)
    };
    let shape = v.shape();
    let spacing = v.spacing();
    let origin = v.origin();

    let mut h = vec![0u8; VOX_OFFSET];
    let put_i16 =
        |h: &mut [u8], off: usize, x: i16| h[off..off + 2].copy_from_slice(&x.to_le_bytes());
    let put_f32 =
        |h: &mut [u8], off: usize, x: f32| h[off..off + 4].copy_from_slice(&x.to_le_bytes());
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    put_i16(&mut h, 40, 3);
    for (i, &d) in shape.iter().enumerate() {
        put_i16(&mut h, 42 + 2 * i, d as i16);
    }
    for i in 3..7 {
        put_i16(&mut h, 42 + 2 * i, 1);
    }
    put_i16(&mut h, 70, datatype);
    put_i16(&mut h, 72, bitpix);
    put_f32(&mut h, 76, 1.0);
    for (i, &s) in spacing.iter().enumerate() {
        put_f32(&mut h, 80 + 4 * i, s as f32);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    h[123] = 2; // millimetres
    put_i16(&mut h, 252, 1);
    put_i16(&mut h, 254, 1);
    for (i, &o) in origin.iter().enumerate() {
        put_f32(&mut h, 268 + 4 * i, o as f32);
    }
    for r in 0..3 {
        put_f32(&mut h, 280 + 16 * r + 4 * r, spacing[r] as f32);
        put_f32(&mut h, 280 + 16 * r + 12, origin[r] as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");

    // first index fastest on disk
    let fortran = v.data().t();
    let n = v.len();
    h.reserve(n * if binary { 1 } else { 4 });
    if binary {
        h.extend(fortran.iter().map(|&x| x as u8));
    } else {
        for &x in fortran.iter() {
            h.extend_from_slice(&x.to_le_bytes());
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(shape: [usize; 3]) -> Volume {
        let n = shape.iter().product::<usize>();
        let data = (0..n).map(|i| (i as f32 * 0.37).sin() * 100.0).collect();
        Volume::from_vec(shape, data, [0.8, 0.9, 2.5], [-12.5, 30.25, 101.0]).unwrap()
    }

    /// Hand-built header for exercising the reader on layouts the writer
    /// never produces.
    fn header(dims: &[i16], datatype: i16, bitpix: i16, pixdim: [f32; 4]) -> Vec<u8> {
        let mut h = vec![0u8; VOX_OFFSET];
        h[0..4].copy_from_slice(&348i32.to_le_bytes());
        h[40..42].copy_from_slice(&(dims.len() as i16).to_le_bytes());
        for (i, d) in dims.iter().enumerate() {
            h[42 + 2 * i..44 + 2 * i].copy_from_slice(&d.to_le_bytes());
        }
        h[70..72].copy_from_slice(&datatype.to_le_bytes());
        h[72..74].copy_from_slice(&bitpix.to_le_bytes());
        for (i, p) in pixdim.iter().enumerate() {
            h[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
        }
        h[108..112].copy_from_slice(&352f32.to_le_bytes());
        h[344..348].copy_from_slice(b"n+1\0");
        h
    }

    #[test]
    fn roundtrip_float_plain_and_gz() {
        let dir = tempfile::tempdir().unwrap();
        let v = sample([5, 6, 7]);
        for name in ["a.nii", "a.nii.gz"] {
            let p = dir.path().join(name);
            save_volume(&v, &p).unwrap();
            let back = load_volume(&p).unwrap();
            assert_eq!(back.data(), v.data());
            for i in 0..3 {
                assert!((back.spacing()[i] - v.spacing()[i]).abs() < 1e-4);
                assert!((back.origin()[i] - v.origin()[i]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn masks_are_stored_as_u8() {
        let dir = tempfile::tempdir().unwrap();
        let v = sample([8, 8, 8]).threshold(0.0);
        let p = dir.path().join("m.nii");
        save_volume(&v, &p).unwrap();
        let len = std::fs::metadata(&p).unwrap().len() as usize;
        assert_eq!(len, VOX_OFFSET + 512);
        assert_eq!(load_volume(&p).unwrap().data(), v.data());
    }

    #[test]
    fn header_spacing_passthrough_and_squeeze() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = header(&[64, 64, 32, 1], DT_INT16, 16, [1.0, 1.0, 1.0, 3.0]);
        bytes.extend(std::iter::repeat_n(0u8, 64 * 64 * 32 * 2));
        let p = dir.path().join("four.nii");
        std::fs::write(&p, bytes).unwrap();
        let v = load_volume(&p).unwrap();
        assert_eq!(v.shape(), [64, 64, 32]);
        assert_eq!(v.spacing(), [1.0, 1.0, 3.0]);
    }

    #[test]
    fn two_d_payload_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = header(&[16, 16], DT_UINT8, 8, [1.0; 4]);
        bytes.extend(std::iter::repeat_n(0u8, 256));
        let p = dir.path().join("flat.nii");
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Format { .. })));

        let mut bytes = header(&[4, 4, 4, 2], DT_UINT8, 8, [1.0; 4]);
        bytes.extend(std::iter::repeat_n(0u8, 128));
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_file_and_directory_are_io_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_volume(dir.path().join("nope.nii")),
            Err(Error::Io { .. })
        ));
        let v = sample([2, 2, 2]);
        let bad = dir.path().join("missing_dir").join("x.nii.gz");
        assert!(matches!(save_volume(&v, bad), Err(Error::Io { .. })));
    }

    #[test]
    fn flipped_sform_is_reoriented() {
        // array axis 0 runs along -X: world x = 10 - 2*i
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = header(&[3, 2, 2], DT_UINT8, 8, [1.0, 2.0, 1.0, 1.0]);
        bytes[254..256].copy_from_slice(&1i16.to_le_bytes());
        let srow = [
            [-2.0f32, 0.0, 0.0, 10.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 5.0],
        ];
        for (r, row) in srow.iter().enumerate() {
            for (c, val) in row.iter().enumerate() {
                let off = 280 + 16 * r + 4 * c;
                bytes[off..off + 4].copy_from_slice(&val.to_le_bytes());
            }
        }
        // disk order: i fastest; voxel value = i
        for _k in 0..2 {
            for _j in 0..2 {
                for i in 0..3u8 {
                    bytes.push(i);
                }
            }
        }
        let p = dir.path().join("flip.nii");
        std::fs::write(&p, bytes).unwrap();
        let v = load_volume(&p).unwrap();
        assert_eq!(v.spacing(), [2.0, 1.0, 1.0]);
        assert_eq!(v.origin(), [6.0, 0.0, 5.0]);
        assert_eq!(v.data()[[0, 0, 0]], 2.0);
        assert_eq!(v.data()[[2, 1, 1]], 0.0);
    }

    #[test]
    fn permuted_sform_is_reoriented() {
        // array axis 0 runs along world Z, array axis 2 along world X
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = header(&[2, 3, 4], DT_UINT8, 8, [1.0; 4]);
        bytes[254..256].copy_from_slice(&1i16.to_le_bytes());
        let srow = [
            [0.0f32, 0.0, 1.5, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [3.0, 0.0, 0.0, 0.0],
        ];
        for (r, row) in srow.iter().enumerate() {
            for (c, val) in row.iter().enumerate() {
                let off = 280 + 16 * r + 4 * c;
                bytes[off..off + 4].copy_from_slice(&val.to_le_bytes());
            }
        }
        for k in 0..4u8 {
            for _j in 0..3 {
                for i in 0..2u8 {
                    bytes.push(10 * k + i);
                }
            }
        }
        let p = dir.path().join("perm.nii");
        std::fs::write(&p, bytes).unwrap();
        let v = load_volume(&p).unwrap();
        assert_eq!(v.shape(), [4, 3, 2]);
        assert_eq!(v.spacing(), [1.5, 1.0, 3.0]);
        assert_eq!(v.data()[[3, 0, 1]], 31.0);
    }

    #[test]
    fn oblique_direction_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = header(&[2, 2, 2], DT_UINT8, 8, [1.0; 4]);
        bytes[254..256].copy_from_slice(&1i16.to_le_bytes());
        let srow = [
            [0.7f32, 0.7, 0.0, 0.0],
            [-0.7, 0.7, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ];
        for (r, row) in srow.iter().enumerate() {
            for (c, val) in row.iter().enumerate() {
                let off = 280 + 16 * r + 4 * c;
                bytes[off..off + 4].copy_from_slice(&val.to_le_bytes());
            }
        }
        bytes.extend([0u8; 8]);
        let p = dir.path().join("obl.nii");
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Format { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn roundtrip_is_lossless(
            nx in 1usize..6, ny in 1usize..6, nz in 1usize..6,
            seed in any::<u32>(),
            binary in any::<bool>(),
        ) {
            let n = nx * ny * nz;
            let mut state = seed as u64 | 1;
            let data: Vec<f32> = (0..n).map(|_| {
                state ^= state << 13; state ^= state >> 7; state ^= state << 17;
                let u = (state >> 40) as f32 / (1u64 << 24) as f32;
                if binary { (u > 0.5) as u8 as f32 } else { u * 2000.0 - 1000.0 }
            }).collect();
            let v = Volume::from_vec([nx, ny, nz], data, [0.7, 1.3, 2.0], [1.0, -2.0, 3.5]).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("v.nii.gz");
            save_volume(&v, &p).unwrap();
            let back = load_volume(&p).unwrap();
            prop_assert_eq!(back.data(), v.data());
        }
    }
}
