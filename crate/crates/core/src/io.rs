//! File formats: Middlebury `.flo` flow files, binary PGM/PPM frames, 8-bit heatmaps and
//! masks, and PFM float maps.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::field::{GridShape, ScalarField, VectorField2};
use crate::flow::Frame;
use crate::scalar::Real;

/// Magic number at the start of every `.flo` file.
pub const FLO_MAGIC: f32 = 202021.25;
const FLO_HEADER: usize = 12;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: bad magic {found} (expected {FLO_MAGIC})")]
    BadMagic { path: PathBuf, found: f32 },
    #[error("{path}: truncated at byte {offset}, expected {expected} bytes")]
    TruncatedFile { path: PathBuf, offset: usize, expected: usize },
    #[error("{path}: dimension mismatch: {detail}")]
    DimensionMismatch { path: PathBuf, detail: String },
    #[error("{path}: malformed at byte {offset}: {detail}")]
    Format { path: PathBuf, offset: usize, detail: String },
}

impl IoError {
    pub fn path(&self) -> &Path {
        match self {
            IoError::Io { path, .. }
            | IoError::BadMagic { path, .. }
            | IoError::TruncatedFile { path, .. }
            | IoError::DimensionMismatch { path, .. }
            | IoError::Format { path, .. } => path,
        }
    }

    /// Byte offset of a format problem, where one applies.
    pub fn offset(&self) -> Option<usize> {
        match self {
            IoError::BadMagic { .. } => Some(0),
            IoError::TruncatedFile { offset, .. } | IoError::Format { offset, .. } => Some(*offset),
            _ => None,
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|source| IoError::Io { path: path.into(), source })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let io = |source| IoError::Io { path: path.into(), source };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(bytes).map_err(io)
}

/// Decodes a `.flo` file held in memory; `path` only labels errors.
pub fn decode_flo<T: Real>(bytes: &[u8], path: &Path) -> Result<VectorField2<T>, IoError> {
    if bytes.len() < 4 {
        return Err(IoError::TruncatedFile { path: path.into(), offset: bytes.len(), expected: FLO_HEADER });
    }
    let word = |o: usize| [bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]];
    let magic = f32::from_le_bytes(word(0));
    if magic != FLO_MAGIC {
        return Err(IoError::BadMagic { path: path.into(), found: magic });
    }
    if bytes.len() < FLO_HEADER {
        return Err(IoError::TruncatedFile { path: path.into(), offset: bytes.len(), expected: FLO_HEADER });
    }
    let w = i32::from_le_bytes(word(4));
    let h = i32::from_le_bytes(word(8));
    let shape = (w >= 2 && h >= 2)
        .then(|| GridShape::new(w as usize, h as usize).ok())
        .flatten()
        .ok_or_else(|| IoError::DimensionMismatch { path: path.into(), detail: format!("header declares {w}x{h}") })?;
    let expected = shape
        .len()
        .checked_mul(8)
        .and_then(|n| n.checked_add(FLO_HEADER))
        .ok_or_else(|| IoError::DimensionMismatch { path: path.into(), detail: format!("{w}x{h} overflows") })?;
    if bytes.len() < expected {
        return Err(IoError::TruncatedFile { path: path.into(), offset: bytes.len(), expected });
    }
    if bytes.len() > expected {
        return Err(IoError::DimensionMismatch {
            path: path.into(),
            detail: format!("{} trailing bytes after {w}x{h} payload", bytes.len() - expected),
        });
    }
    let mut u = Vec::with_capacity(shape.len());
    let mut v = Vec::with_capacity(shape.len());
    for i in 0..shape.len() {
        let o = FLO_HEADER + 8 * i;
        u.push(T::lit(f32::from_le_bytes(word(o)) as f64));
        v.push(T::lit(f32::from_le_bytes(word(o + 4)) as f64));
    }
    VectorField2::new(shape, u, v).map_err(|e| IoError::Format {
        path: path.into(),
        offset: FLO_HEADER,
        detail: e.to_string(),
    })
}

pub fn encode_flo<T: Real>(field: &VectorField2<T>) -> Vec<u8> {
    let s = field.shape();
    let mut out = Vec::with_capacity(FLO_HEADER + 8 * s.len());
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(s.width as i32).to_le_bytes());
    out.extend_from_slice(&(s.height as i32).to_le_bytes());
    for (a, b) in field.u().iter().zip(field.v()) {
        out.extend_from_slice(&(a.to_f64_lossy() as f32).to_le_bytes());
        out.extend_from_slice(&(b.to_f64_lossy() as f32).to_le_bytes());
    }
    out
}

pub fn read_flo<T: Real>(path: impl AsRef<Path>) -> Result<VectorField2<T>, IoError> {
    let path = path.as_ref();
    decode_flo(&read(path)?, path)
}

pub fn write_flo<T: Real>(field: &VectorField2<T>, path: impl AsRef<Path>) -> Result<(), IoError> {
    write(path.as_ref(), &encode_flo(field))
}

/// Header of a binary netpbm image.
struct PnmHeader {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: u16,
    data_offset: usize,
}

fn parse_pnm_header(bytes: &[u8], path: &Path) -> Result<PnmHeader, IoError> {
    let bad = |offset: usize, detail: &str| IoError::Format { path: path.into(), offset, detail: detail.into() };
    if bytes.len() < 2 || !(bytes[0] == b'P' && (bytes[1] == b'5' || bytes[1] == b'6')) {
        return Err(bad(0, "expected binary PGM (P5) or PPM (P6)"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(IoError::TruncatedFile { path: path.into(), offset: pos, expected: pos + 1 }),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(bad(pos, "expected a decimal header field"));
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(start, "header field out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad(pos, "expected whitespace after maxval"));
    }
    let [width, height, maxval] = fields;
    if !(1..=65535).contains(&maxval) {
        return Err(bad(pos, "maxval must lie in 1..=65535"));
    }
    Ok(PnmHeader { magic: [bytes[0], bytes[1]], width, height, maxval: maxval as u16, data_offset: pos + 1 })
}

/// Reads a binary PGM or PPM (8- or 16-bit); colour is converted to luma.
pub fn read_pnm<T: Real>(path: impl AsRef<Path>) -> Result<Frame<T>, IoError> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let hdr = parse_pnm_header(&bytes, path)?;
    let shape = GridShape::new(hdr.width, hdr.height).map_err(|e| IoError::DimensionMismatch {
        path: path.into(),
        detail: e.to_string(),
    })?;
    let channels = if hdr.magic[1] == b'6' { 3 } else { 1 };
    let sample = if hdr.maxval > 255 { 2 } else { 1 };
    let expected = hdr.data_offset + shape.len() * channels * sample;
    if bytes.len() < expected {
        return Err(IoError::TruncatedFile { path: path.into(), offset: bytes.len(), expected });
    }
    let data = &bytes[hdr.data_offset..expected];
    let levels: Vec<u16> = if sample == 2 {
        data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        data.iter().map(|&b| b as u16).collect()
    };
    if let Some(i) = levels.iter().position(|&l| l > hdr.maxval) {
        return Err(IoError::Format {
            path: path.into(),
            offset: hdr.data_offset + i * sample,
            detail: format!("sample exceeds maxval {}", hdr.maxval),
        });
    }
    let frame = if channels == 3 {
        Frame::from_rgb(shape, &levels, hdr.maxval)
    } else {
        Frame::from_gray(shape, &levels, hdr.maxval)
    };
    frame.map_err(|e| IoError::Format { path: path.into(), offset: hdr.data_offset, detail: e.to_string() })
}

/// Raw 8-bit P5 image.
pub fn write_pgm(path: impl AsRef<Path>, shape: GridShape, pixels: &[u8]) -> Result<(), IoError> {
    assert_eq!(pixels.len(), shape.len(), "pixel count must match the shape");
    let mut out = format!("P5\n{} {}\n255\n", shape.width, shape.height).into_bytes();
    out.extend_from_slice(pixels);
    write(path.as_ref(), &out)
}

/// Writes a frame as 8-bit PGM.
pub fn write_frame<T: Real>(frame: &Frame<T>, path: impl AsRef<Path>) -> Result<(), IoError> {
    let px: Vec<u8> = frame
        .intensity()
        .iter()
        .map(|v| (v.to_f64_lossy() * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    write_pgm(path, frame.shape(), &px)
}

/// Sidecar path that records a heatmap's value range.
pub fn heatmap_sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".range.txt");
    path.with_file_name(name)
}

/// 8-bit levels for `field` rescaled from `[min, max]`; a constant field maps to 128.
pub fn heatmap_levels<T: Real>(field: &ScalarField<T>) -> (Vec<u8>, f64, f64) {
    let (lo, hi) = field.min_max();
    let (lo, hi) = (lo.to_f64_lossy(), hi.to_f64_lossy());
    let px = field
        .values()
        .iter()
        .map(|v| {
            if hi > lo {
                ((v.to_f64_lossy() - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                128
            }
        })
        .collect();
    (px, lo, hi)
}

/// Grayscale PGM heatmap, with `min`/`max` written to [`heatmap_sidecar`].
pub fn write_heatmap<T: Real>(field: &ScalarField<T>, path: impl AsRef<Path>) -> Result<(), IoError> {
    let path = path.as_ref();
    let (px, lo, hi) = heatmap_levels(field);
    write_pgm(path, field.shape(), &px)?;
    write(&heatmap_sidecar(path), format!("min {lo:e}\nmax {hi:e}\n").as_bytes())
}

/// Mask as a PGM with values 0 and 255.
pub fn write_mask<T: Real>(mask: &ScalarField<T>, path: impl AsRef<Path>) -> Result<(), IoError> {
    let px: Vec<u8> = mask.values().iter().map(|&v| if v != T::zero() { 255 } else { 0 }).collect();
    write_pgm(path, mask.shape(), &px)
}

/// Single-channel PFM (`Pf`), little-endian, rows stored bottom to top.
pub fn write_pfm<T: Real>(field: &ScalarField<T>, path: impl AsRef<Path>) -> Result<(), IoError> {
    let s = field.shape();
    let mut out = format!("Pf\n{} {}\n-1.0\n", s.width, s.height).into_bytes();
    for y in (0..s.height).rev() {
        for x in 0..s.width {
            out.extend_from_slice(&(field.get(x, y).to_f64_lossy() as f32).to_le_bytes());
        }
    }
    write(path.as_ref(), &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(w: usize, h: usize) -> GridShape {
        GridShape::new(w, h).unwrap()
    }

    #[test]
    fn flo_header_layout() {
        let f = VectorField2::new(shape(3, 2), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![0.5; 6]).unwrap();
        let b = encode_flo(&f);
        assert_eq!(b.len(), 12 + 48);
        assert_eq!(&b[0..4], &202021.25f32.to_le_bytes());
        assert_eq!(&b[4..8], &3i32.to_le_bytes());
        assert_eq!(&b[8..12], &2i32.to_le_bytes());
        assert_eq!(&b[12..16], &1.0f32.to_le_bytes());
        assert_eq!(&b[16..20], &0.5f32.to_le_bytes());
        assert_eq!(&b[20..24], &2.0f32.to_le_bytes());
    }

    #[test]
    fn flo_errors() {
        let p = Path::new("x.flo");
        assert!(matches!(decode_flo::<f64>(&[0, 0, 0, 0, 3, 0, 0, 0], p), Err(IoError::BadMagic { .. })));
        assert!(matches!(decode_flo::<f64>(&[1, 2], p), Err(IoError::TruncatedFile { .. })));
        let mut b = FLO_MAGIC.to_le_bytes().to_vec();
        b.extend_from_slice(&0i32.to_le_bytes());
        b.extend_from_slice(&5i32.to_le_bytes());
        assert!(matches!(decode_flo::<f64>(&b, p), Err(IoError::DimensionMismatch { .. })));
        let mut good = encode_flo(&VectorField2::<f64>::zeros(shape(2, 2)));
        good.push(0);
        assert!(matches!(decode_flo::<f64>(&good, p), Err(IoError::DimensionMismatch { .. })));
    }

    #[test]
    fn pnm_header_with_comments() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let mut bytes = b"P5\n# made by hand\n2 2\n# depth\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255, 51, 102]);
        fs::write(&p, &bytes).unwrap();
        let f = read_pnm::<f64>(&p).unwrap();
        assert_eq!(f.intensity(), &[0.0, 1.0, 0.2, 0.4]);

        let p6 = dir.path().join("b.ppm");
        let mut bytes = b"P6 2 2 65535\n".to_vec();
        for _ in 0..4 {
            bytes.extend_from_slice(&[0xff, 0xff, 0, 0, 0, 0]);
        }
        fs::write(&p6, &bytes).unwrap();
        let f = read_pnm::<f64>(&p6).unwrap();
        assert!((f.intensity()[0] - 0.299).abs() < 1e-12);
    }

    #[test]
    fn pnm_errors_carry_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.pgm");
        fs::write(&p, b"P2\n2 2\n255\n").unwrap();
        assert_eq!(read_pnm::<f64>(&p).unwrap_err().offset(), Some(0));
        fs::write(&p, b"P5\n2 x\n255\n").unwrap();
        assert_eq!(read_pnm::<f64>(&p).unwrap_err().offset(), Some(5));
        fs::write(&p, b"P5\n2 2\n255\n\x01\x02").unwrap();
        let e = read_pnm::<f64>(&p).unwrap_err();
        assert!(matches!(e, IoError::TruncatedFile { offset: 13, expected: 15, .. }), "{e}");
        fs::write(&p, b"P5\n2 2\n10\n\x01\x02\x0b\x00").unwrap();
        assert_eq!(read_pnm::<f64>(&p).unwrap_err().offset(), Some(12));
    }

    #[test]
    fn heatmap_conventions() {
        let (px, _, _) = heatmap_levels(&ScalarField::constant(shape(3, 3), 0.7));
        assert!(px.iter().all(|&p| p == 128));
        let mut v = vec![0.0; 9];
        v[4] = 1.0;
        v[2] = 0.5;
        let (px, lo, hi) = heatmap_levels(&ScalarField::new(shape(3, 3), v).unwrap());
        assert_eq!((px[4], px[0], px[2], lo, hi), (255, 0, 128, 0.0, 1.0));
    }

    #[test]
    fn heatmap_writes_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("phi.pgm");
        write_heatmap(&ScalarField::new(shape(2, 2), vec![-1.0, 0.0, 1.0, 3.0]).unwrap(), &p).unwrap();
        let side = fs::read_to_string(heatmap_sidecar(&p)).unwrap();
        assert_eq!(side, "min -1e0\nmax 3e0\n");
        assert_eq!(fs::read(&p).unwrap(), b"P5\n2 2\n255\n\x00\x40\x80\xff");
    }
}
