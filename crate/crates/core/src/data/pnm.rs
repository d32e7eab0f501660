//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PnmKind {
    /// P6, three interleaved channels.
    Ppm,
    /// P5, one channel.
    Pgm,
}

impl PnmKind {
    pub fn channels(self) -> usize {
        match self {
            PnmKind::Ppm => 3,
            PnmKind::Pgm => 1,
        }
    }

    fn magic(self) -> &'static [u8; 2] {
        match self {
            PnmKind::Ppm => b"P6",
            PnmKind::Pgm => b"P5",
        }
    }
}

/// Decoded raster, samples interleaved row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub kind: PnmKind,
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(parse_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| parse_err(start, format!("{what} out of range")))
    }
}

pub fn parse_pnm(bytes: &[u8]) -> Result<Pnm> {
    let kind = match bytes.get(..2) {
        Some(b"P6") => PnmKind::Ppm,
        Some(b"P5") => PnmKind::Pgm,
        _ => return Err(parse_err(0, "expected magic P6 or P5")),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    h.skip_space();
    let maxval_at = h.pos;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(parse_err(maxval_at, format!("maxval {maxval} unsupported, need 255")));
    }
    if width == 0 || height == 0 {
        return Err(parse_err(2, "zero image dimension"));
    }
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(parse_err(h.pos, "expected one whitespace byte after maxval")),
    }
    let expected = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(kind.channels()))
        .ok_or_else(|| parse_err(2, "image dimensions overflow"))?;
    let actual = bytes.len() - h.pos;
    if actual != expected {
        return Err(parse_err(
            h.pos,
            format!("expected {expected} payload bytes, found {actual}"),
        ));
    }
    Ok(Pnm {
        kind,
        width,
        height,
        data: bytes[h.pos..].to_vec(),
    })
}

pub fn encode_pnm(p: &Pnm) -> Vec<u8> {
    let mut out = Vec::with_capacity(p.data.len() + 20);
    out.extend_from_slice(p.kind.magic());
    out.extend_from_slice(format!("\n{} {}\n255\n", p.width, p.height).as_bytes());
    out.extend_from_slice(&p.data);
    out
}

pub fn read_pnm(path: &Path) -> Result<Pnm> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pnm(&bytes)
}

pub fn write_pnm(path: &Path, p: &Pnm) -> Result<()> {
    fs::write(path, encode_pnm(p)).map_err(|e| Error::io(path, e))
}

/// `round(v * 255)` after clamping to `[0, 1]`.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `[1, 3, H, W]` becomes P6 and `[1, 1, H, W]` becomes P5.
pub fn image_to_pnm(image: &Tensor) -> Result<Pnm> {
    let [n, c, h, w] = image.shape();
    let kind = match (n, c) {
        (1, 3) => PnmKind::Ppm,
        (1, 1) => PnmKind::Pgm,
        _ => return Err(Error::dim(format!("cannot store {:?} as PNM", image.shape()))),
    };
    image.check_finite("image")?;
    let mut data = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                data.push(quantize(image.at(0, ch, y, x)));
            }
        }
    }
    Ok(Pnm {
        kind,
        width: w,
        height: h,
        data,
    })
}

pub fn pnm_to_image(p: &Pnm) -> Tensor {
    let c = p.kind.channels();
    let mut t = Tensor::zeros([1, c, p.height, p.width]);
    for (i, &b) in p.data.iter().enumerate() {
        let (pix, ch) = (i / c, i % c);
        t.set(0, ch, pix / p.width, pix % p.width, f64::from(b) / 255.0);
    }
    t
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    Ok(pnm_to_image(&read_pnm(path)?))
}

pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    write_pnm(path, &image_to_pnm(image)?)
}

/// Masks are P5 files; samples of 128 and above are set.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let p = read_pnm(path)?;
    if p.kind != PnmKind::Pgm {
        return Err(parse_err(0, format!("{}: masks must be P5", path.display())));
    }
    Mask::from_bits(p.height, p.width, p.data.iter().map(|&b| b >= 128).collect())
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    write_pnm(
        path,
        &Pnm {
            kind: PnmKind::Pgm,
            width: mask.width(),
            height: mask.height(),
            data: mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn header_forms() {
        let mut bytes = b"P6 2 2 255\n".to_vec();
        bytes.extend(0..12u8);
        let p = parse_pnm(&bytes).unwrap();
        assert_eq!((p.kind, p.width, p.height), (PnmKind::Ppm, 2, 2));
        let img = pnm_to_image(&p);
        assert_eq!(img.at(0, 2, 1, 1), 11.0 / 255.0);

        let mut commented = b"P5\n# made by hand\n3 # width\n1\n255\n".to_vec();
        commented.extend([0, 128, 255]);
        assert_eq!(parse_pnm(&commented).unwrap().data, [0, 128, 255]);
    }

    #[test]
    fn errors_carry_offsets() {
        let mut bytes = b"P6 2 2 255\n".to_vec();
        bytes.extend(0..10u8);
        match parse_pnm(&bytes) {
            Err(Error::Parse { offset, message }) => {
                assert_eq!(offset, 11);
                assert!(message.contains("expected 12") && message.contains("found 10"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_pnm(b"P3 1 1 255\n"), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(parse_pnm(b"P5 1 1 65535\n\0\0"), Err(Error::Parse { offset: 7, .. })));
        assert!(matches!(parse_pnm(b"P5 1 x"), Err(Error::Parse { offset: 5, .. })));
        assert!(parse_pnm(b"P5 1 1 255").is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = Tensor::uniform([1, 3, 5, 7], 0.0, 1.0, &mut rng);
        let path = dir.path().join("a.ppm");
        write_image(&path, &img).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back, img.map(|v| f64::from(quantize(v)) / 255.0));
        // second pass is exact
        write_image(&path, &back).unwrap();
        assert_eq!(read_image(&path).unwrap(), back);

        let m = Mask::from_bits(4, 6, (0..24).map(|_| rng.gen_bool(0.5)).collect()).unwrap();
        let mp = dir.path().join("m.pgm");
        write_mask(&mp, &m).unwrap();
        assert_eq!(read_mask(&mp).unwrap(), m);
        assert!(read_mask(&path).is_err());
        assert!(matches!(read_image(&dir.path().join("missing.ppm")), Err(Error::Io { .. })));
    }
}
