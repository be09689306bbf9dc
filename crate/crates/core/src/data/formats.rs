//! Grayscale PFM for float maps and binary PGM for 8-bit images and masks.

use std::path::Path;

use super::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn parse_err(what: &'static str, offset: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        what,
        offset,
        detail: detail.into(),
    }
}

/// Reads whitespace-separated header tokens, skipping `#` comments.
struct Header<'a> {
    what: &'static str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn token(&mut self) -> Result<(usize, &'a str)> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(_) => break,
                None => return Err(parse_err(self.what, self.pos, "truncated header")),
            }
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            self.pos += 1;
        }
        let tok = std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| parse_err(self.what, start, "header is not ASCII"))?;
        Ok((start, tok))
    }

    fn number<T: std::str::FromStr>(&mut self, name: &str) -> Result<T> {
        let (at, tok) = self.token()?;
        tok.parse()
            .map_err(|_| parse_err(self.what, at, format!("invalid {name} {tok:?}")))
    }

    /// Consumes the single whitespace byte that ends the header.
    fn finish(&mut self) -> Result<usize> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(self.pos + 1),
            _ => Err(parse_err(self.what, self.pos, "missing separator after header")),
        }
    }
}

fn dims(h: &mut Header<'_>) -> Result<(usize, usize)> {
    let w: usize = h.number("width")?;
    let ht: usize = h.number("height")?;
    if w == 0 || ht == 0 {
        return Err(parse_err(h.what, h.pos, format!("empty image {w}x{ht}")));
    }
    Ok((w, ht))
}

/// Encodes a `[H, W]` map as little-endian PFM (scale −1, rows bottom to top).
pub fn encode_pfm(map: &Tensor<f32>) -> Result<Vec<u8>> {
    if map.rank() != 2 {
        return Err(Error::dim("write_pfm", format!("{:?}", map.shape())));
    }
    if !map.all_finite() {
        return Err(Error::NonFinite { op: "write_pfm".into() });
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for y in (0..h).rev() {
        for v in &map.data()[y * w..(y + 1) * w] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Decodes a grayscale PFM of either byte order.
pub fn decode_pfm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut h = Header {
        what: "pfm",
        bytes,
        pos: 0,
    };
    let (at, magic) = h.token()?;
    if magic != "Pf" {
        return Err(parse_err("pfm", at, format!("expected magic \"Pf\", found {magic:?}")));
    }
    let (w, ht) = dims(&mut h)?;
    let (at, tok) = h.token()?;
    let scale = tok.parse::<f64>().ok().filter(|s| *s != 0.0 && s.is_finite());
    let scale = scale.ok_or_else(|| parse_err("pfm", at, format!("invalid scale {tok:?}")))?;
    let start = h.finish()?;
    let need = w * ht * 4;
    if bytes.len() < start + need {
        return Err(parse_err(
            "pfm",
            bytes.len(),
            format!("payload needs {need} bytes after offset {start}"),
        ));
    }
    let little = scale < 0.0;
    let mut data = vec![0.0f32; w * ht];
    for (k, c) in bytes[start..start + need].chunks_exact(4).enumerate() {
        let b = [c[0], c[1], c[2], c[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, x) = (k / w, k % w);
        data[(ht - 1 - row) * w + x] = v;
    }
    Tensor::new(vec![ht, w], data)
}

pub fn write_pfm(map: &Tensor<f32>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_pfm(map)?)
}

pub fn read_pfm(path: &Path) -> Result<Tensor<f32>> {
    decode_pfm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Encodes a `[H, W]` image with values in `[0, 1]` as 8-bit P5.
pub fn encode_pgm(img: &Tensor<f64>) -> Result<Vec<u8>> {
    if img.rank() != 2 {
        return Err(Error::dim("write_pgm", format!("{:?}", img.shape())));
    }
    if !img.all_finite() {
        return Err(Error::NonFinite { op: "write_pgm".into() });
    }
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

/// Decodes a binary PGM with `maxval ≤ 255` into `[0, 1]` values.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor<f64>> {
    let mut h = Header {
        what: "pgm",
        bytes,
        pos: 0,
    };
    let (at, magic) = h.token()?;
    if magic != "P5" {
        return Err(parse_err("pgm", at, format!("expected magic \"P5\", found {magic:?}")));
    }
    let (w, ht) = dims(&mut h)?;
    let (at, tok) = h.token()?;
    let maxval = tok.parse::<usize>().ok().filter(|m| (1..=255).contains(m));
    let maxval = maxval.ok_or_else(|| parse_err("pgm", at, format!("unsupported maxval {tok:?}")))?;
    let start = h.finish()?;
    let need = w * ht;
    if bytes.len() < start + need {
        return Err(parse_err(
            "pgm",
            bytes.len(),
            format!("payload needs {need} bytes after offset {start}"),
        ));
    }
    let data = bytes[start..start + need]
        .iter()
        .map(|&b| b as f64 / maxval as f64)
        .collect();
    Tensor::new(vec![ht, w], data)
}

pub fn write_pgm(img: &Tensor<f64>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_pgm(img)?)
}

pub fn read_pgm(path: &Path) -> Result<Tensor<f64>> {
    decode_pgm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn single_value_pfm() {
        let m = Tensor::new(vec![1, 1], vec![3.5f32]).unwrap();
        let b = encode_pfm(&m).unwrap();
        assert_eq!(&b[..b.len() - 4], b"Pf\n1 1\n-1.0\n");
        assert_eq!(&b[b.len() - 4..], &3.5f32.to_le_bytes());
        assert_eq!(decode_pfm(&b).unwrap(), m);
    }

    #[test]
    fn rows_are_stored_bottom_up() {
        let m = Tensor::new(vec![2, 1], vec![1.0f32, 2.0]).unwrap();
        let b = encode_pfm(&m).unwrap();
        let n = b.len();
        assert_eq!(&b[n - 8..n - 4], &2.0f32.to_le_bytes());
    }

    #[test]
    fn big_endian_fixture() {
        let mut b = b"Pf\n2 2\n1.0\n".to_vec();
        for v in [3.0f32, -4.25, 1.5, 0.125] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        let m = decode_pfm(&b).unwrap();
        assert_eq!(m.shape(), &[2, 2]);
        assert_eq!(m.data(), &[1.5, 0.125, 3.0, -4.25]);
    }

    #[test]
    fn pfm_parse_errors_carry_offsets() {
        match decode_pfm(b"PF\n1 1\n-1.0\n0000") {
            Err(Error::Parse { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        match decode_pfm(b"Pf\n2 x\n-1.0\n") {
            Err(Error::Parse { offset: 5, .. }) => {}
            other => panic!("{other:?}"),
        }
        match decode_pfm(b"Pf\n2 2\n-1.0\n\0\0\0\0") {
            Err(Error::Parse { offset: 16, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pgm_fixture_bytes() {
        let img = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.5, 0.2]).unwrap();
        let b = encode_pgm(&img).unwrap();
        let mut expect = b"P5\n2 2\n255\n".to_vec();
        expect.extend_from_slice(&[0, 255, 128, 51]);
        assert_eq!(b, expect);
        let zero = encode_pgm(&Tensor::zeros(vec![3, 4])).unwrap();
        assert!(zero[zero.len() - 12..].iter().all(|&v| v == 0));
    }

    #[test]
    fn pgm_comments_and_errors() {
        let mut b = b"P5\n# made by hand\n1 2\n255\n".to_vec();
        b.extend_from_slice(&[10, 20]);
        assert_eq!(decode_pgm(&b).unwrap().data(), &[10.0 / 255.0, 20.0 / 255.0]);
        assert!(matches!(decode_pgm(b"P5\n1 1\n65535\n\0\0"), Err(Error::Parse { offset: 7, .. })));
        assert!(matches!(decode_pgm(b"P5\n2 2\n255\n\0"), Err(Error::Parse { .. })));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Tensor::new(vec![2, 3], vec![0.5f32, -1.0, 7.25, 1e-7, 3.0, 0.0]).unwrap();
        let p = dir.path().join("m.pfm");
        write_pfm(&m, &p).unwrap();
        assert_eq!(read_pfm(&p).unwrap(), m);
        assert!(matches!(read_pfm(&dir.path().join("missing.pfm")), Err(Error::Io { .. })));
    }

    proptest! {
        #[test]
        fn pfm_round_trip_is_bit_exact(h in 1usize..8, w in 1usize..8, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f32> = (0..h * w).map(|_| rng.gen_range(-1e6f32..1e6)).collect();
            let m = Tensor::new(vec![h, w], v).unwrap();
            let back = decode_pfm(&encode_pfm(&m).unwrap()).unwrap();
            prop_assert!(back.data().iter().zip(m.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        #[test]
        fn pgm_round_trip_after_quantization(v in proptest::collection::vec(0.0f64..=1.0, 12)) {
            let img = Tensor::new(vec![3, 4], v).unwrap();
            let q = decode_pgm(&encode_pgm(&img).unwrap()).unwrap();
            prop_assert!(q.max_abs_diff(&img) <= 1.0 / 510.0 + 1e-12);
            let q2 = decode_pgm(&encode_pgm(&q).unwrap()).unwrap();
            prop_assert_eq!(q2, q);
        }
    }
}
