//! Binary PPM (P6) and PGM (P5) reading/writing. Codec-free formats keep
//! frames and label maps bit-exact and diffable.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

fn read_header_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    let mut in_comment = false;
    loop {
        let mut byte = [0u8; 1];
        match r.read_exact(&mut byte) {
            Ok(()) => {}
            Err(e) => {
                if tok.is_empty() {
                    return Err(Error::Io(e));
                }
                return Ok(tok);
            }
        }
        let c = byte[0] as char;
        if in_comment {
            if c == '\n' {
                in_comment = false;
            }
            continue;
        }
        if c == '#' {
            in_comment = true;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(c);
    }
}

fn parse_usize(tok: &str, what: &str) -> Result<usize> {
    tok.parse::<usize>()
        .map_err(|_| Error::Data(format!("malformed PNM header: bad {what} {tok:?}")))
}

struct PnmHeader {
    width: usize,
    height: usize,
    maxval: usize,
}

fn read_pnm_header<R: BufRead>(r: &mut R, magic: &str, path: &Path) -> Result<PnmHeader> {
    let m = read_header_token(r)?;
    if m != magic {
        return Err(Error::Data(format!(
            "{}: expected {magic} file, found magic {m:?}",
            path.display()
        )));
    }
    let width = parse_usize(&read_header_token(r)?, "width")?;
    let height = parse_usize(&read_header_token(r)?, "height")?;
    let maxval = parse_usize(&read_header_token(r)?, "maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Data(format!("{}: zero-sized image", path.display())));
    }
    Ok(PnmHeader {
        width,
        height,
        maxval,
    })
}

/// 8-bit RGB image, row-major interleaved.
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>, // 3 * width * height
}

pub fn write_ppm(path: &Path, img: &Rgb8) -> Result<()> {
    debug_assert_eq!(img.pixels.len(), 3 * img.width * img.height);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{} {}\n255\n", img.width, img.height)?;
    f.write_all(&img.pixels)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Rgb8> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let h = read_pnm_header(&mut r, "P6", path)?;
    if h.maxval != 255 {
        return Err(Error::Data(format!(
            "{}: only maxval 255 PPM supported, got {}",
            path.display(),
            h.maxval
        )));
    }
    let mut pixels = vec![0u8; 3 * h.width * h.height];
    r.read_exact(&mut pixels)?;
    Ok(Rgb8 {
        width: h.width,
        height: h.height,
        pixels,
    })
}

/// 8-bit gray image (label maps).
pub struct Gray8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn write_pgm(path: &Path, img: &Gray8) -> Result<()> {
    debug_assert_eq!(img.pixels.len(), img.width * img.height);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{} {}\n255\n", img.width, img.height)?;
    f.write_all(&img.pixels)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Gray8> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let h = read_pnm_header(&mut r, "P5", path)?;
    if h.maxval != 255 {
        return Err(Error::Data(format!(
            "{}: expected 8-bit PGM, got maxval {}",
            path.display(),
            h.maxval
        )));
    }
    let mut pixels = vec![0u8; h.width * h.height];
    r.read_exact(&mut pixels)?;
    Ok(Gray8 {
        width: h.width,
        height: h.height,
        pixels,
    })
}

/// 16-bit gray image (depth maps). Samples are big-endian on disk.
pub struct Gray16 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u16>,
}

pub fn write_pgm16(path: &Path, img: &Gray16) -> Result<()> {
    debug_assert_eq!(img.pixels.len(), img.width * img.height);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{} {}\n65535\n", img.width, img.height)?;
    for &v in &img.pixels {
        f.write_all(&v.to_be_bytes())?;
    }
    Ok(())
}

pub fn read_pgm16(path: &Path) -> Result<Gray16> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let h = read_pnm_header(&mut r, "P5", path)?;
    if h.maxval != 65535 {
        return Err(Error::Data(format!(
            "{}: expected 16-bit PGM, got maxval {}",
            path.display(),
            h.maxval
        )));
    }
    let mut raw = vec![0u8; 2 * h.width * h.height];
    r.read_exact(&mut raw)?;
    let pixels = raw
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok(Gray16 {
        width: h.width,
        height: h.height,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    #[test]
    fn ppm_roundtrip_is_bit_exact() {
        let dir = std::env::temp_dir().join("stseg_pnm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let mut s = Stream::named(1, "ppm");
        let img = Rgb8 {
            width: 7,
            height: 5,
            pixels: (0..105).map(|_| (s.next_u64() & 0xff) as u8).collect(),
        };
        let p = dir.join("rt.ppm");
        write_ppm(&p, &img).unwrap();
        let back = read_ppm(&p).unwrap();
        assert_eq!(back.width, 7);
        assert_eq!(back.height, 5);
        assert_eq!(back.pixels, img.pixels);
    }

    #[test]
    fn pgm16_roundtrip() {
        let dir = std::env::temp_dir().join("stseg_pnm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let img = Gray16 {
            width: 3,
            height: 2,
            pixels: vec![0, 1, 255, 256, 65534, 65535],
        };
        let p = dir.join("rt16.pgm");
        write_pgm16(&p, &img).unwrap();
        let back = read_pgm16(&p).unwrap();
        assert_eq!(back.pixels, img.pixels);
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = std::env::temp_dir().join("stseg_pnm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("comment.pgm");
        std::fs::write(&p, b"P5\n# a comment\n2 1\n# another\n255\n\x07\x09").unwrap();
        let img = read_pgm(&p).unwrap();
        assert_eq!(img.pixels, vec![7, 9]);
    }

    #[test]
    fn wrong_magic_is_a_data_error() {
        let dir = std::env::temp_dir().join("stseg_pnm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("bad.ppm");
        std::fs::write(&p, b"P3\n1 1\n255\n1 2 3\n").unwrap();
        assert!(read_ppm(&p).is_err());
    }
}
