//! Portable float maps: `Pf` (one channel) or `PF` (three channels), rows
//! stored bottom to top, negative scale meaning little-endian.

use std::io::Write;
use std::path::Path;

use super::read_artifact;
use crate::error::{Error, Result};
use crate::image::{FlowField, Image, Mask};

/// Writes a 1- or 3-channel image as little-endian f32.
pub fn write_pfm(path: &Path, img: &Image) -> Result<()> {
    let magic = match img.channels {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::InvalidInput(format!("PFM holds 1 or 3 channels, got {c}"))),
    };
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(w, "{magic}\n{} {}\n-1.0\n", img.width, img.height)?;
    for y in (0..img.height).rev() {
        for v in img.data[y * img.width * img.channels..(y + 1) * img.width * img.channels].iter() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize, path: &Path) -> Result<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format(path, "truncated header"));
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| Error::format(path, "header is not ASCII"))
}

pub fn read_pfm(path: &Path) -> Result<Image> {
    let bytes = read_artifact(path)?;
    let mut pos = 0;
    let channels = match header_token(&bytes, &mut pos, path)? {
        "Pf" => 1,
        "PF" => 3,
        m => return Err(Error::format(path, format!("bad magic '{m}'"))),
    };
    let dim = |s: &str| s.parse::<usize>().map_err(|_| Error::format(path, format!("bad dimension '{s}'")));
    let width = dim(header_token(&bytes, &mut pos, path)?)?;
    let height = dim(header_token(&bytes, &mut pos, path)?)?;
    let scale_tok = header_token(&bytes, &mut pos, path)?;
    let scale: f64 = scale_tok.parse().map_err(|_| Error::format(path, format!("bad scale '{scale_tok}'")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::format(path, "scale must be non-zero"));
    }
    // exactly one whitespace byte separates the header from the payload
    pos += 1;
    let little = scale < 0.0;
    let n = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(channels))
        .ok_or_else(|| Error::format(path, "image dimensions overflow"))?;
    let payload = bytes.get(pos..).unwrap_or(&[]);
    if payload.len() != 4 * n {
        return Err(Error::format(path, format!("payload has {} bytes, expected {}", payload.len(), 4 * n)));
    }
    let mut img = Image::new(width, height, channels);
    let row = width * channels;
    for (k, chunk) in payload.chunks_exact(4).enumerate() {
        let b: [u8; 4] = chunk.try_into().expect("chunk of 4");
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (file_row, col) = (k / row, k % row);
        img.data[(height - 1 - file_row) * row + col] = v as f64;
    }
    Ok(img)
}

/// Flow goes to disk as three channels `(u, v, 0)`; invalid pixels are NaN.
pub fn write_flow(path: &Path, flow: &FlowField) -> Result<()> {
    let (w, h) = (flow.width(), flow.height());
    let img = Image::from_fn(w, h, 3, |x, y, c| match c {
        _ if !flow.valid.get(x, y) => f64::NAN,
        2 => 0.0,
        _ => flow.flow.get(x, y, c),
    });
    write_pfm(path, &img)
}

pub fn read_flow(path: &Path) -> Result<FlowField> {
    let img = read_pfm(path)?;
    if img.channels != 3 {
        return Err(Error::format(path, "flow must be a 3-channel PFM"));
    }
    let mut out = FlowField::zeros(img.width, img.height);
    let mut valid = Mask::new(img.width, img.height, false);
    for p in 0..img.pixels() {
        let (u, v) = (img.data[3 * p], img.data[3 * p + 1]);
        if u.is_finite() && v.is_finite() {
            out.flow.data[2 * p] = u;
            out.flow.data[2 * p + 1] = v;
            valid.data[p] = true;
        }
    }
    out.valid = valid;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(w: usize, h: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, c, |_, _, _| rng.gen_range(-1e3f32..1e3) as f64)
    }

    #[test]
    fn roundtrip_exact() {
        let dir = tempfile::tempdir().unwrap();
        for (c, seed) in [(1, 1), (3, 2)] {
            let img = random(7, 5, c, seed);
            let p = dir.path().join("x.pfm");
            write_pfm(&p, &img).unwrap();
            assert_eq!(read_pfm(&p).unwrap(), img);
        }
    }

    #[test]
    fn big_endian_file_is_swapped() {
        // written independently of write_pfm: rows bottom to top, big-endian
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("be.pfm");
        let rows = [[1.5f32, -2.25, 3.0], [4.0, 0.125, -6.5]];
        let mut bytes = b"Pf\n3 2\n1.0\n".to_vec();
        for r in rows.iter().rev() {
            for v in r {
                bytes.extend_from_slice(&v.to_be_bytes());
            }
        }
        std::fs::write(&p, bytes).unwrap();
        let img = read_pfm(&p).unwrap();
        assert_eq!(img.get(0, 0, 0), 1.5);
        assert_eq!(img.get(1, 0, 0), -2.25);
        assert_eq!(img.get(2, 1, 0), -6.5);
    }

    #[test]
    fn truncated_and_bad_magic_fail() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.pfm");
        write_pfm(&p, &random(4, 4, 3, 3)).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 1);
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_pfm(&p), Err(Error::Format { .. })));
        std::fs::write(&p, b"P6\n1 1\n-1.0\n\0\0\0\0").unwrap();
        assert!(matches!(read_pfm(&p), Err(Error::Format { .. })));
        std::fs::write(&p, b"Pf\n2").unwrap();
        assert!(matches!(read_pfm(&p), Err(Error::Format { .. })));
        assert!(matches!(read_pfm(&dir.path().join("none.pfm")), Err(Error::MissingArtifact(_))));
    }

    #[test]
    fn flow_roundtrip_keeps_validity() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = FlowField::zeros(6, 3);
        for p in 0..18 {
            f.flow.data[2 * p] = p as f64 * 0.5;
            f.flow.data[2 * p + 1] = -(p as f64);
            f.valid.data[p] = p % 4 != 0;
        }
        for p in 0..18 {
            if !f.valid.data[p] {
                f.flow.data[2 * p] = 0.0;
                f.flow.data[2 * p + 1] = 0.0;
            }
        }
        let p = dir.path().join("f.pfm");
        write_flow(&p, &f).unwrap();
        assert_eq!(read_flow(&p).unwrap(), f);
    }
}
