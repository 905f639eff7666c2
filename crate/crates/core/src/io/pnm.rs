//! Greyscale PFM (`Pf`, 32-bit float) and binary PGM (`P5`, 8-bit).
//!
//! PFM rows are stored bottom-to-top; a negative scale marks little-endian
//! data. Writers always emit little-endian with scale `-1`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid;

pub fn encode_pfm(img: &Grid<f32>) -> Vec<u8> {
    let (w, h) = img.dims();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&img.get(x, y).to_le_bytes());
        }
    }
    out
}

pub fn write_pfm(path: &Path, img: &Grid<f32>) -> Result<()> {
    fs::write(path, encode_pfm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<Grid<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes, path)
}

/// Splits off `count` whitespace-separated header tokens. Returns the tokens
/// and the offset just past the single whitespace byte ending the last one.
fn header_tokens<'a>(bytes: &'a [u8], count: usize, origin: &Path) -> Result<(Vec<&'a str>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::parse(origin, 1, "truncated image header"));
        }
        let tok = std::str::from_utf8(&bytes[start..i]).map_err(|_| Error::parse(origin, 1, "non-ASCII header"))?;
        tokens.push(tok);
    }
    if i >= bytes.len() {
        return Err(Error::parse(origin, 1, "image header without pixel data"));
    }
    Ok((tokens, i + 1))
}

fn dims(tokens: &[&str], origin: &Path) -> Result<(usize, usize)> {
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::parse(origin, 1, format!("bad image size `{s}`")))
    };
    Ok((parse(tokens[1])?, parse(tokens[2])?))
}

pub fn decode_pfm(bytes: &[u8], origin: &Path) -> Result<Grid<f32>> {
    let (tokens, offset) = header_tokens(bytes, 4, origin)?;
    if tokens[0] != "Pf" {
        return Err(Error::parse(
            origin,
            1,
            format!("expected greyscale PFM `Pf`, found `{}`", tokens[0]),
        ));
    }
    let (w, h) = dims(&tokens, origin)?;
    let scale: f32 = tokens[3]
        .parse()
        .map_err(|_| Error::parse(origin, 1, format!("bad PFM scale `{}`", tokens[3])))?;
    let little = scale < 0.0;
    let data = &bytes[offset..];
    if data.len() != w * h * 4 {
        return Err(Error::parse(
            origin,
            1,
            format!("expected {} bytes of PFM data, found {}", w * h * 4, data.len()),
        ));
    }
    let mut values = vec![0f32; w * h];
    for (k, chunk) in data.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (row_from_bottom, x) = (k / w, k % w);
        values[(h - 1 - row_from_bottom) * w + x] = v;
    }
    Grid::from_vec(w, h, values)
}

pub fn encode_pgm(img: &Grid<u8>) -> Vec<u8> {
    let (w, h) = img.dims();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(img.as_slice());
    out
}

pub fn write_pgm(path: &Path, img: &Grid<u8>) -> Result<()> {
    fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Grid<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path)
}

pub fn decode_pgm(bytes: &[u8], origin: &Path) -> Result<Grid<u8>> {
    let (tokens, offset) = header_tokens(bytes, 4, origin)?;
    if tokens[0] != "P5" {
        return Err(Error::parse(
            origin,
            1,
            format!("expected binary PGM `P5`, found `{}`", tokens[0]),
        ));
    }
    let (w, h) = dims(&tokens, origin)?;
    if tokens[3] != "255" {
        return Err(Error::parse(
            origin,
            1,
            format!("only 8-bit PGM is supported, maxval `{}`", tokens[3]),
        ));
    }
    let data = &bytes[offset..];
    if data.len() != w * h {
        return Err(Error::parse(
            origin,
            1,
            format!("expected {} bytes of PGM data, found {}", w * h, data.len()),
        ));
    }
    Grid::from_vec(w, h, data.to_vec())
}
