//! Binary PPM (P6, 8-bit) images as `[3 x H x W]` tensors in `[0, 1]`,
//! plus reflection padding to the window multiple.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn read_token(r: &mut impl BufRead) -> Result<String> {
    let mut tok = Vec::new();
    loop {
        let mut b = [0u8];
        if r.read(&mut b)? == 0 {
            break;
        }
        match b[0] {
            b'#' if tok.is_empty() => {
                let mut skip = Vec::new();
                r.read_until(b'\n', &mut skip)?;
            }
            c if c.is_ascii_whitespace() => {
                if !tok.is_empty() {
                    break;
                }
            }
            c => tok.push(c),
        }
    }
    if tok.is_empty() {
        return Err(Error::Parse("unexpected end of PPM header".into()));
    }
    String::from_utf8(tok).map_err(|_| Error::Parse("non-ASCII PPM header".into()))
}

fn header_number(r: &mut impl BufRead, what: &str) -> Result<usize> {
    let tok = read_token(r)?;
    tok.parse().map_err(|_| Error::Parse(format!("PPM {what}: {tok:?} is not a number")))
}

pub fn read_ppm_from(reader: impl Read) -> Result<Tensor> {
    let mut r = BufReader::new(reader);
    if read_token(&mut r)? != "P6" {
        return Err(Error::Parse("only binary P6 PPM is supported".into()));
    }
    let width = header_number(&mut r, "width")?;
    let height = header_number(&mut r, "height")?;
    let maxval = header_number(&mut r, "maxval")?;
    if width == 0 || height == 0 || !(1..=255).contains(&maxval) {
        return Err(Error::Parse(format!("unsupported PPM {width}x{height} maxval {maxval}")));
    }
    let mut raw = vec![0u8; 3 * width * height];
    r.read_exact(&mut raw).map_err(|_| Error::Parse("truncated PPM pixel data".into()))?;
    let plane = width * height;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * plane + i] = f64::from(px[ch]) / maxval as f64;
        }
    }
    Tensor::new(vec![3, height, width], data)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    read_ppm_from(std::fs::File::open(path)?)
}

/// Rounds to 8 bits after clamping to `[0, 1]`.
pub fn to_bytes(image: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w) = dims(image)?;
    let plane = h * w;
    let mut raw = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            raw.push((image.data()[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok((h, w, raw))
}

pub fn write_ppm_to(image: &Tensor, mut out: impl Write) -> Result<()> {
    let (h, w, raw) = to_bytes(image)?;
    write!(out, "P6\n{w} {h}\n255\n")?;
    out.write_all(&raw)?;
    out.flush()?;
    Ok(())
}

pub fn write_ppm(image: &Tensor, path: &Path) -> Result<()> {
    write_ppm_to(image, std::io::BufWriter::new(std::fs::File::create(path)?))
}

/// `(height, width)` of a `[3 x H x W]` tensor.
pub fn dims(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        [3, h, w] => Ok((*h, *w)),
        s => Err(Error::Shape { op: "image", detail: format!("expected [3, H, W], got {s:?}") }),
    }
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let k = i % period;
    if k < n {
        k
    } else {
        period - k
    }
}

/// Smallest multiple of `m` that is at least `v`.
pub fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Mirrors the image (without repeating the edge pixel) to `height x
/// width`, which must be at least the current size.
pub fn reflect_pad(image: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (h, w) = dims(image)?;
    if height < h || width < w {
        return Err(Error::InvalidArgument(format!("cannot pad {w}x{h} down to {width}x{height}")));
    }
    let mut data = Vec::with_capacity(3 * height * width);
    for ch in 0..3 {
        for y in 0..height {
            let sy = reflect(y, h);
            for x in 0..width {
                data.push(image.data()[ch * h * w + sy * w + reflect(x, w)]);
            }
        }
    }
    Tensor::new(vec![3, height, width], data)
}

/// Top-left `height x width` region.
pub fn crop(image: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (h, w) = dims(image)?;
    if height > h || width > w {
        return Err(Error::InvalidArgument(format!("cannot crop {w}x{h} to {width}x{height}")));
    }
    let mut data = Vec::with_capacity(3 * height * width);
    for ch in 0..3 {
        for y in 0..height {
            let row = ch * h * w + y * w;
            data.extend_from_slice(&image.data()[row..row + width]);
        }
    }
    Tensor::new(vec![3, height, width], data)
}
