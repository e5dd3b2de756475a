//! Binary PPM (P6) images, 8 bits per sample.
//!
//! Images are `[3, H, W]` tensors with values in `[0, 1]`. Writing rounds
//! each value to the nearest of 256 levels; reading divides by the file's
//! maximum value.

use std::path::Path;

use bnta_core::{Float, Tensor};

use crate::error::{self, Error, Result};

fn level(v: Float) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Round every value to the 8-bit grid a PPM file can hold.
pub fn quantize(image: &Tensor) -> Tensor {
    let data = image.data().iter().map(|&v| Float::from(level(v)) / 255.0).collect();
    Tensor::new(image.shape(), data).expect("same shape")
}

pub fn encode(image: &Tensor) -> Result<Vec<u8>> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::Config(format!("PPM needs a [3, H, W] image, got {:?}", image.shape())));
    };
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * plane);
    let d = image.data();
    for i in 0..plane {
        out.extend((0..3).map(|c| level(d[c * plane + i])));
    }
    Ok(out)
}

/// Header tokenizer: whitespace separated fields, `#` comments to end of line.
struct Header<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.at) {
            if b == b'#' {
                while self.bytes.get(self.at).is_some_and(|&b| b != b'\n') {
                    self.at += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.at += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Option<&str> {
        self.skip_space();
        let start = self.at;
        while self.bytes.get(self.at).is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#') {
            self.at += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.at]).ok().filter(|t| !t.is_empty())
    }

    fn number(&mut self, what: &str) -> std::result::Result<usize, String> {
        let t = self.token().ok_or_else(|| format!("missing {what}"))?;
        t.parse().map_err(|_| format!("bad {what} `{t}`"))
    }
}

/// Decode a P6 image; `origin` names the source in error messages.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let fail = |msg: String| Error::format(origin, format!("malformed PPM header: {msg}"));
    let mut hdr = Header { bytes, at: 0 };
    if hdr.token() != Some("P6") {
        return Err(fail("expected magic P6".into()));
    }
    let w = hdr.number("width").map_err(fail)?;
    let h = hdr.number("height").map_err(fail)?;
    let max = hdr.number("maximum value").map_err(fail)?;
    if w == 0 || h == 0 || !(1..=255).contains(&max) {
        return Err(fail(format!("unsupported size {w}x{h} or maximum value {max}")));
    }
    // Exactly one whitespace byte separates the header from the samples.
    if !bytes.get(hdr.at).is_some_and(u8::is_ascii_whitespace) {
        return Err(fail("no separator before pixel data".into()));
    }
    let pixels = &bytes[hdr.at + 1..];
    let plane = w * h;
    if pixels.len() != 3 * plane {
        return Err(Error::format(
            origin,
            format!("expected {} bytes of pixel data, found {}", 3 * plane, pixels.len()),
        ));
    }
    let scale = Float::from(max as u8);
    let mut data = vec![0.0; 3 * plane];
    for (i, rgb) in pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = (Float::from(rgb[c]) / scale).min(1.0);
        }
    }
    Ok(Tensor::new(&[3, h, w], data)?)
}

pub fn save(image: &Tensor, path: &Path) -> Result<()> {
    error::write(path, &encode(image)?)
}

pub fn load(path: &Path) -> Result<Tensor> {
    decode(&error::read(path)?, path)
}
