//! Binary PPM (P6) and PGM (P5) with `maxval <= 255`.

use std::path::Path;

use ndarray::{Array2, Array3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PnmError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed PNM header: {0}")]
    Header(String),
    #[error("unsupported PNM variant: {0}")]
    Unsupported(String),
    #[error("PNM payload holds {found} bytes, expected {expected}")]
    Truncated { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    /// 1 for PGM, 3 for PPM.
    pub channels: usize,
    /// Row-major, interleaved samples.
    pub data: Vec<u8>,
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Result<String, PnmError> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(PnmError::Header("unexpected end of header".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

pub fn decode_pnm(bytes: &[u8]) -> Result<PnmImage, PnmError> {
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(PnmError::Unsupported(format!("magic `{other}`"))),
    };
    let mut number = |name: &str| -> Result<usize, PnmError> {
        let t = header_token(bytes, &mut pos)?;
        t.parse()
            .map_err(|_| PnmError::Header(format!("bad {name} `{t}`")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(PnmError::Unsupported(format!("maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let expected = width * height * channels;
    let payload = bytes.get(pos..).unwrap_or(&[]);
    if payload.len() < expected {
        return Err(PnmError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    Ok(PnmImage {
        width,
        height,
        channels,
        data: payload[..expected].to_vec(),
    })
}

pub fn encode_pnm(img: &PnmImage) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn read_pnm(path: &Path) -> Result<PnmImage, PnmError> {
    decode_pnm(&std::fs::read(path)?)
}

pub fn write_pnm(path: &Path, img: &PnmImage) -> Result<(), PnmError> {
    std::fs::write(path, encode_pnm(img))?;
    Ok(())
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `[3, h, w]` image in `[0, 1]` to an 8-bit PPM raster.
pub fn rgb_to_pnm(image: &Array3<f32>) -> PnmImage {
    let (c, h, w) = image.dim();
    assert_eq!(c, 3, "PPM images have three channels");
    let mut data = Vec::with_capacity(h * w * 3);
    for i in 0..h {
        for j in 0..w {
            for ch in 0..3 {
                data.push(quantize(image[[ch, i, j]]));
            }
        }
    }
    PnmImage {
        width: w,
        height: h,
        channels: 3,
        data,
    }
}

/// 8-bit raster to a `[3, h, w]` image with values `k / 255`.
pub fn pnm_to_rgb(img: &PnmImage) -> Result<Array3<f32>, PnmError> {
    if img.channels != 3 {
        return Err(PnmError::Unsupported("expected a PPM (P6) image".into()));
    }
    Ok(Array3::from_shape_fn(
        (3, img.height, img.width),
        |(c, i, j)| img.data[(i * img.width + j) * 3 + c] as f32 / 255.0,
    ))
}

pub fn gray_to_pnm(map: &Array2<u8>) -> PnmImage {
    let (h, w) = map.dim();
    PnmImage {
        width: w,
        height: h,
        channels: 1,
        data: map.iter().copied().collect(),
    }
}

pub fn pnm_to_gray(img: &PnmImage) -> Result<Array2<u8>, PnmError> {
    if img.channels != 1 {
        return Err(PnmError::Unsupported("expected a PGM (P5) image".into()));
    }
    Ok(Array2::from_shape_vec((img.height, img.width), img.data.clone()).unwrap())
}
