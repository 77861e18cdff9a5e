//! Binary PGM (P5) and PPM (P6) images with 8-bit samples.

use std::io::{Read, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PnmError {
    #[error("malformed image: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    /// Row-major interleaved samples.
    pub data: Vec<u8>,
}

impl Image {
    /// Three-channel samples; gray images are replicated.
    pub fn to_rgb(&self) -> Vec<u8> {
        match self.channels {
            3 => self.data.clone(),
            _ => self.data.iter().flat_map(|&v| [v, v, v]).collect(),
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
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

    fn number(&mut self, what: &str) -> Result<usize, PnmError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| PnmError::Format(format!("expected {what}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Image, PnmError> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(PnmError::Format("expected P5 or P6 magic".into())),
    };
    let mut c = Cursor { bytes, pos: 2 };
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval = c.number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(PnmError::Format(format!(
            "maxval {maxval} is not in 1..=255"
        )));
    }
    if !bytes.get(c.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(PnmError::Format("missing whitespace after header".into()));
    }
    let start = c.pos + 1;
    let len = width * height * channels;
    let raw = bytes
        .get(start..start + len)
        .ok_or_else(|| PnmError::Format(format!("expected {len} sample bytes")))?;
    let data = if maxval == 255 {
        raw.to_vec()
    } else {
        raw.iter()
            .map(|&v| ((v.min(maxval as u8) as usize * 255 + maxval / 2) / maxval) as u8)
            .collect()
    };
    Ok(Image {
        width,
        height,
        channels,
        data,
    })
}

pub fn read(mut r: impl Read) -> Result<Image, PnmError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// Write gray samples as P5 with maxval 255.
pub fn write_pgm(
    mut w: impl Write,
    width: usize,
    height: usize,
    data: &[u8],
) -> Result<(), PnmError> {
    if data.len() != width * height {
        return Err(PnmError::Format(format!(
            "{width}x{height} image needs {} samples, got {}",
            width * height,
            data.len()
        )));
    }
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(data)?;
    Ok(())
}
