//! PNG and binary PPM/PGM reading and writing.

use std::io::Cursor;
use std::path::Path;

use super::ImageU8;
use crate::error::{Error, Result};
use crate::fsutil;

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Png,
    /// `P6` for RGB, `P5` for grayscale.
    Ppm,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        match ext.as_str() {
            "png" => Ok(Self::Png),
            "ppm" | "pgm" | "pnm" => Ok(Self::Ppm),
            _ => Err(Error::Image(format!(
                "{}: unsupported extension (expected .png or .ppm)",
                path.display()
            ))),
        }
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageU8> {
    let path = path.as_ref();
    let bytes = fsutil::read(path)?;
    decode(&bytes).map_err(|e| match e {
        Error::Image(msg) => Error::Image(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Writes atomically, choosing the format from the extension.
pub fn save_image(img: &ImageU8, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = match ImageFormat::from_path(path)? {
        ImageFormat::Png => encode_png(img)?,
        ImageFormat::Ppm => encode_ppm(img),
    };
    fsutil::write_atomic(path, &bytes)
}

/// Sniffs the format from the leading bytes.
pub fn decode(bytes: &[u8]) -> Result<ImageU8> {
    if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P6") || bytes.starts_with(b"P5") {
        decode_ppm(bytes)
    } else if bytes.len() < 8 && PNG_SIGNATURE.starts_with(bytes) {
        Err(Error::Image(format!("truncated PNG signature at byte offset {}", bytes.len())))
    } else {
        Err(Error::Image(
            "unrecognized format at byte offset 0 (expected PNG signature or P5/P6 magic)".into(),
        ))
    }
}

fn be32(b: &[u8]) -> u32 {
    u32::from_be_bytes([b[0], b[1], b[2], b[3]])
}

/// Walks the chunk list so structural damage is reported with its position.
fn validate_png_chunks(bytes: &[u8]) -> Result<()> {
    let mut off = PNG_SIGNATURE.len();
    let mut first = true;
    loop {
        if off + 8 > bytes.len() {
            return Err(Error::Image(format!("truncated chunk header at byte offset {off}")));
        }
        let len = be32(&bytes[off..]) as usize;
        let kind = &bytes[off + 4..off + 8];
        let name = String::from_utf8_lossy(kind).into_owned();
        let end = off + 12 + len;
        if end > bytes.len() {
            return Err(Error::Image(format!(
                "chunk `{name}` at byte offset {off} declares {len} bytes but the file ends at {}",
                bytes.len()
            )));
        }
        if first && (kind != b"IHDR" || len != 13) {
            return Err(Error::Image(format!(
                "corrupt header at byte offset {off}: expected a 13-byte IHDR chunk, found `{name}` of {len} bytes"
            )));
        }
        let stored = be32(&bytes[end - 4..]);
        if crc32fast::hash(&bytes[off + 4..end - 4]) != stored {
            return Err(Error::Image(format!("chunk `{name}` at byte offset {off}: CRC mismatch")));
        }
        if kind == b"IEND" {
            return Ok(());
        }
        first = false;
        off = end;
    }
}

fn decode_png(bytes: &[u8]) -> Result<ImageU8> {
    validate_png_chunks(bytes)?;
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let err = |e: png::DecodingError| Error::Image(format!("PNG decode failed: {e}"));
    let mut reader = decoder.read_info().map_err(err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Image("PNG dimensions overflow the address space".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(err)?;
    buf.truncate(info.buffer_size());
    let (w, h) = (info.width as usize, info.height as usize);
    use png::ColorType::*;
    let (src_channels, keep) = match info.color_type {
        Grayscale => (1, 1),
        GrayscaleAlpha => (2, 1),
        Rgb => (3, 3),
        Rgba => (4, 3),
        Indexed => return Err(Error::Image("palette PNG was not expanded".into())),
    };
    let data = if src_channels == keep {
        buf
    } else {
        buf.chunks_exact(src_channels).flat_map(|px| px[..keep].iter().copied()).collect()
    };
    ImageU8::new(w, h, keep, data)
}

pub fn encode_png(img: &ImageU8) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(if img.channels() == 3 {
            png::ColorType::Rgb
        } else {
            png::ColorType::Grayscale
        });
        enc.set_depth(png::BitDepth::Eight);
        let err = |e: png::EncodingError| Error::Image(format!("PNG encode failed: {e}"));
        let mut writer = enc.write_header().map_err(err)?;
        writer.write_image_data(img.data()).map_err(err)?;
        writer.finish().map_err(err)?;
    }
    Ok(out)
}

pub fn encode_ppm(img: &ImageU8) -> Vec<u8> {
    let magic = if img.channels() == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Image(format!("corrupt header at byte offset {start}: expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::Image(format!("corrupt header at byte offset {start}: {what} out of range")))
    }
}

fn decode_ppm(bytes: &[u8]) -> Result<ImageU8> {
    let channels = if bytes[1] == b'6' { 3 } else { 1 };
    let mut hdr = Header { bytes, pos: 2 };
    let width = hdr.number("width")?;
    let height = hdr.number("height")?;
    hdr.skip_space();
    let maxval_at = hdr.pos;
    let maxval = hdr.number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Image(format!(
            "corrupt header at byte offset {maxval_at}: maxval {maxval} unsupported (1..=255)"
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::Image(format!("corrupt header at byte offset 2: empty image {width}x{height}")));
    }
    if hdr.pos >= bytes.len() || !bytes[hdr.pos].is_ascii_whitespace() {
        return Err(Error::Image(format!(
            "corrupt header at byte offset {}: expected whitespace before pixel data",
            hdr.pos
        )));
    }
    let start = hdr.pos + 1;
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::Image("corrupt header at byte offset 2: dimensions overflow".into()))?;
    let have = bytes.len() - start;
    if have < need {
        return Err(Error::Image(format!(
            "truncated pixel data at byte offset {}: expected {need} bytes, found {have}",
            start + have
        )));
    }
    let raw = &bytes[start..start + need];
    let data = if maxval == 255 {
        raw.to_vec()
    } else {
        raw.iter()
            .map(|&v| ((v.min(maxval as u8) as u32 * 255 + maxval as u32 / 2) / maxval as u32) as u8)
            .collect()
    };
    ImageU8::new(width, height, channels, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(channels: usize) -> ImageU8 {
        let data = (0..9 * channels).map(|i| (i * 29 % 256) as u8).collect();
        ImageU8::new(3, 3, channels, data).unwrap()
    }

    #[test]
    fn png_round_trip_rgb_and_gray() {
        for c in [1, 3] {
            let img = sample(c);
            let back = decode(&encode_png(&img).unwrap()).unwrap();
            assert_eq!(back, img);
        }
    }

    #[test]
    fn ppm_round_trip_with_comments() {
        let img = sample(3);
        assert_eq!(decode(&encode_ppm(&img)).unwrap(), img);
        let mut text = b"P6 # comment\n3 3\n# another\n255\n".to_vec();
        text.extend_from_slice(img.data());
        assert_eq!(decode(&text).unwrap(), img);
    }

    #[test]
    fn png_header_corruption_names_offset() {
        let mut bytes = encode_png(&sample(3)).unwrap();
        bytes[12] = b'X';
        let err = decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("byte offset 8"), "{err}");
        let mut bytes = encode_png(&sample(3)).unwrap();
        bytes[17] ^= 0xff;
        let err = decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("byte offset 8") && err.contains("CRC"), "{err}");
    }

    #[test]
    fn truncated_files_rejected() {
        let bytes = encode_png(&sample(3)).unwrap();
        let err = decode(&bytes[..bytes.len() - 5]).unwrap_err().to_string();
        assert!(err.contains("byte offset"), "{err}");
        let ppm = encode_ppm(&sample(3));
        let err = decode(&ppm[..ppm.len() - 4]).unwrap_err().to_string();
        assert!(err.contains("truncated pixel data"), "{err}");
        assert!(decode(b"GIF89a").unwrap_err().to_string().contains("offset 0"));
    }

    #[test]
    fn ppm_bad_maxval_names_offset() {
        let err = decode(b"P6\n1 1\n65535\n\0\0\0\0\0\0").unwrap_err().to_string();
        assert!(err.contains("byte offset 7"), "{err}");
    }

    #[test]
    fn rgba_drops_alpha() {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 1, 1);
            enc.set_color(png::ColorType::Rgba);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[10, 20, 30, 40]).unwrap();
        }
        let img = decode(&out).unwrap();
        assert_eq!(img.data(), &[10, 20, 30]);
    }
}
