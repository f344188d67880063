use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit RGB image, row-major, three bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::InvalidArgument(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, pixels }
    }

    /// Build from `[0, 1]` floats in `[3, H, W]` planar order, rounding and
    /// clamping to bytes.
    pub fn from_planar(width: usize, height: usize, planes: &[f32]) -> Result<Self> {
        let p = width * height;
        if planes.len() != 3 * p {
            return Err(Error::InvalidArgument(format!(
                "planar buffer for {width}x{height} needs {} values, got {}",
                3 * p,
                planes.len()
            )));
        }
        let mut pixels = vec![0u8; 3 * p];
        for i in 0..p {
            for c in 0..3 {
                pixels[3 * i + c] = to_byte(planes[c * p + i]);
            }
        }
        Ok(Self { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// `[3, H, W]` planes normalized to `[0, 1]`.
    pub fn to_planar(&self) -> Vec<f32> {
        let p = self.width * self.height;
        let mut out = vec![0.0; 3 * p];
        for i in 0..p {
            for c in 0..3 {
                out[c * p + i] = self.pixels[3 * i + c] as f32 / 255.0;
            }
        }
        out
    }

    /// Append the `size x size` crop at `(y, x)` to `out` in `[3, size, size]`
    /// order, normalized to `[0, 1]`.
    pub fn crop_into(&self, y: usize, x: usize, size: usize, out: &mut Vec<f32>) {
        debug_assert!(y + size <= self.height && x + size <= self.width);
        for c in 0..3 {
            for r in y..y + size {
                let row = &self.pixels[3 * (r * self.width + x)..3 * (r * self.width + x + size)];
                out.extend(row.iter().skip(c).step_by(3).map(|&b| b as f32 / 255.0));
            }
        }
    }

    /// Mean squared error over all channels, in `[0, 1]` units.
    pub fn mse(&self, other: &ImageBuffer) -> Result<f64> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::InvalidArgument(format!(
                "image sizes differ: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        let s: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(&a, &b)| {
                let d = (a as f64 - b as f64) / 255.0;
                d * d
            })
            .sum();
        Ok(s / self.pixels.len().max(1) as f64)
    }
}

pub(crate) fn to_byte(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Load a binary PPM (P6, maxval 255) or an 8-bit RGB PNG.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P6") {
        decode_ppm(path, &bytes)
    } else if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        decode_png(path, &bytes)
    } else {
        Err(Error::UnsupportedImage {
            path: path.to_path_buf(),
            reason: "expected a binary PPM (P6) or PNG file".into(),
        })
    }
}

/// Write by extension: `.png` as 8-bit RGB PNG, anything else as P6 PPM.
/// The file is written to a sibling temporary and renamed into place.
pub fn save_image(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let mut bytes = Vec::with_capacity(img.pixels.len() + 32);
    if is_png {
        encode_png(img, &mut bytes).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    } else {
        write!(bytes, "P6\n{} {}\n255\n", img.width, img.height).expect("vec write");
        bytes.extend_from_slice(&img.pixels);
    }
    write_atomic(path, &bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let write = || -> std::io::Result<()> {
        let mut f = BufWriter::new(fs::File::create(&tmp)?);
        f.write_all(bytes)?;
        f.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn decode_ppm(path: &Path, bytes: &[u8]) -> Result<ImageBuffer> {
    let malformed = |reason: &str| Error::MalformedImage {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    // Header: magic, width, height, maxval, separated by whitespace and
    // optional `#` comments, then exactly one whitespace byte.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(malformed("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed("bad header field"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(malformed("missing separator after header"));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::UnsupportedImage {
            path: path.to_path_buf(),
            reason: format!("PPM maxval {maxval} (only 255 is supported)"),
        });
    }
    let need = w * h * 3;
    let body = &bytes[pos..];
    if body.len() < need {
        return Err(malformed(&format!(
            "truncated pixel data: {} of {need} bytes",
            body.len()
        )));
    }
    ImageBuffer::new(w, h, body[..need].to_vec())
}

fn decode_png(path: &Path, bytes: &[u8]) -> Result<ImageBuffer> {
    let malformed = |e: png::DecodingError| Error::MalformedImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(malformed)?;
    let info = reader.info();
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedImage {
            path: path.to_path_buf(),
            reason: format!(
                "PNG is {:?} at {:?} bits; only 8-bit RGB is supported",
                info.color_type, info.bit_depth
            ),
        });
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(w * h * 3)];
    let frame = reader.next_frame(&mut buf).map_err(malformed)?;
    buf.truncate(frame.buffer_size());
    ImageBuffer::new(w, h, buf)
}

fn encode_png(img: &ImageBuffer, out: &mut Vec<u8>) -> std::result::Result<(), png::EncodingError> {
    let mut enc = png::Encoder::new(out, img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(&img.pixels)?;
    writer.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_with_comment() {
        let mut bytes = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([1, 2, 3, 4, 5, 6]);
        let img = decode_ppm(Path::new("x.ppm"), &bytes).unwrap();
        assert_eq!((img.width(), img.height()), (2, 1));
        assert_eq!(img.pixel(0, 1), [4, 5, 6]);
    }

    #[test]
    fn truncated_ppm_is_malformed() {
        let bytes = b"P6\n4 4\n255\n\x00\x00".to_vec();
        assert!(matches!(
            decode_ppm(Path::new("x.ppm"), &bytes),
            Err(Error::MalformedImage { .. })
        ));
    }

    #[test]
    fn crop_is_planar() {
        let mut img = ImageBuffer::filled(3, 3, [0, 0, 0]);
        img.set_pixel(1, 1, [255, 0, 51]);
        let mut out = Vec::new();
        img.crop_into(1, 1, 2, &mut out);
        assert_eq!(out.len(), 12);
        assert_eq!(out[0], 1.0);
        assert_eq!(out[4], 0.0);
        assert!((out[8] - 0.2).abs() < 1e-6);
    }
}
