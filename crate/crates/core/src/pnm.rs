//! Binary PGM (P5) and PPM (P6) rasters, 8 bits per sample.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder};

use crate::error::{Error, Result};

/// Single-channel 8-bit raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// Interleaved RGB 8-bit raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        self.data[y * self.width + x] = value;
    }

    pub fn encode(&self) -> Vec<u8> {
        encode(&self.data, self.width, self.height, PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        match decode(bytes, path)? {
            DynamicImage::ImageLuma8(b) => Ok(Self {
                width: b.width() as usize,
                height: b.height() as usize,
                data: b.into_raw(),
            }),
            other => Err(parse_err(path, format!("expected an 8-bit graymap, found {:?}", other.color()))),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; 3 * width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn encode(&self) -> Vec<u8> {
        encode(&self.data, self.width, self.height, PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        match decode(bytes, path)? {
            DynamicImage::ImageRgb8(b) => Ok(Self {
                width: b.width() as usize,
                height: b.height() as usize,
                data: b.into_raw(),
            }),
            other => Err(parse_err(path, format!("expected an 8-bit pixmap, found {:?}", other.color()))),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    /// Copies `src` into this image with its top-left corner at `(x0, y0)`,
    /// clipping at the borders.
    pub fn blit(&mut self, src: &RgbImage, x0: usize, y0: usize) {
        for y in 0..src.height {
            if y0 + y >= self.height {
                break;
            }
            for x in 0..src.width {
                if x0 + x >= self.width {
                    break;
                }
                self.set(x0 + x, y0 + y, src.get(x, y));
            }
        }
    }
}

fn parse_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: msg.into(),
    }
}

fn encode(data: &[u8], width: usize, height: usize, subtype: PnmSubtype, color: ExtendedColorType) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() + 16);
    PnmEncoder::new(&mut out)
        .with_subtype(subtype)
        .write_image(data, width as u32, height as u32, color)
        .expect("raster size matches its dimensions");
    out
}

fn decode(bytes: &[u8], path: &Path) -> Result<DynamicImage> {
    let dec = PnmDecoder::new(Cursor::new(bytes)).map_err(|e| parse_err(path, e.to_string()))?;
    DynamicImage::from_decoder(dec).map_err(|e| parse_err(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_with_comment() {
        let mut bytes = b"P5\n# made by hand\n3 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 1, 2, 3, 4, 255]);
        let img = GrayImage::decode(&bytes, Path::new("x.pgm")).unwrap();
        assert_eq!((img.width, img.height), (3, 2));
        assert_eq!(img.get(2, 1), 255);
        assert_eq!(GrayImage::decode(&img.encode(), Path::new("y")).unwrap(), img);
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        let ppm = RgbImage::new(2, 2).encode();
        assert!(GrayImage::decode(&ppm, Path::new("a")).is_err());
        let mut pgm = GrayImage::new(4, 4).encode();
        pgm.truncate(pgm.len() - 1);
        assert!(GrayImage::decode(&pgm, Path::new("b")).is_err());
    }

    #[test]
    fn ppm_roundtrip_and_blit() {
        let mut a = RgbImage::new(4, 3);
        a.set(1, 2, [9, 8, 7]);
        let b = RgbImage::decode(&a.encode(), Path::new("c")).unwrap();
        assert_eq!(a, b);
        let mut big = RgbImage::new(6, 6);
        big.blit(&a, 4, 4);
        assert_eq!(big.get(5, 5), [0, 0, 0]);
        let mut big2 = RgbImage::new(6, 6);
        big2.blit(&a, 1, 1);
        assert_eq!(big2.get(2, 3), [9, 8, 7]);
    }
}
