use image::{DynamicImage, ImageFormat};

use super::{DataError, Result};

/// Decoded 8-bit pixels, interleaved row-major (`[y][x][channel]`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    /// 1 (gray) or 3 (RGB). Alpha is dropped at decode time.
    pub channels: usize,
    pub data: Vec<u8>,
}

impl RawImage {
    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height);
        RawImage {
            width,
            height,
            channels: 1,
            data,
        }
    }

    pub fn rgb(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height * 3);
        RawImage {
            width,
            height,
            channels: 3,
            data,
        }
    }
}

fn narrow16(v: u16) -> u8 {
    ((v as u32 + 128) / 257) as u8
}

fn drop_alpha<T: Copy>(src: &[T], stride: usize, keep: usize) -> Vec<T> {
    src.chunks(stride).flat_map(|px| px[..keep].to_vec()).collect()
}

/// Decodes a PNG, baseline JPEG, or binary PGM into 8-bit pixels. 16-bit
/// sources are narrowed by 257 with rounding.
pub fn decode_image(bytes: &[u8]) -> Result<RawImage> {
    if bytes.is_empty() {
        return Err(DataError::Decode("empty input".into()));
    }
    let format = image::guess_format(bytes).map_err(|e| DataError::Decode(e.to_string()))?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Jpeg | ImageFormat::Pnm) {
        return Err(DataError::Decode(format!("unsupported container {format:?}")));
    }
    let img = image::load_from_memory_with_format(bytes, format).map_err(|e| DataError::Decode(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = match img {
        DynamicImage::ImageLuma8(b) => RawImage::gray(w, h, b.into_raw()),
        DynamicImage::ImageLumaA8(b) => RawImage::gray(w, h, drop_alpha(&b.into_raw(), 2, 1)),
        DynamicImage::ImageRgb8(b) => RawImage::rgb(w, h, b.into_raw()),
        DynamicImage::ImageRgba8(b) => RawImage::rgb(w, h, drop_alpha(&b.into_raw(), 4, 3)),
        DynamicImage::ImageLuma16(b) => RawImage::gray(w, h, b.into_raw().into_iter().map(narrow16).collect()),
        DynamicImage::ImageLumaA16(b) => {
            RawImage::gray(w, h, drop_alpha(&b.into_raw(), 2, 1).into_iter().map(narrow16).collect())
        }
        DynamicImage::ImageRgb16(b) => RawImage::rgb(w, h, b.into_raw().into_iter().map(narrow16).collect()),
        DynamicImage::ImageRgba16(b) => {
            RawImage::rgb(w, h, drop_alpha(&b.into_raw(), 4, 3).into_iter().map(narrow16).collect())
        }
        other => RawImage::rgb(w, h, other.to_rgb8().into_raw()),
    };
    Ok(raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, ImageBuffer, Luma};
    use std::io::Cursor;

    fn encode(img: DynamicImage, format: ImageFormat) -> Vec<u8> {
        let mut buf = Cursor::new(Vec::new());
        img.write_to(&mut buf, format).unwrap();
        buf.into_inner()
    }

    #[test]
    fn pgm_bytes() {
        let mut pgm = b"P5\n2 2\n255\n".to_vec();
        pgm.extend_from_slice(&[0, 85, 170, 255]);
        let raw = decode_image(&pgm).unwrap();
        assert_eq!((raw.width, raw.height, raw.channels), (2, 2, 1));
        assert_eq!(raw.data, vec![0, 85, 170, 255]);
    }

    #[test]
    fn sixteen_bit_png_is_narrowed() {
        let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(3, 1, vec![0, 257, 65535]).unwrap();
        let raw = decode_image(&encode(DynamicImage::ImageLuma16(img), ImageFormat::Png)).unwrap();
        assert_eq!(raw.data, vec![0, 1, 255]);
    }

    #[test]
    fn truncated_png_fails() {
        let img = GrayImage::from_pixel(16, 16, Luma([40]));
        let bytes = encode(DynamicImage::ImageLuma8(img), ImageFormat::Png);
        assert!(decode_image(&bytes[..bytes.len() / 2]).is_err());
        assert!(decode_image(&[]).is_err());
        assert!(decode_image(b"GIF89a....").is_err());
    }

    #[test]
    fn jpeg_constant_gray_survives_within_tolerance() {
        let img = GrayImage::from_pixel(32, 24, Luma([128]));
        let raw = decode_image(&encode(DynamicImage::ImageLuma8(img), ImageFormat::Jpeg)).unwrap();
        assert_eq!((raw.width, raw.height), (32, 24));
        assert!(raw.data.iter().all(|&v| v.abs_diff(128) <= 2));
    }

    #[test]
    fn rgba_drops_alpha() {
        let img = image::RgbaImage::from_pixel(2, 1, image::Rgba([10, 20, 30, 99]));
        let raw = decode_image(&encode(DynamicImage::ImageRgba8(img), ImageFormat::Png)).unwrap();
        assert_eq!(raw.channels, 3);
        assert_eq!(raw.data, vec![10, 20, 30, 10, 20, 30]);
    }
}
