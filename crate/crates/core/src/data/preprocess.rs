use serde::{Deserialize, Serialize};

use super::{DataError, RawImage, Result, IMAGE_SIDE, PLANE};
use crate::tensor::Tensor;

/// Smallest accepted source side, before cropping.
pub const MIN_SOURCE_SIDE: usize = 8;

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Fingerprint of the pixel pipeline a model was trained with. A model is
/// only served with a pipeline whose fingerprint compares equal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub crop: String,
    pub resize: String,
    pub grayscale: String,
    pub scale: String,
}

impl Preprocessing {
    pub fn new(channels: usize) -> Self {
        Preprocessing {
            channels,
            height: IMAGE_SIDE,
            width: IMAGE_SIDE,
            crop: "center_square".into(),
            resize: "bilinear_half_pixel".into(),
            grayscale: "rec601_luma".into(),
            scale: "1/255".into(),
        }
    }

    pub fn describe(&self) -> String {
        format!(
            "channels={} size={}x{} crop={} resize={} gray={} scale={}",
            self.channels, self.width, self.height, self.crop, self.resize, self.grayscale, self.scale
        )
    }
}

/// Largest centered square; odd leftovers drop the extra row/column at the
/// bottom/right.
pub fn center_crop(img: &RawImage) -> RawImage {
    let side = img.width.min(img.height);
    let x0 = (img.width - side) / 2;
    let y0 = (img.height - side) / 2;
    let c = img.channels;
    let mut data = Vec::with_capacity(side * side * c);
    for y in y0..y0 + side {
        let row = (y * img.width + x0) * c;
        data.extend_from_slice(&img.data[row..row + side * c]);
    }
    RawImage {
        width: side,
        height: side,
        channels: c,
        data,
    }
}

fn sample_axis(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f32) {
    let scale = src_len as f32 / dst_len as f32;
    let pos = ((dst as f32 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f32);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, pos - lo as f32)
}

/// Bilinear resize of one plane using half-pixel centers and edge clamping.
/// Same-size input is returned unchanged.
pub fn resize_bilinear(src: &[f32], width: usize, height: usize, out_w: usize, out_h: usize) -> Vec<f32> {
    assert_eq!(src.len(), width * height);
    if width == out_w && height == out_h {
        return src.to_vec();
    }
    let xs: Vec<_> = (0..out_w).map(|x| sample_axis(x, width, out_w)).collect();
    let mut out = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let (y0, y1, fy) = sample_axis(y, height, out_h);
        let (r0, r1) = (&src[y0 * width..][..width], &src[y1 * width..][..width]);
        for &(x0, x1, fx) in &xs {
            let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
            let bottom = r1[x0] + (r1[x1] - r1[x0]) * fx;
            out.push(top + (bottom - top) * fy);
        }
    }
    out
}

fn quantize(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Runs crop, resize and channel conversion; returns planar `[C, 90, 90]`
/// bytes.
pub fn preprocess_u8(img: &RawImage, channels: usize) -> Result<Vec<u8>> {
    if channels != 1 && channels != 3 {
        return Err(DataError::Channels(channels));
    }
    if img.channels != 1 && img.channels != 3 {
        return Err(DataError::Channels(img.channels));
    }
    if img.width < MIN_SOURCE_SIDE || img.height < MIN_SOURCE_SIDE {
        return Err(DataError::TooSmall {
            width: img.width,
            height: img.height,
            min: MIN_SOURCE_SIDE,
        });
    }
    let sq = center_crop(img);
    let planes: Vec<Vec<f32>> = (0..sq.channels)
        .map(|ch| {
            let plane: Vec<f32> = sq.data.iter().skip(ch).step_by(sq.channels).map(|&v| v as f32).collect();
            resize_bilinear(&plane, sq.width, sq.height, IMAGE_SIDE, IMAGE_SIDE)
        })
        .collect();
    let mut out = Vec::with_capacity(channels * PLANE);
    match (sq.channels, channels) {
        (3, 1) => out.extend((0..PLANE).map(|i| {
            quantize(LUMA[0] * planes[0][i] + LUMA[1] * planes[1][i] + LUMA[2] * planes[2][i])
        })),
        (1, 3) => {
            for _ in 0..3 {
                out.extend(planes[0].iter().map(|&v| quantize(v)));
            }
        }
        _ => {
            for p in &planes {
                out.extend(p.iter().map(|&v| quantize(v)));
            }
        }
    }
    Ok(out)
}

pub fn u8_to_unit(v: u8) -> f32 {
    v as f32 / 255.0
}

/// Full pipeline to a `[1, C, 90, 90]` tensor in `[0, 1]`.
pub fn preprocess(img: &RawImage, channels: usize) -> Result<Tensor> {
    let bytes = preprocess_u8(img, channels)?;
    Ok(Tensor::new(
        &[1, channels, IMAGE_SIDE, IMAGE_SIDE],
        bytes.into_iter().map(u8_to_unit).collect(),
    )
    .expect("shape matches length"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_to_one_averages_all_four() {
        let out = resize_bilinear(&[0.0, 100.0, 100.0, 200.0], 2, 2, 1, 1);
        assert_eq!(out, vec![100.0]);
    }

    #[test]
    fn same_size_is_identity() {
        let src: Vec<f32> = (0..90 * 90).map(|i| (i % 251) as f32).collect();
        assert_eq!(resize_bilinear(&src, 90, 90, 90, 90), src);
        let raw = RawImage::gray(90, 90, src.iter().map(|&v| v as u8).collect());
        assert_eq!(preprocess_u8(&raw, 1).unwrap(), raw.data);
    }

    #[test]
    fn center_crop_picks_middle() {
        let img = RawImage::gray(5, 3, (0..15).collect());
        let c = center_crop(&img);
        assert_eq!((c.width, c.height), (3, 3));
        assert_eq!(c.data, vec![1, 2, 3, 6, 7, 8, 11, 12, 13]);
    }

    #[test]
    fn constant_image_stays_constant() {
        for (w, h) in [(640, 480), (100, 300), (91, 89), (8, 8)] {
            let raw = RawImage::gray(w, h, vec![180; w * h]);
            let t = preprocess(&raw, 1).unwrap();
            assert_eq!(t.shape(), &[1, 1, 90, 90]);
            assert!(t.data().iter().all(|&v| v == 180.0 / 255.0));
        }
    }

    #[test]
    fn rgb_to_gray_uses_luma_weights() {
        let raw = RawImage::rgb(10, 10, [255u8, 0, 0].repeat(100));
        let out = preprocess_u8(&raw, 1).unwrap();
        assert!(out.iter().all(|&v| v == 76));
        let gray = RawImage::gray(10, 10, vec![42; 100]);
        let rep = preprocess_u8(&gray, 3).unwrap();
        assert_eq!(rep.len(), 3 * PLANE);
        assert!(rep.iter().all(|&v| v == 42));
    }

    #[test]
    fn rejects_small_and_bad_channels() {
        assert!(matches!(
            preprocess_u8(&RawImage::gray(7, 100, vec![0; 700]), 1),
            Err(DataError::TooSmall { .. })
        ));
        assert!(matches!(
            preprocess_u8(&RawImage::gray(8, 8, vec![0; 64]), 2),
            Err(DataError::Channels(2))
        ));
    }

    #[test]
    fn fingerprint_describes_differences() {
        assert_eq!(Preprocessing::new(1), Preprocessing::new(1));
        assert_ne!(Preprocessing::new(1), Preprocessing::new(3));
        assert!(Preprocessing::new(3).describe().contains("channels=3"));
    }
}
