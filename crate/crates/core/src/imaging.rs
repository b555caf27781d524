//! Image buffers, binary masks and PNG I/O.
//!
//! Images are `[H, W, C]` tensors with values in `[0, 1]`. PNG files are
//! 8-bit; values are quantized with `round(v * 255)`.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Binary `H x W` mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("mask", &[height * width], &[data.len()]));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, v: bool) -> Self {
        Self {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Nearest-neighbour resampling to `(h, w)`: output cell `(i, j)` reads
    /// the source pixel under its centre.
    pub fn downsample_nearest(&self, h: usize, w: usize) -> Mask {
        Mask::from_fn(h, w, |i, j| {
            let sy = ((2 * i + 1) * self.height) / (2 * h);
            let sx = ((2 * j + 1) * self.width) / (2 * w);
            self.get(sy.min(self.height - 1), sx.min(self.width - 1))
        })
    }

    pub fn flip_horizontal(&self) -> Mask {
        Mask::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }

    /// `[H, W, 1]` tensor of 0/1.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            &[self.height, self.width, 1],
            self.data.iter().map(|&b| if b { T::one() } else { T::zero() }).collect(),
        )
        .expect("mask extent")
    }

    /// Binarizes a single-channel soft mask at `threshold`.
    pub fn from_soft<T: Scalar>(t: &Tensor<T>, threshold: T) -> Result<Mask> {
        let s = t.shape();
        if s.len() != 3 || s[2] != 1 {
            return Err(Error::invalid("soft mask must be [H, W, 1]"));
        }
        Mask::new(s[0], s[1], t.data().iter().map(|&v| v >= threshold).collect())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img: GrayImage = ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        });
        img.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
    }

    /// Loads a single-channel 0/255 PNG; any other gray level is rejected.
    pub fn load_png(path: &Path) -> Result<Mask> {
        let img = image::open(path)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::Image {
                    path: path.to_path_buf(),
                    source: other,
                },
            })?
            .to_luma8();
        let (w, h) = img.dimensions();
        let mut data = Vec::with_capacity((w * h) as usize);
        for p in img.pixels() {
            match p.0[0] {
                0 => data.push(false),
                255 => data.push(true),
                v => {
                    return Err(Error::format(
                        "mask",
                        format!("{}: non-binary value {v}", path.display()),
                    ))
                }
            }
        }
        Mask::new(h as usize, w as usize, data)
    }
}

pub fn to_u8<T: Scalar>(v: T) -> u8 {
    (v.f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn from_u8<T: Scalar>(v: u8) -> T {
    T::c(f64::from(v) / 255.0)
}

/// Rounds every value to the nearest 8-bit level.
pub fn quantize<T: Scalar>(img: &Tensor<T>) -> Tensor<T> {
    img.map(|v| from_u8(to_u8(v)))
}

fn check_rgb<T: Scalar>(img: &Tensor<T>) -> Result<(usize, usize)> {
    let s = img.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::invalid(format!("expected an [H, W, 3] image, got {s:?}")));
    }
    Ok((s[0], s[1]))
}

/// PNG bytes of an RGB image; the encoding is deterministic.
pub fn encode_png_rgb<T: Scalar>(img: &Tensor<T>) -> Result<RgbImage> {
    let (h, w) = check_rgb(img)?;
    let d = img.data();
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = (y as usize * w + x as usize) * 3;
        Rgb([to_u8(d[i]), to_u8(d[i + 1]), to_u8(d[i + 2])])
    }))
}

pub fn save_png_rgb<T: Scalar>(path: &Path, img: &Tensor<T>) -> Result<()> {
    encode_png_rgb(img)?.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn load_png_rgb<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image {
                path: path.to_path_buf(),
                source: other,
            },
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Tensor::new(
        &[h as usize, w as usize, 3],
        img.as_raw().iter().map(|&b| from_u8(b)).collect(),
    )
}

/// `fg` where `mask` is set, otherwise `bg`.
pub fn composite<T: Scalar>(fg: &Tensor<T>, bg: &Tensor<T>, mask: &Mask) -> Result<Tensor<T>> {
    let (h, w) = check_rgb(fg)?;
    if fg.shape() != bg.shape() {
        return Err(Error::shape("composite", fg.shape(), bg.shape()));
    }
    if mask.height() != h || mask.width() != w {
        return Err(Error::shape("composite mask", &[h, w], &[mask.height(), mask.width()]));
    }
    let mut out = bg.clone();
    for (p, &m) in mask.data().iter().enumerate() {
        if m {
            out.data_mut()[p * 3..p * 3 + 3].copy_from_slice(&fg.data()[p * 3..p * 3 + 3]);
        }
    }
    Ok(out)
}

/// Zeroes every pixel outside the mask.
pub fn apply_mask<T: Scalar>(img: &Tensor<T>, mask: &Mask) -> Result<Tensor<T>> {
    let black = Tensor::zeros(img.shape());
    composite(img, &black, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_reads_cell_centres() {
        let m = Mask::from_fn(8, 8, |_, x| x >= 4);
        let d = m.downsample_nearest(2, 2);
        assert_eq!(d.data(), &[false, true, false, true]);
    }

    #[test]
    fn png_round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = Tensor::<f64>::from_fn(&[4, 5, 3], |i| (i % 7) as f64 / 6.0);
        save_png_rgb(&p, &img).unwrap();
        let back: Tensor<f64> = load_png_rgb(&p).unwrap();
        assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-12);
        assert_eq!(back, quantize(&img));
    }

    #[test]
    fn gray_mask_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let img: GrayImage = ImageBuffer::from_fn(3, 3, |x, _| Luma([if x == 1 { 128 } else { 255 }]));
        img.save(&p).unwrap();
        assert!(matches!(Mask::load_png(&p), Err(Error::Format { .. })));
    }
}
