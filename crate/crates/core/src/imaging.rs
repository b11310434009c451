//! RGB images in `[0, 1]`, bilinear crops, and PNG/PPM frame IO.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Height × width × 3 image, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width * 3] }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut img = Self::new(height, width);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::invalid(format!(
                "image {height}x{width}x3 needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let mut m = [0.0; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                m[c] += px[c];
            }
        }
        let n = (self.height * self.width).max(1) as f64;
        m.map(|v| v / n)
    }

    /// Copies `src` into this image with its top-left corner at `(y0, x0)`.
    pub fn paste(&mut self, src: &Image, y0: usize, x0: usize) {
        assert!(y0 + src.height <= self.height && x0 + src.width <= self.width, "paste out of bounds");
        for y in 0..src.height {
            let d = ((y0 + y) * self.width + x0) * 3;
            let s = y * src.width * 3;
            self.data[d..d + src.width * 3].copy_from_slice(&src.data[s..s + src.width * 3]);
        }
    }

    pub fn sub_image(&self, y0: usize, x0: usize, height: usize, width: usize) -> Image {
        assert!(y0 + height <= self.height && x0 + width <= self.width, "sub_image out of bounds");
        let mut out = Image::new(height, width);
        for y in 0..height {
            let s = ((y0 + y) * self.width + x0) * 3;
            out.data[y * width * 3..(y + 1) * width * 3].copy_from_slice(&self.data[s..s + width * 3]);
        }
        out
    }

    /// Bilinear resampling of the square region with top-left `(x0, y0)` and
    /// side `side` (frame pixels) onto an `out × out` grid. Samples falling
    /// outside the frame read `pad`.
    pub fn crop_resize(&self, x0: f64, y0: f64, side: f64, out: usize, pad: [f64; 3]) -> Image {
        let mut img = Image::new(out, out);
        let step = side / out as f64;
        let fetch = |y: isize, x: isize| -> [f64; 3] {
            if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
                pad
            } else {
                self.pixel(y as usize, x as usize)
            }
        };
        let xs: Vec<(isize, f64)> = (0..out)
            .map(|j| {
                let sx = x0 + (j as f64 + 0.5) * step - 0.5;
                let fx = sx.floor();
                (fx as isize, sx - fx)
            })
            .collect();
        for i in 0..out {
            let sy = y0 + (i as f64 + 0.5) * step - 0.5;
            let fy = sy.floor();
            let (iy, wy) = (fy as isize, sy - fy);
            for (j, &(ix, wx)) in xs.iter().enumerate() {
                let mut px = [0.0; 3];
                let corners = [
                    (iy, ix, (1.0 - wy) * (1.0 - wx)),
                    (iy, ix + 1, (1.0 - wy) * wx),
                    (iy + 1, ix, wy * (1.0 - wx)),
                    (iy + 1, ix + 1, wy * wx),
                ];
                for (cy, cx, w) in corners {
                    if w == 0.0 {
                        continue;
                    }
                    let v = fetch(cy, cx);
                    for c in 0..3 {
                        px[c] += w * v[c];
                    }
                }
                img.set_pixel(i, j, px);
            }
        }
        img
    }

    /// Mean over non-overlapping `k × k` blocks.
    pub fn avg_pool(&self, k: usize) -> Image {
        assert!(k > 0 && self.height % k == 0 && self.width % k == 0, "pool factor must divide the image");
        let (h, w) = (self.height / k, self.width / k);
        let mut out = Image::new(h, w);
        let norm = 1.0 / (k * k) as f64;
        for y in 0..self.height {
            for x in 0..self.width {
                let s = (y * self.width + x) * 3;
                let d = ((y / k) * w + x / k) * 3;
                for c in 0..3 {
                    out.data[d + c] += self.data[s + c] * norm;
                }
            }
        }
        out
    }

    /// Channel-first `[3, H, W]` tensor.
    pub fn to_chw(&self) -> Tensor {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + p] = px[c];
            }
        }
        Tensor::new(vec![3, self.height, self.width], out).expect("consistent shape")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes).expect("buffer size");
        buf.save(path).map_err(|e| Error::Image { path: path.into(), detail: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image { path: path.into(), detail: e.to_string() })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
        Self::from_data(h as usize, w as usize, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        let mut img = Image::new(h, w);
        for y in 0..h {
            for x in 0..w {
                img.set_pixel(y, x, [y as f64 / h as f64, x as f64 / w as f64, 0.5]);
            }
        }
        img
    }

    #[test]
    fn native_scale_crop_is_identity() {
        let img = ramp(40, 50);
        let c = img.crop_resize(7.0, 3.0, 20.0, 20, [0.0; 3]);
        assert_eq!(c, img.sub_image(3, 7, 20, 20));
    }

    #[test]
    fn out_of_frame_reads_pad() {
        let img = ramp(10, 10);
        let c = img.crop_resize(-20.0, -20.0, 10.0, 10, [0.1, 0.2, 0.3]);
        assert!(c.data().chunks_exact(3).all(|p| p == [0.1, 0.2, 0.3]));
    }

    #[test]
    fn pool_averages_blocks() {
        let img = ramp(8, 8);
        let p = img.avg_pool(4);
        assert_eq!((p.height(), p.width()), (2, 2));
        let want: f64 = (0..4).map(|y| y as f64 / 8.0).sum::<f64>() / 4.0;
        assert!((p.pixel(0, 1)[0] - want).abs() < 1e-12);
    }

    #[test]
    fn png_round_trip_quantizes_to_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let img = ramp(6, 5);
        let path = dir.path().join("a.png");
        img.save(&path).unwrap();
        let back = Image::load(&path).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let ppm = dir.path().join("a.ppm");
        img.save(&ppm).unwrap();
        assert_eq!(Image::load(&ppm).unwrap(), back);
    }
}
