//! Frame-by-frame inference: cropping, the Hanning prior, and template
//! updates.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::head::boxes::{decode_with_scores, BBox, ScoreMaps};
use crate::imaging::Image;
use crate::model::TrackerModel;

/// `w[k] = 0.5·(1 − cos(2πk/(n−1)))`.
pub fn hann_window(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::invalid(format!("Hanning window needs n >= 2, got {n}")));
    }
    let d = (n - 1) as f64;
    Ok((0..n).map(|k| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * k as f64 / d).cos())).collect())
}

/// Outer product of two 1-D windows, `[n, n]`.
pub fn hann_2d(n: usize) -> Result<Tensor> {
    let w = hann_window(n)?;
    Ok(Tensor::from_fn([n, n], |i| w[i / n] * w[i % n]))
}

/// Affine map between crop pixels and frame pixels (continuous
/// coordinates, pixel edges at integers).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    pub x0: f64,
    pub y0: f64,
    /// Frame pixels per crop pixel.
    pub scale: f64,
}

impl CropTransform {
    pub fn to_frame(&self, x: f64, y: f64) -> (f64, f64) {
        (self.x0 + x * self.scale, self.y0 + y * self.scale)
    }

    pub fn to_crop(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.x0) / self.scale, (y - self.y0) / self.scale)
    }

    pub fn box_to_frame(&self, b: &BBox) -> BBox {
        let (cx, cy) = self.to_frame(b.cx, b.cy);
        BBox::new(cx, cy, b.w * self.scale, b.h * self.scale)
    }

    pub fn box_to_crop(&self, b: &BBox) -> BBox {
        let (cx, cy) = self.to_crop(b.cx, b.cy);
        BBox::new(cx, cy, b.w / self.scale, b.h / self.scale)
    }
}

/// Square crop of side `factor·sqrt(w·h)` centred on `center`, resampled to
/// `out × out`; the outside of the frame reads the frame's mean colour.
pub fn crop_around(frame: &Image, center: (f64, f64), b: &BBox, factor: f64, out: usize) -> Result<(Image, CropTransform)> {
    if frame.height() == 0 || frame.width() == 0 {
        return Err(Error::invalid("cannot crop an empty frame"));
    }
    if !b.is_valid() {
        return Err(Error::invalid(format!("cannot crop around degenerate box {b:?}")));
    }
    let side = factor * (b.w * b.h).sqrt();
    let x0 = center.0 - side / 2.0;
    let y0 = center.1 - side / 2.0;
    let img = frame.crop_resize(x0, y0, side, out, frame.channel_means());
    Ok((img, CropTransform { x0, y0, scale: side / out as f64 }))
}

/// Search region around the previous box.
pub fn crop_search(frame: &Image, prev: &BBox, factor: f64, out: usize) -> Result<(Image, CropTransform)> {
    crop_around(frame, (prev.cx, prev.cy), prev, factor, out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackConfig {
    /// Search crop side over `sqrt(w·h)`.
    pub search_factor: f64,
    /// Template crop side over `sqrt(w·h)`.
    pub template_factor: f64,
    /// Frames between dynamic-template refresh attempts.
    pub update_interval: usize,
    /// Minimum peak score for a refresh.
    pub update_threshold: f64,
    pub hanning: bool,
    /// Smallest box side kept, in frame pixels.
    pub min_box_side: f64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            search_factor: 4.0,
            template_factor: 2.0,
            update_interval: 25,
            update_threshold: 0.7,
            hanning: true,
            min_box_side: 4.0,
        }
    }
}

pub struct TrackerState {
    pub initial_template: Image,
    pub dynamic_template: Image,
    pub prev: BBox,
    pub hann: Tensor,
    pub frame_index: usize,
}

/// Applies the window to `P` and decodes, mapping the box to frame
/// coordinates through `tf`.
pub fn penalized_decode(maps: &ScoreMaps, hann: &Tensor, tf: &CropTransform, stride: f64, search_size: f64) -> Result<(BBox, f64)> {
    if hann.shape() != maps.p.shape() {
        return Err(Error::shape("penalized_decode", format!("window {:?} vs P {:?}", hann.shape(), maps.p.shape())));
    }
    let scores: Vec<f64> = maps.p.data().iter().zip(hann.data()).map(|(p, w)| p * w).collect();
    let (b, peak) = decode_with_scores(maps, &scores, stride, search_size, search_size);
    Ok((tf.box_to_frame(&b), peak))
}

pub struct Tracker<'a> {
    pub model: &'a TrackerModel,
    pub store: &'a ParamStore,
    pub cfg: TrackConfig,
}

impl<'a> Tracker<'a> {
    pub fn new(model: &'a TrackerModel, store: &'a ParamStore, cfg: TrackConfig) -> Self {
        Self { model, store, cfg }
    }

    fn template(&self, frame: &Image, b: &BBox) -> Result<Image> {
        let size = self.model.cfg.backbone.template_size;
        Ok(crop_around(frame, (b.cx, b.cy), b, self.cfg.template_factor, size)?.0)
    }

    pub fn init(&self, frame: &Image, b: &BBox) -> Result<TrackerState> {
        let t = self.template(frame, b)?;
        let side = self.model.cfg.backbone.map_side();
        let hann = if self.cfg.hanning { hann_2d(side)? } else { Tensor::ones([side, side]) };
        Ok(TrackerState { initial_template: t.clone(), dynamic_template: t, prev: *b, hann, frame_index: 0 })
    }

    /// Predicts the box in the next frame and advances the state.
    pub fn step(&self, st: &mut TrackerState, frame: &Image) -> Result<(BBox, f64)> {
        let bc = &self.model.cfg.backbone;
        let (search, tf) = crop_search(frame, &st.prev, self.cfg.search_factor, bc.search_size)?;
        let maps = self.model.predict(self.store, &st.initial_template, &st.dynamic_template, &search)?;
        let (b, peak) = penalized_decode(&maps, &st.hann, &tf, bc.patch_stride as f64, bc.search_size as f64)?;
        let b = b.clamped_to(frame.width() as f64, frame.height() as f64, self.cfg.min_box_side);
        st.frame_index += 1;
        st.prev = b;
        if self.cfg.update_interval > 0 && st.frame_index % self.cfg.update_interval == 0 && peak > self.cfg.update_threshold {
            st.dynamic_template = self.template(frame, &b)?;
        }
        Ok((b, peak))
    }

    /// One box per frame; frame 0 reports the initial box.
    pub fn track_sequence(&self, frames: &[Image], init: &BBox) -> Result<Vec<BBox>> {
        let first = frames.first().ok_or_else(|| Error::invalid("cannot track an empty sequence"))?;
        let mut st = self.init(first, init)?;
        let mut out = vec![*init];
        for f in &frames[1..] {
            out.push(self.step(&mut st, f)?.0);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::boxes::{decode_box, maps_for_target, CellTarget};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn window_values() {
        let w = hann_window(16).unwrap();
        assert_eq!(w[0], 0.0);
        assert!(w[15].abs() < 1e-15);
        assert!((w[7] - 0.9890738003669028).abs() < 1e-10);
        assert_eq!(w[7], w[8]);
        assert!((hann_window(9).unwrap()[4] - 1.0).abs() < 1e-15);
        assert!(hann_window(1).is_err());
    }

    fn ident() -> CropTransform {
        CropTransform { x0: 0.0, y0: 0.0, scale: 1.0 }
    }

    #[test]
    fn uniform_scores_pick_window_centre() {
        let m = ScoreMaps::new(Tensor::full([16, 16], 0.4), Tensor::zeros([2, 16, 16]), Tensor::zeros([2, 16, 16])).unwrap();
        let (b, _) = penalized_decode(&m, &hann_2d(16).unwrap(), &ident(), 16.0, 256.0).unwrap();
        // the two central rows/columns tie; the first in row-major order wins
        assert_eq!((b.cx, b.cy), (7.0 * 16.0, 7.0 * 16.0));
    }

    #[test]
    fn corner_peak_moves_inward() {
        let mut p = Tensor::full([16, 16], 0.1);
        p.data_mut()[0] = 0.99;
        p.data_mut()[2 * 16 + 3] = 0.5;
        let m = ScoreMaps::new(p.clone(), Tensor::zeros([2, 16, 16]), Tensor::zeros([2, 16, 16])).unwrap();
        let h = hann_2d(16).unwrap();
        let (b, _) = penalized_decode(&m, &h, &ident(), 1.0, 16.0).unwrap();
        let brute = crate::head::boxes::argmax(&p.data().iter().zip(h.data()).map(|(a, b)| a * b).collect::<Vec<_>>());
        assert_eq!((b.cx as usize, b.cy as usize), (brute % 16, brute / 16));
        assert!(b.cx > 0.0 && b.cy > 0.0);
    }

    #[test]
    fn ones_window_matches_plain_decode() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let m = ScoreMaps::new(
                Tensor::from_fn([16, 16], |_| rng.gen()),
                Tensor::from_fn([2, 16, 16], |_| rng.gen()),
                Tensor::from_fn([2, 16, 16], |_| rng.gen()),
            )
            .unwrap();
            let (a, _) = penalized_decode(&m, &Tensor::ones([16, 16]), &ident(), 16.0, 256.0).unwrap();
            assert_eq!(a, decode_box(&m, 16.0, 256.0, 256.0).0);
        }
        let m = maps_for_target(&CellTarget { x: 1, y: 1, offset: [0.0; 2], size: [0.1; 2] }, 4, 1.0);
        assert!(penalized_decode(&m, &Tensor::ones([5, 5]), &ident(), 16.0, 64.0).is_err());
    }

    #[test]
    fn native_scale_crop_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = (0..400 * 400 * 3).map(|_| rng.gen()).collect();
        let frame = Image::from_data(400, 400, data).unwrap();
        let b = BBox::new(200.0, 200.0, 64.0, 64.0);
        let (crop, tf) = crop_search(&frame, &b, 4.0, 256).unwrap();
        assert_eq!(tf.scale, 1.0);
        assert_eq!(crop, frame.sub_image(72, 72, 256, 256));
    }

    #[test]
    fn transform_round_trip() {
        let tf = CropTransform { x0: -13.7, y0: 42.1, scale: 0.731 };
        let b = BBox::new(17.3, 99.9, 21.0, 7.5);
        let r = tf.box_to_frame(&tf.box_to_crop(&b));
        for (a, e) in [(r.cx, b.cx), (r.cy, b.cy), (r.w, b.w), (r.h, b.h)] {
            assert!((a - e).abs() < 1e-6);
        }
    }

    #[test]
    fn corner_box_pads_with_means() {
        let frame = Image::filled(100, 100, [0.2, 0.4, 0.8]);
        let mut f = frame.clone();
        f.set_pixel(0, 0, [1.0, 1.0, 1.0]);
        let means = f.channel_means();
        let (crop, tf) = crop_search(&f, &BBox::new(0.0, 0.0, 20.0, 20.0), 4.0, 80).unwrap();
        // crop pixels whose bilinear footprint lies entirely off-frame
        for y in 0..80 {
            for x in 0..80 {
                let (fx, fy) = tf.to_frame(x as f64 + 0.5, y as f64 + 0.5);
                if fx < -1.0 || fy < -1.0 {
                    assert_eq!(crop.pixel(y, x), means);
                }
            }
        }
        assert!(crop_search(&Image::new(0, 0), &BBox::new(1.0, 1.0, 2.0, 2.0), 4.0, 8).is_err());
    }
}
