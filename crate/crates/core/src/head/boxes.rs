//! Boxes, score maps, and reading a box off the maps.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Axis-aligned box given by its centre and extent, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// From the top-left corner and extent (`x,y,w,h` file convention).
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { cx: x + w / 2.0, cy: y + h / 2.0, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::from_xywh(x0, y0, x1 - x0, y1 - y0)
    }

    pub fn xywh(&self) -> [f64; 4] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h]
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.cx + self.w / 2.0, self.cy + self.h / 2.0]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite())
    }

    pub fn center_distance(&self, other: &BBox) -> f64 {
        (self.cx - other.cx).hypot(self.cy - other.cy)
    }

    fn intersection(&self, other: &BBox) -> f64 {
        let [a0, a1, a2, a3] = self.corners();
        let [b0, b1, b2, b3] = other.corners();
        (a2.min(b2) - a0.max(b0)).max(0.0) * (a3.min(b3) - a1.max(b1)).max(0.0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let i = self.intersection(other);
        let u = self.area() + other.area() - i;
        if u <= 0.0 {
            0.0
        } else {
            i / u
        }
    }

    /// Generalized IoU: `IoU − |C \ (A ∪ B)| / |C|` with `C` the smallest
    /// enclosing box.
    pub fn giou(&self, other: &BBox) -> f64 {
        let i = self.intersection(other);
        let u = self.area() + other.area() - i;
        let [a0, a1, a2, a3] = self.corners();
        let [b0, b1, b2, b3] = other.corners();
        let c = (a2.max(b2) - a0.min(b0)) * (a3.max(b3) - a1.min(b1));
        i / u - (c - u) / c
    }

    /// Moves the box so it lies inside a `width × height` frame and clamps
    /// its extent to at least `min_side`.
    pub fn clamped_to(&self, width: f64, height: f64, min_side: f64) -> BBox {
        let w = self.w.clamp(min_side, width);
        let h = self.h.clamp(min_side, height);
        let cx = self.cx.clamp(w / 2.0, width - w / 2.0);
        let cy = self.cy.clamp(h / 2.0, height - h / 2.0);
        BBox { cx, cy, w, h }
    }
}

/// Head outputs for one image: classification `P [M, M]`, size
/// `S [2, M, M]` (`w/W_x`, `h/H_x`) and offset `O [2, M, M]` (x, y in cells).
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMaps {
    pub p: Tensor,
    pub s: Tensor,
    pub o: Tensor,
}

impl ScoreMaps {
    pub fn new(p: Tensor, s: Tensor, o: Tensor) -> Result<Self> {
        let m = p.shape().first().copied().unwrap_or(0);
        let ok = p.shape() == [m, m] && s.shape() == [2, m, m] && o.shape() == [2, m, m] && m > 0;
        if !ok {
            return Err(Error::shape(
                "score_maps",
                format!("P {:?}, S {:?}, O {:?} do not share a square grid", p.shape(), s.shape(), o.shape()),
            ));
        }
        Ok(Self { p, s, o })
    }

    pub fn side(&self) -> usize {
        self.p.shape()[0]
    }

    /// Slices sample `b` out of batched `[B,1,M,M]`, `[B,2,M,M]`, `[B,2,M,M]` maps.
    pub fn from_batch(p: &Tensor, s: &Tensor, o: &Tensor, b: usize) -> Result<Self> {
        let m = p.shape()[2];
        let mm = m * m;
        let take = |t: &Tensor, ch: usize| t.data()[b * ch * mm..(b + 1) * ch * mm].to_vec();
        Self::new(
            Tensor::new([m, m], take(p, 1))?,
            Tensor::new([2, m, m], take(s, 2))?,
            Tensor::new([2, m, m], take(o, 2))?,
        )
    }

    /// Box read off at cell `(x, y)`.
    pub fn box_at(&self, x: usize, y: usize, stride: f64, width: f64, height: f64) -> BBox {
        let m = self.side();
        let i = y * m + x;
        let mm = m * m;
        let (ox, oy) = (self.o.data()[i], self.o.data()[mm + i]);
        let (sw, sh) = (self.s.data()[i], self.s.data()[mm + i]);
        BBox { cx: (x as f64 + ox) * stride, cy: (y as f64 + oy) * stride, w: sw * width, h: sh * height }
    }
}

/// Index of the first maximum in row-major order.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Box at the highest classification score, and that score.
pub fn decode_box(maps: &ScoreMaps, stride: f64, width: f64, height: f64) -> (BBox, f64) {
    decode_with_scores(maps, maps.p.data(), stride, width, height)
}

/// As [`decode_box`], but locating the peak in `scores` (same grid as `P`).
pub fn decode_with_scores(maps: &ScoreMaps, scores: &[f64], stride: f64, width: f64, height: f64) -> (BBox, f64) {
    let m = maps.side();
    let i = argmax(scores);
    (maps.box_at(i % m, i / m, stride, width, height), scores[i])
}

/// Grid cell and regression targets of a box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellTarget {
    pub x: usize,
    pub y: usize,
    /// `(O_x, O_y)`, each in `[0, 1]`.
    pub offset: [f64; 2],
    /// `(S_w, S_h)` as fractions of the search image.
    pub size: [f64; 2],
}

/// Inverse of decoding: the cell holding the centre, the sub-cell offset,
/// and the normalized size.
pub fn encode_box(b: &BBox, stride: f64, side: usize, width: f64, height: f64) -> CellTarget {
    let cell = |c: f64| ((c / stride).floor().max(0.0) as usize).min(side - 1);
    let (x, y) = (cell(b.cx), cell(b.cy));
    CellTarget {
        x,
        y,
        offset: [b.cx / stride - x as f64, b.cy / stride - y as f64],
        size: [b.w / width, b.h / height],
    }
}

/// Maps that decode to `t` with the given peak score.
pub fn maps_for_target(t: &CellTarget, side: usize, peak: f64) -> ScoreMaps {
    let mm = side * side;
    let i = t.y * side + t.x;
    let mut p = Tensor::zeros([side, side]);
    p.data_mut()[i] = peak;
    let mut s = Tensor::zeros([2, side, side]);
    let mut o = Tensor::zeros([2, side, side]);
    for ch in 0..2 {
        s.data_mut()[ch * mm + i] = t.size[ch];
        o.data_mut()[ch * mm + i] = t.offset[ch];
    }
    ScoreMaps { p, s, o }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_decode() {
        let t = CellTarget { x: 5, y: 9, offset: [0.25, 0.5], size: [0.3, 0.2] };
        let (b, peak) = decode_box(&maps_for_target(&t, 16, 0.9), 16.0, 256.0, 256.0);
        assert_eq!(peak, 0.9);
        assert_eq!((b.cx, b.cy), (84.0, 152.0));
        assert!((b.w - 76.8).abs() < 1e-12 && (b.h - 51.2).abs() < 1e-12);
    }

    #[test]
    fn uniform_map_picks_first_cell() {
        let maps = ScoreMaps::new(Tensor::full([4, 4], 0.3), Tensor::zeros([2, 4, 4]), Tensor::zeros([2, 4, 4])).unwrap();
        let (b, _) = decode_box(&maps, 16.0, 64.0, 64.0);
        assert_eq!((b.cx, b.cy), (0.0, 0.0));
    }

    #[test]
    fn zero_offset_lands_on_cell_corner_scaled() {
        let g = 3.0;
        let t = CellTarget { x: 8, y: 8, offset: [0.0, 0.0], size: [g / 16.0, g / 16.0] };
        let (b, _) = decode_box(&maps_for_target(&t, 16, 1.0), 16.0, 256.0, 256.0);
        assert_eq!((b.cx, b.cy, b.w, b.h), (128.0, 128.0, 48.0, 48.0));
    }

    #[test]
    fn giou_worked_example() {
        let a = BBox::from_corners(0.0, 0.0, 2.0, 2.0);
        let b = BBox::from_corners(1.0, 1.0, 3.0, 3.0);
        assert!((a.iou(&b) - 1.0 / 7.0).abs() < 1e-15);
        assert!((a.giou(&b) - (1.0 / 7.0 - 2.0 / 9.0)).abs() < 1e-15);
        assert_eq!(a.giou(&a), 1.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(ScoreMaps::new(Tensor::zeros([4, 4]), Tensor::zeros([2, 4, 4]), Tensor::zeros([2, 3, 3])).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(x in 0usize..16, y in 0usize..16, ox in 0.0f64..1.0, oy in 0.0f64..1.0,
                                     w in 1.0f64..256.0, h in 1.0f64..256.0) {
            let b = BBox::new((x as f64 + ox) * 16.0, (y as f64 + oy) * 16.0, w, h);
            let t = encode_box(&b, 16.0, 16, 256.0, 256.0);
            let (d, _) = decode_box(&maps_for_target(&t, 16, 1.0), 16.0, 256.0, 256.0);
            prop_assert!((d.cx - b.cx).abs() < 1e-9 && (d.cy - b.cy).abs() < 1e-9);
            prop_assert!((d.w - b.w).abs() < 1e-9 && (d.h - b.h).abs() < 1e-9);
        }

        #[test]
        fn giou_symmetric_and_bounded(a in prop::array::uniform4(0.5f64..50.0), b in prop::array::uniform4(0.5f64..50.0)) {
            let (p, q) = (BBox::new(a[0], a[1], a[2], a[3]), BBox::new(b[0], b[1], b[2], b[3]));
            let l = 1.0 - p.giou(&q);
            prop_assert!((0.0..2.0).contains(&l));
            prop_assert!((p.giou(&q) - q.giou(&p)).abs() < 1e-12);
        }
    }
}
