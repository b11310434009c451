//! Random Patch Module: joins two templates and a search image into one
//! frame, horizontally or vertically.
//!
//! Horizontal (`256 × 384`): the templates stacked into a `256 × 128` strip
//! to the left of the search image. Vertical (`384 × 256`): the templates
//! side by side in a `128 × 256` strip above it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Horizontal,
    Vertical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenType {
    Template1,
    Template2,
    Search,
}

impl TokenType {
    pub const ALL: [TokenType; 3] = [TokenType::Template1, TokenType::Template2, TokenType::Search];

    /// Row of the type-embedding table.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_template(self) -> bool {
        self != TokenType::Search
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FuseMode {
    Train,
    Infer,
}

/// Layout drawn for a training batch from `seed`.
pub fn draw_layout(seed: u64) -> Layout {
    if ChaCha8Rng::seed_from_u64(seed).gen_bool(0.5) {
        Layout::Horizontal
    } else {
        Layout::Vertical
    }
}

pub fn layout_for(mode: FuseMode, seed: u64) -> Layout {
    match mode {
        FuseMode::Infer => Layout::Horizontal,
        FuseMode::Train => draw_layout(seed),
    }
}

/// Fused frame plus the geometry needed to label and invert it.
#[derive(Clone, Debug, PartialEq)]
pub struct JointInput {
    pub image: Image,
    pub layout: Layout,
    pub template_size: usize,
    pub search_size: usize,
}

/// Placement of a source image inside a fused frame of a given layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub y0: usize,
    pub x0: usize,
    pub side: usize,
}

pub fn fused_dims(layout: Layout, template_size: usize) -> (usize, usize) {
    let (a, s) = (template_size, 2 * template_size);
    match layout {
        Layout::Horizontal => (s, a + s),
        Layout::Vertical => (a + s, s),
    }
}

pub fn region(layout: Layout, template_size: usize, t: TokenType) -> Region {
    let a = template_size;
    match (layout, t) {
        (_, TokenType::Template1) => Region { y0: 0, x0: 0, side: a },
        (Layout::Horizontal, TokenType::Template2) => Region { y0: a, x0: 0, side: a },
        (Layout::Vertical, TokenType::Template2) => Region { y0: 0, x0: a, side: a },
        (Layout::Horizontal, TokenType::Search) => Region { y0: 0, x0: a, side: 2 * a },
        (Layout::Vertical, TokenType::Search) => Region { y0: a, x0: 0, side: 2 * a },
    }
}

/// Token labels of a fused frame, in row-major patch order.
pub fn token_types(layout: Layout, template_size: usize, stride: usize) -> Vec<TokenType> {
    let (h, w) = fused_dims(layout, template_size);
    let (gh, gw) = (h / stride, w / stride);
    let mut out = Vec::with_capacity(gh * gw);
    for gy in 0..gh {
        for gx in 0..gw {
            let (y, x) = (gy * stride, gx * stride);
            let t = TokenType::ALL
                .into_iter()
                .find(|&t| {
                    let r = region(layout, template_size, t);
                    y >= r.y0 && y < r.y0 + r.side && x >= r.x0 && x < r.x0 + r.side
                })
                .expect("the three regions tile the frame");
            out.push(t);
        }
    }
    out
}

/// Sequence positions of the tokens of type `t`, listed in the source
/// image's own row-major patch order.
pub fn token_indices(layout: Layout, template_size: usize, stride: usize, t: TokenType) -> Vec<usize> {
    let (_, w) = fused_dims(layout, template_size);
    let gw = w / stride;
    let r = region(layout, template_size, t);
    let n = r.side / stride;
    let mut out = Vec::with_capacity(n * n);
    for py in 0..n {
        for px in 0..n {
            out.push((r.y0 / stride + py) * gw + r.x0 / stride + px);
        }
    }
    out
}

pub fn check_sizes(t1: &Image, t2: &Image, x: &Image) -> Result<usize> {
    let a = t1.height();
    let square = |i: &Image, side: usize| i.height() == side && i.width() == side;
    if a == 0 || !square(t1, a) || !square(t2, a) || !square(x, 2 * a) {
        return Err(Error::invalid(format!(
            "patch fuse expects two a×a templates and a 2a×2a search image, got {}x{}, {}x{}, {}x{}",
            t1.height(),
            t1.width(),
            t2.height(),
            t2.width(),
            x.height(),
            x.width()
        )));
    }
    Ok(a)
}

pub fn fuse_with_layout(t1: &Image, t2: &Image, x: &Image, layout: Layout) -> Result<JointInput> {
    let a = check_sizes(t1, t2, x)?;
    let (h, w) = fused_dims(layout, a);
    let mut image = Image::new(h, w);
    for (t, src) in [(TokenType::Template1, t1), (TokenType::Template2, t2), (TokenType::Search, x)] {
        let r = region(layout, a, t);
        image.paste(src, r.y0, r.x0);
    }
    Ok(JointInput { image, layout, template_size: a, search_size: 2 * a })
}

/// Joins the three images; training draws the layout from `rng_seed`,
/// inference is always horizontal.
pub fn random_patch_fuse(t1: &Image, t2: &Image, x: &Image, rng_seed: u64, mode: FuseMode) -> Result<JointInput> {
    fuse_with_layout(t1, t2, x, layout_for(mode, rng_seed))
}

impl JointInput {
    pub fn token_types(&self, stride: usize) -> Vec<TokenType> {
        token_types(self.layout, self.template_size, stride)
    }

    pub fn token_indices(&self, stride: usize, t: TokenType) -> Vec<usize> {
        token_indices(self.layout, self.template_size, stride, t)
    }

    /// Inverse of the fuse: the original `(t1, t2, x)`.
    pub fn split(&self) -> (Image, Image, Image) {
        let get = |t| {
            let r = region(self.layout, self.template_size, t);
            self.image.sub_image(r.y0, r.x0, r.side, r.side)
        };
        (get(TokenType::Template1), get(TokenType::Template2), get(TokenType::Search))
    }
}
