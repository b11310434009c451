//! Box decoding with and without the Hanning prior on a score map with a
//! strong off-centre distractor.
//!
//! cargo run --example decode_hanning

use spiketrack::autodiff::Tensor;
use spiketrack::head::boxes::{decode_box, encode_box, maps_for_target};
use spiketrack::head::BBox;
use spiketrack::track::{hann_2d, penalized_decode, CropTransform};

fn main() -> Result<(), spiketrack::Error> {
    let (side, stride, size) = (16, 16.0, 256.0);
    let target = BBox::new(132.0, 124.0, 40.0, 30.0);
    let mut maps = maps_for_target(&encode_box(&target, stride, side, size, size), side, 0.6);
    // a brighter response near the border
    let cell = side + 1;
    maps.p.data_mut()[cell] = 0.9;
    maps.s.data_mut()[cell] = 0.15;
    maps.s.data_mut()[side * side + cell] = 0.1;
    let (plain, peak) = decode_box(&maps, stride, size, size);
    let ident = CropTransform { x0: 0.0, y0: 0.0, scale: 1.0 };
    let (prior, score) = penalized_decode(&maps, &hann_2d(side)?, &ident, stride, size)?;
    println!("target      {target:?}");
    println!("plain       {plain:?} (peak {peak:.2})");
    println!("with prior  {prior:?} (penalised peak {score:.2})");
    let unit = penalized_decode(&maps, &Tensor::full([side, side], 1.0), &ident, stride, size)?;
    assert_eq!(unit.0, plain);
    Ok(())
}
