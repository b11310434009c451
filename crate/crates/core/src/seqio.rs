//! Sequence directories and box files.
//!
//! A sequence directory holds numbered frames (`0001.png`, … or `.ppm`)
//! and `groundtruth.txt`, one `x,y,w,h` line per frame with `(x, y)` the
//! top-left corner. Only its first line is needed for tracking. Results
//! files use the same line format.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::head::BBox;
use crate::imaging::Image;

pub const GROUNDTRUTH: &str = "groundtruth.txt";

/// One `x,y,w,h` line. Commas, tabs or spaces separate fields.
pub fn parse_box_line(line: &str) -> Option<BBox> {
    let v: Vec<f64> = line
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .ok()?;
    match v[..] {
        [x, y, w, h] if v.iter().all(|f| f.is_finite()) => Some(BBox::from_xywh(x, y, w, h)),
        _ => None,
    }
}

/// Shortest round-tripping decimal for each field.
pub fn format_box_line(b: &BBox) -> String {
    let [x, y, w, h] = b.xywh();
    format!("{x},{y},{w},{h}")
}

pub fn format_boxes(boxes: &[BBox]) -> String {
    boxes.iter().map(|b| format_box_line(b) + "\n").collect()
}

pub fn parse_boxes(text: &str, path: &Path) -> Result<Vec<BBox>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse_box_line(l).ok_or_else(|| Error::Parse { path: path.into(), detail: format!("line {}: expected x,y,w,h, got `{l}`", i + 1) })
        })
        .collect()
}

pub fn read_boxes(path: &Path) -> Result<Vec<BBox>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_boxes(&text, path)
}

pub fn write_boxes(path: &Path, boxes: &[BBox]) -> Result<()> {
    fs::write(path, format_boxes(boxes)).map_err(|e| Error::io(path, e))
}

fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
            matches!(ext.as_deref(), Some("png" | "ppm"))
        })
        .collect();
    paths.sort();
    Ok(paths)
}

/// Frames in name order and every ground-truth box present.
pub struct SequenceDir {
    pub frames: Vec<Image>,
    pub groundtruth: Vec<BBox>,
}

pub fn read_sequence(dir: &Path) -> Result<SequenceDir> {
    let paths = frame_paths(dir)?;
    if paths.is_empty() {
        return Err(Error::invalid(format!("no .png or .ppm frames in {}", dir.display())));
    }
    let groundtruth = read_boxes(&dir.join(GROUNDTRUTH))?;
    let first = groundtruth
        .first()
        .ok_or_else(|| Error::Parse { path: dir.join(GROUNDTRUTH), detail: "no initial box".into() })?;
    if !first.is_valid() {
        return Err(Error::Parse { path: dir.join(GROUNDTRUTH), detail: "initial box has no area".into() });
    }
    let frames = paths.iter().map(|p| Image::load(p)).collect::<Result<Vec<_>>>()?;
    Ok(SequenceDir { frames, groundtruth })
}

/// Writes `0001.png`, … and `groundtruth.txt`.
pub fn write_sequence(dir: &Path, frames: &[Image], boxes: &[BBox]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        f.save(&dir.join(format!("{:04}.png", i + 1)))?;
    }
    write_boxes(&dir.join(GROUNDTRUTH), boxes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{generate_sequence, SceneConfig, SyntheticScene};
    use proptest::prelude::*;

    #[test]
    fn accepts_common_separators() {
        let b = parse_box_line("10\t20 30,40").unwrap();
        assert_eq!(b.xywh(), [10.0, 20.0, 30.0, 40.0]);
        assert!(parse_box_line("1,2,3").is_none());
        assert!(parse_box_line("1,2,3,x").is_none());
        assert!(parse_box_line("1,2,3,NaN").is_none());
    }

    #[test]
    fn bad_line_is_named() {
        let e = parse_boxes("1,2,3,4\nnope\n", Path::new("r.txt")).unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
    }

    #[test]
    fn sequence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scene = SyntheticScene { seed: 4, config: SceneConfig { frame_width: 48, frame_height: 40, min_size: 8.0, max_size: 12.0, ..Default::default() } };
        let (frames, boxes) = generate_sequence(&scene, 3).unwrap();
        write_sequence(dir.path(), &frames, &boxes).unwrap();
        let s = read_sequence(dir.path()).unwrap();
        assert_eq!(s.frames.len(), 3);
        assert_eq!((s.frames[0].height(), s.frames[0].width()), (40, 48));
        for (a, b) in s.groundtruth.iter().zip(&boxes) {
            assert_eq!(a.xywh(), b.xywh());
        }
        // 8-bit storage
        for (a, b) in s.frames[2].data().iter().zip(frames[2].data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn empty_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_sequence(dir.path()).is_err());
    }

    proptest! {
        #[test]
        fn results_parse_back_exactly(v in prop::collection::vec((-1e4f64..1e4, -1e4f64..1e4, 0.0f64..1e3, 0.0f64..1e3), 0..20)) {
            let boxes: Vec<BBox> = v.iter().map(|&(x, y, w, h)| BBox::from_xywh(x, y, w, h)).collect();
            let back = parse_boxes(&format_boxes(&boxes), Path::new("r")).unwrap();
            prop_assert_eq!(back.len(), boxes.len());
            for (a, b) in back.iter().zip(&boxes) {
                prop_assert_eq!(a.xywh(), b.xywh());
            }
        }
    }
}
