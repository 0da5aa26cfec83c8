//! Tracker output: one `x,y,w,h,confidence` line per frame.

use std::fmt::Write as _;
use std::path::Path;

use crate::bbox::BBox;
use crate::error::{Error, Result};

pub fn results_text(boxes: &[BBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        let _ = writeln!(s, "{:.6},{:.6},{:.6},{:.6},{:.6}", b.x, b.y, b.w, b.h, b.confidence);
    }
    s
}

pub fn write_results(boxes: &[BBox], path: &Path) -> Result<()> {
    std::fs::write(path, results_text(boxes))?;
    Ok(())
}

/// Reads results; a line with four values gets confidence 1.
pub fn parse_results(text: &str, path: &Path) -> Result<Vec<BBox>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let s = line.trim();
        if s.is_empty() {
            continue;
        }
        let v: Vec<f64> = s
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| Error::Sequence {
                path: path.to_path_buf(),
                msg: format!("line {}: {e}", i + 1),
            })?;
        let b = match v.as_slice() {
            [x, y, w, h] => BBox::new(*x, *y, *w, *h),
            [x, y, w, h, c] => BBox::new(*x, *y, *w, *h).with_confidence(*c),
            _ => {
                return Err(Error::Sequence {
                    path: path.to_path_buf(),
                    msg: format!("line {}: expected 4 or 5 values, got {}", i + 1, v.len()),
                })
            }
        };
        out.push(b);
    }
    Ok(out)
}

pub fn read_results(path: &Path) -> Result<Vec<BBox>> {
    parse_results(&std::fs::read_to_string(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_track_is_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.txt");
        write_results(&[], &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "");
        assert!(read_results(&p).unwrap().is_empty());
    }

    #[test]
    fn six_decimals() {
        let s = results_text(&[BBox::new(1.0, 2.5, 3.0, 4.0).with_confidence(0.123_456_789)]);
        assert_eq!(s, "1.000000,2.500000,3.000000,4.000000,0.123457\n");
    }

    proptest! {
        #[test]
        fn round_trip_within_1e6(boxes in prop::collection::vec((-1e3..1e3f64, -1e3..1e3f64, 0.1..1e3f64, 0.1..1e3f64, 0.0..1.0f64), 0..30)) {
            let bs: Vec<BBox> = boxes.iter().map(|&(x, y, w, h, c)| BBox::new(x, y, w, h).with_confidence(c)).collect();
            let text = results_text(&bs);
            prop_assert_eq!(text.lines().count(), bs.len());
            let back = parse_results(&text, Path::new("r")).unwrap();
            for (a, b) in bs.iter().zip(&back) {
                for (u, v) in [(a.x, b.x), (a.y, b.y), (a.w, b.w), (a.h, b.h), (a.confidence, b.confidence)] {
                    prop_assert!((u - v).abs() <= 1e-6);
                }
            }
        }
    }
}
