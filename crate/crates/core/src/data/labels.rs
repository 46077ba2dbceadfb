//! Per-frame label files: one `frame_index,valence,arousal` line per frame.
//!
//! Frames whose valence and arousal are both the sentinel `-5` are
//! unannotated and dropped. Blank lines and lines starting with `#` are
//! ignored.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const UNANNOTATED: f64 = -5.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameLabel {
    pub frame: usize,
    pub valence: f64,
    pub arousal: f64,
}

pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<FrameLabel>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, found {}", fields.len())));
        }
        let frame = fields[0]
            .parse::<usize>()
            .map_err(|e| parse_err(format!("frame index {:?}: {e}", fields[0])))?;
        let mut vals = [0.0; 2];
        for (v, f) in vals.iter_mut().zip(&fields[1..]) {
            *v = f
                .parse::<f64>()
                .map_err(|e| parse_err(format!("label {f:?}: {e}")))?;
        }
        let [valence, arousal] = vals;
        if valence == UNANNOTATED && arousal == UNANNOTATED {
            continue;
        }
        for v in vals {
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::LabelRange {
                    path: path.to_path_buf(),
                    line: line_no,
                    value: v,
                });
            }
        }
        out.push(FrameLabel {
            frame,
            valence,
            arousal,
        });
    }
    Ok(out)
}

pub fn read_labels(path: &Path) -> Result<Vec<FrameLabel>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text, path)
}

pub fn format_labels(labels: &[FrameLabel]) -> String {
    let mut s = String::with_capacity(labels.len() * 40);
    for l in labels {
        s.push_str(&format!("{},{},{}\n", l.frame, l.valence, l.arousal));
    }
    s
}

pub fn write_labels(path: &Path, labels: &[FrameLabel]) -> Result<()> {
    fs::write(path, format_labels(labels)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> Result<Vec<FrameLabel>> {
        parse_labels(s, Path::new("l.csv"))
    }

    #[test]
    fn parses_and_drops_sentinel() {
        let l = p("0,0.5,-0.25\n3,-5,-5\n").unwrap();
        assert_eq!(
            l,
            vec![FrameLabel {
                frame: 0,
                valence: 0.5,
                arousal: -0.25
            }]
        );
    }

    #[test]
    fn range_error() {
        assert!(matches!(p("4,1.2,0"), Err(Error::LabelRange { line: 1, .. })));
    }

    #[test]
    fn malformed_line_has_number() {
        let err = p("0,0,0\n1,abc,0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(p("0,0").is_err());
    }

    #[test]
    fn float_text_round_trips() {
        let labels = vec![FrameLabel {
            frame: 2,
            valence: 0.1 + 0.2,
            arousal: -1.0 / 3.0,
        }];
        assert_eq!(p(&format_labels(&labels)).unwrap(), labels);
    }
}
