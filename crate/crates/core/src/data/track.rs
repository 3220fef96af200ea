use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ego-vehicle motion at one frame: speed `s`, lateral `v_x`, longitudinal `v_z`.
pub type EgoMotion = [f64; 3];

/// Pixel box `(x1, y1, x2, y2)`.
pub type PixelBox = [f64; 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    #[serde(rename = "f")]
    pub frame_index: usize,
    #[serde(rename = "box")]
    pub bbox: PixelBox,
    #[serde(rename = "cross")]
    pub crossing: u8,
    pub ego: EgoMotion,
}

/// Per-frame annotations of one pedestrian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackSequence {
    pub ped_id: String,
    pub fps: f64,
    /// `[width, height]` in pixels.
    pub image_size: [u32; 2],
    pub frames: Vec<Frame>,
}

impl TrackSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// First frame index carrying a crossing label, if any.
    pub fn crossing_event(&self) -> Option<usize> {
        self.frames.iter().find(|f| f.crossing == 1).map(|f| f.frame_index)
    }

    pub fn is_crossing(&self) -> bool {
        self.crossing_event().is_some()
    }

    /// Clamps boxes to the image and checks every track invariant.
    pub fn validate(&mut self) -> std::result::Result<(), String> {
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(format!("fps must be positive, got {}", self.fps));
        }
        let [w, h] = self.image_size;
        if w == 0 || h == 0 {
            return Err("image_size must be positive".into());
        }
        if let Some(w) = self.frames.windows(2).find(|w| w[1].frame_index != w[0].frame_index + 1) {
            return Err(format!(
                "frame indices must be contiguous and increasing ({} follows {})",
                w[1].frame_index, w[0].frame_index
            ));
        }
        for f in self.frames.iter_mut() {
            let [x1, y1, x2, y2] = f.bbox;
            if !(x1 < x2 && y1 < y2) {
                return Err(format!("frame {}: box {:?} needs x1 < x2 and y1 < y2", f.frame_index, f.bbox));
            }
            f.bbox = [
                x1.clamp(0.0, w as f64),
                y1.clamp(0.0, h as f64),
                x2.clamp(0.0, w as f64),
                y2.clamp(0.0, h as f64),
            ];
            if !(f.bbox[0] < f.bbox[2] && f.bbox[1] < f.bbox[3]) {
                return Err(format!("frame {}: box lies outside the image", f.frame_index));
            }
            if f.crossing > 1 {
                return Err(format!("frame {}: cross must be 0 or 1", f.frame_index));
            }
            if f.ego.iter().any(|v| !v.is_finite()) {
                return Err(format!("frame {}: non-finite ego-motion", f.frame_index));
            }
        }
        Ok(())
    }
}

/// Parses JSON-Lines track annotations; `name` labels diagnostics.
pub fn parse_tracks<R: BufRead>(reader: R, name: &str) -> Result<Vec<TrackSequence>> {
    let mut tracks = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(name, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: name.to_string(),
            line: k + 1,
            message,
        };
        let mut track: TrackSequence = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        track.validate().map_err(parse_err)?;
        tracks.push(track);
    }
    Ok(tracks)
}

pub fn load_annotations(path: &Path) -> Result<Vec<TrackSequence>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_tracks(BufReader::new(file), &path.display().to_string())
}

pub fn write_tracks<W: Write>(mut w: W, tracks: &[TrackSequence]) -> Result<()> {
    for t in tracks {
        let line = serde_json::to_string(t)?;
        writeln!(w, "{line}").map_err(|e| Error::io("<tracks>", e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(frames: usize, first_box: [f64; 4]) -> String {
        let frames: Vec<String> = (0..frames)
            .map(|f| {
                let b = if f == 0 { first_box } else { [100.0, 100.0, 150.0, 250.0] };
                format!(r#"{{"f":{f},"box":[{},{},{},{}],"cross":0,"ego":[10.0,0.0,2.5]}}"#, b[0], b[1], b[2], b[3])
            })
            .collect();
        format!(r#"{{"ped_id":"p1","fps":30,"image_size":[1920,1080],"frames":[{}]}}"#, frames.join(","))
    }

    #[test]
    fn empty_input_gives_no_tracks() {
        assert!(parse_tracks("".as_bytes(), "t").unwrap().is_empty());
    }

    #[test]
    fn well_formed_track() {
        let text = line(90, [100.0, 100.0, 150.0, 250.0]);
        let tracks = parse_tracks(text.as_bytes(), "t").unwrap();
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].len(), 90);
        assert!(tracks[0].frames.windows(2).all(|w| w[1].frame_index == w[0].frame_index + 1));
    }

    #[test]
    fn inverted_box_is_rejected_with_line() {
        let text = format!("{}\n{}", line(3, [1.0, 1.0, 5.0, 5.0]), line(3, [50.0, 10.0, 20.0, 40.0]));
        let err = parse_tracks(text.as_bytes(), "t").unwrap_err();
        match err {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("x1 < x2"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_field_is_named() {
        let text = r#"{"ped_id":"p","fps":30,"frames":[]}"#;
        let err = parse_tracks(text.as_bytes(), "t").unwrap_err().to_string();
        assert!(err.contains("image_size") && err.contains(":1:"), "{err}");
    }

    #[test]
    fn gaps_are_rejected() {
        let text = r#"{"ped_id":"p","fps":30,"image_size":[100,100],"frames":[{"f":0,"box":[1,1,5,5],"cross":0,"ego":[0,0,0]},{"f":2,"box":[1,1,5,5],"cross":0,"ego":[0,0,0]}]}"#;
        assert!(parse_tracks(text.as_bytes(), "t").is_err());
    }
}
