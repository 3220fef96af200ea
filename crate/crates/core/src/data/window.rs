use serde::{Deserialize, Serialize};

use super::{EgoMotion, GridSpec, PixelBox, TrackSequence};
use crate::error::{Error, Result};

/// One training or evaluation instance cut from a track.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub ped_id: String,
    /// Frame index of the last observed step.
    pub obs_end_frame: usize,
    pub image_size: [u32; 2],
    /// Normalized boxes, `o` rows.
    pub obs_boxes: Vec<[f64; 4]>,
    pub obs_velocities: Vec<[f64; 4]>,
    pub obs_cells: Vec<usize>,
    /// Ego-motion over observation and prediction, `o + τ` rows.
    pub ego: Vec<EgoMotion>,
    /// Normalized boxes, `τ` rows.
    pub future_boxes: Vec<[f64; 4]>,
    pub crossing_label: u8,
    pub final_cell: usize,
    pub semantic_map_ref: String,
}

impl Sample {
    pub fn obs_len(&self) -> usize {
        self.obs_boxes.len()
    }

    pub fn pred_len(&self) -> usize {
        self.future_boxes.len()
    }

    /// Identifier of the scene frame at the last observed step.
    pub fn map_ref(ped_id: &str, frame: usize) -> String {
        format!("{ped_id}/{frame:06}")
    }
}

/// Windowing parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub obs_len: usize,
    pub pred_len: usize,
    /// Defaults to half the observation length, rounded up.
    #[serde(default)]
    pub stride: Option<usize>,
    /// Accepted time to event in seconds for crossing tracks.
    pub tte_seconds: [f64; 2],
}

impl Default for WindowSpec {
    /// 0.5 s observed and 1 s predicted at 30 fps.
    fn default() -> Self {
        Self {
            obs_len: 15,
            pred_len: 30,
            stride: None,
            tte_seconds: [1.0, 2.0],
        }
    }
}

impl WindowSpec {
    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(self.obs_len.div_ceil(2)).max(1)
    }

    pub fn window_len(&self) -> usize {
        self.obs_len + self.pred_len
    }

    pub fn validate(&self) -> Result<()> {
        if self.obs_len == 0 || self.pred_len == 0 {
            return Err(Error::Config("observation and prediction lengths must be positive".into()));
        }
        if self.tte_seconds[0] > self.tte_seconds[1] || self.tte_seconds[0] < 0.0 {
            return Err(Error::Config("invalid time-to-event range".into()));
        }
        Ok(())
    }
}

/// Divides x by the width and y by the height, clamped to `[0, 1]`.
pub fn normalize_box(bbox: &PixelBox, image_size: [u32; 2]) -> Result<[f64; 4]> {
    if !(bbox[2] - bbox[0] > 0.0 && bbox[3] - bbox[1] > 0.0) {
        return Err(Error::Contract(format!("degenerate box {bbox:?}")));
    }
    let (w, h) = (image_size[0] as f64, image_size[1] as f64);
    Ok([
        (bbox[0] / w).clamp(0.0, 1.0),
        (bbox[1] / h).clamp(0.0, 1.0),
        (bbox[2] / w).clamp(0.0, 1.0),
        (bbox[3] / h).clamp(0.0, 1.0),
    ])
}

pub fn denormalize_box(bbox: &[f64; 4], image_size: [u32; 2]) -> PixelBox {
    let (w, h) = (image_size[0] as f64, image_size[1] as f64);
    [bbox[0] * w, bbox[1] * h, bbox[2] * w, bbox[3] * h]
}

/// Per-step difference of consecutive boxes; the first step is zero.
pub fn compute_velocity(boxes: &[[f64; 4]]) -> Vec<[f64; 4]> {
    let mut out = Vec::with_capacity(boxes.len());
    if boxes.is_empty() {
        return out;
    }
    out.push([0.0; 4]);
    for w in boxes.windows(2) {
        out.push(std::array::from_fn(|k| w[1][k] - w[0][k]));
    }
    out
}

/// Start positions (offsets into `track.frames`) of the windows kept for a track.
pub fn window_starts(track: &TrackSequence, spec: &WindowSpec) -> Vec<usize> {
    let len = spec.window_len();
    if track.len() < len {
        return Vec::new();
    }
    let event = track.crossing_event();
    let lo = (spec.tte_seconds[0] * track.fps).round() as i64;
    let hi = (spec.tte_seconds[1] * track.fps).round() as i64;
    (0..=track.len() - len)
        .step_by(spec.stride())
        .filter(|&start| match event {
            None => true,
            Some(e) => {
                let last_obs = track.frames[start + spec.obs_len - 1].frame_index as i64;
                let tte = e as i64 - last_obs;
                (lo..=hi).contains(&tte)
            }
        })
        .collect()
}

/// Cuts a track into samples. Windows containing a degenerate box are skipped with a warning.
pub fn sample_windows(track: &TrackSequence, spec: &WindowSpec, grid: &GridSpec) -> Vec<Sample> {
    let crossing = u8::from(track.is_crossing());
    window_starts(track, spec)
        .into_iter()
        .filter_map(|start| {
            let frames = &track.frames[start..start + spec.window_len()];
            let (obs, fut) = frames.split_at(spec.obs_len);
            let normalize = |f: &super::Frame| normalize_box(&f.bbox, track.image_size);
            let built = (|| -> Result<Sample> {
                let obs_boxes = obs.iter().map(normalize).collect::<Result<Vec<_>>>()?;
                let future_boxes = fut.iter().map(normalize).collect::<Result<Vec<_>>>()?;
                let obs_end = obs[obs.len() - 1].frame_index;
                Ok(Sample {
                    ped_id: track.ped_id.clone(),
                    obs_end_frame: obs_end,
                    image_size: track.image_size,
                    obs_velocities: compute_velocity(&obs_boxes),
                    obs_boxes,
                    obs_cells: obs.iter().map(|f| grid.discretize(&f.bbox)).collect(),
                    ego: frames.iter().map(|f| f.ego).collect(),
                    future_boxes,
                    crossing_label: crossing,
                    final_cell: grid.discretize(&fut[fut.len() - 1].bbox),
                    semantic_map_ref: Sample::map_ref(&track.ped_id, obs_end),
                })
            })();
            match built {
                Ok(s) => Some(s),
                Err(e) => {
                    log::warn!("{}: skipping window at offset {start}: {e}", track.ped_id);
                    None
                }
            }
        })
        .collect()
}
