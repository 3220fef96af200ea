//! Controllable synthetic driving scenarios.
//!
//! Each track is one pedestrian seen from a moving vehicle. The pedestrian
//! walks with piecewise-constant image-plane velocity; crossing pedestrians
//! start moving laterally toward the image center between one and two seconds
//! before their labelled crossing frame. Ego-motion follows smooth random
//! curves, and forward motion scales every box about the focus of expansion
//! by `1 / (1 − v_z·Δt·κ)` per frame. Scenes are rendered as label maps
//! (static layout, distractor agents and the pedestrian) and split into
//! semantic channels.
//!
//! Every track draws from its own RNG stream, so the output depends only on
//! `(seed, track index)` and generation parallelizes over tracks.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::semantic::{channelize, labels, ClassGrouping, LabelMap, SemanticMap};
use super::{window_starts, EgoMotion, Frame, PixelBox, Sample, TrackSequence, WindowSpec};
use crate::error::{Error, Result};

/// Dataset profile the synthetic corpus imitates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Pie,
    Jaad,
}

impl Profile {
    /// Share of crossing sequences: 995 / 3980 for PIE, 807 / 3955 for JAAD.
    pub fn crossing_ratio(self) -> f64 {
        match self {
            Profile::Pie => 995.0 / 3980.0,
            Profile::Jaad => 807.0 / 3955.0,
        }
    }

    pub fn trajectory_weight(self) -> f64 {
        match self {
            Profile::Pie => 0.6,
            Profile::Jaad => 0.5,
        }
    }

    pub fn learning_rate(self) -> f64 {
        match self {
            Profile::Pie => 1e-4,
            Profile::Jaad => 5e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub num_tracks: usize,
    pub fps: f64,
    pub image_size: [u32; 2],
    /// `[height, width]` of rendered semantic maps.
    pub map_size: [usize; 2],
    /// Inclusive range of track lengths in frames. Crossing tracks are lengthened
    /// when needed so the event and the prediction horizon fit.
    pub track_len: [usize; 2],
    pub crossing_ratio: f64,
    /// Crossing pedestrians meet a slow ego-vehicle; others a faster one.
    pub speed_dependent_crossing: bool,
    /// Ego speed range in km/h.
    pub ego_speed_kmh: [f64; 2],
    /// Largest ego lateral velocity in m/s.
    pub ego_lateral: f64,
    /// Largest wandering speed of a pedestrian in px/frame.
    pub ped_speed: f64,
    /// Lateral speed range of a crossing pedestrian in px/frame.
    pub crossing_speed: [f64; 2],
    /// Depth proxy κ in 1/m.
    pub depth_proxy: f64,
    /// Image shift in px per (m/s) of lateral ego velocity, per frame.
    pub lateral_px: f64,
    pub max_distractors: usize,
    pub window: WindowSpec,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            num_tracks: 64,
            fps: 30.0,
            image_size: [1920, 1080],
            map_size: [72, 128],
            track_len: [90, 180],
            crossing_ratio: Profile::Pie.crossing_ratio(),
            speed_dependent_crossing: false,
            ego_speed_kmh: [0.0, 50.0],
            ego_lateral: 0.3,
            ped_speed: 1.5,
            crossing_speed: [4.0, 7.0],
            depth_proxy: 0.02,
            lateral_px: 3.0,
            max_distractors: 4,
            window: WindowSpec::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn for_profile(profile: Profile) -> Self {
        Self {
            crossing_ratio: profile.crossing_ratio(),
            ..Self::default()
        }
    }

    /// Frame offset of the crossing event from the track start: late enough
    /// that a window with the largest allowed time to event fits.
    fn min_event_offset(&self) -> usize {
        self.window.obs_len - 1 + (self.window.tte_seconds[1] * self.fps).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        if !(self.fps > 0.0) {
            return Err(Error::Config("fps must be positive".into()));
        }
        if self.track_len[0] > self.track_len[1] {
            return Err(Error::Config("track_len range is inverted".into()));
        }
        if self.window.window_len() > self.track_len[0] {
            return Err(Error::Config(format!(
                "observation + prediction ({} frames) is longer than the shortest episode ({} frames)",
                self.window.window_len(),
                self.track_len[0]
            )));
        }
        if !(0.0..=1.0).contains(&self.crossing_ratio) {
            return Err(Error::Config("crossing_ratio must lie in [0, 1]".into()));
        }
        if self.map_size[0] == 0 || self.map_size[1] == 0 {
            return Err(Error::Config("map_size must be positive".into()));
        }
        if self.ego_speed_kmh[0] > self.ego_speed_kmh[1] || self.ego_speed_kmh[0] < 0.0 {
            return Err(Error::Config("invalid ego speed range".into()));
        }
        if self.crossing_speed[0] > self.crossing_speed[1] {
            return Err(Error::Config("invalid crossing speed range".into()));
        }
        let dt = 1.0 / self.fps;
        if self.ego_speed_kmh[1] / 3.6 * dt * self.depth_proxy >= 0.5 {
            return Err(Error::Config("depth proxy too large for the ego speed range".into()));
        }
        Ok(())
    }
}

/// Generated tracks and the semantic maps of every frame that ends an observation window.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub tracks: Vec<TrackSequence>,
    pub maps: BTreeMap<String, SemanticMap>,
}

#[derive(Clone, Copy, Debug)]
struct Distractor {
    label: u8,
    center: (f64, f64),
    size: (f64, f64),
}

struct Scene {
    track: TrackSequence,
    distractors: Vec<Vec<Distractor>>,
}

/// Generates `config.num_tracks` tracks deterministically from `seed`.
pub fn generate_synthetic(config: &ScenarioConfig, seed: u64) -> Result<SyntheticCorpus> {
    config.validate()?;
    let n = config.num_tracks;
    let n_cross = (config.crossing_ratio * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    order.shuffle(&mut rng);
    let mut crossing = vec![false; n];
    for &i in &order[..n_cross] {
        crossing[i] = true;
    }

    let grouping = ClassGrouping::default();
    let per_track: Vec<(TrackSequence, Vec<(String, SemanticMap)>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let scene = generate_track(config, i, crossing[i], &mut rng);
            let maps = window_starts(&scene.track, &config.window)
                .into_iter()
                .map(|start| {
                    let pos = start + config.window.obs_len - 1;
                    let frame = scene.track.frames[pos].frame_index;
                    let labels = render_labels(config, &scene, pos);
                    let (map, _) = channelize(&labels, &grouping, frame);
                    (Sample::map_ref(&scene.track.ped_id, frame), map)
                })
                .collect();
            (scene.track, maps)
        })
        .collect();

    let mut tracks = Vec::with_capacity(n);
    let mut maps = BTreeMap::new();
    for (t, m) in per_track {
        tracks.push(t);
        maps.extend(m);
    }
    Ok(SyntheticCorpus { tracks, maps })
}

/// Smooth curve through random control points every `period` frames (cosine interpolation).
fn smooth_curve(rng: &mut ChaCha8Rng, len: usize, period: usize, lo: f64, hi: f64) -> Vec<f64> {
    let knots: Vec<f64> = (0..=len / period + 1)
        .map(|_| if hi > lo { rng.gen_range(lo..=hi) } else { lo })
        .collect();
    (0..len)
        .map(|f| {
            let k = f / period;
            let u = (f % period) as f64 / period as f64;
            let w = (1.0 - (u * std::f64::consts::PI).cos()) / 2.0;
            knots[k] * (1.0 - w) + knots[k + 1] * w
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn generate_track(config: &ScenarioConfig, index: usize, crossing: bool, rng: &mut ChaCha8Rng) -> Scene {
    let (w, h) = (config.image_size[0] as f64, config.image_size[1] as f64);
    let dt = 1.0 / config.fps;
    let fps_frames = config.fps.round() as usize;

    let mut len = rng.gen_range(config.track_len[0]..=config.track_len[1]);
    let event = if crossing {
        let e = config.min_event_offset() + rng.gen_range(0..config.window.stride());
        len = len.max(e + config.window.pred_len + 10);
        Some(e)
    } else {
        None
    };
    // Crossing starts 1-2 s before the labelled event.
    let lead = rng.gen_range(fps_frames..=2 * fps_frames);
    let cross_speed = uniform(rng, config.crossing_speed[0], config.crossing_speed[1]);
    let mut cross_dir: Option<f64> = None;

    let [s_lo, s_hi] = config.ego_speed_kmh;
    let (speed_lo, speed_hi) = if config.speed_dependent_crossing {
        let mid = s_lo + 0.4 * (s_hi - s_lo);
        if crossing {
            (s_lo, mid)
        } else {
            (mid, s_hi)
        }
    } else {
        (s_lo, s_hi)
    };
    let speed = smooth_curve(rng, len, fps_frames, speed_lo, speed_hi);
    let lateral = smooth_curve(rng, len, fps_frames, -config.ego_lateral, config.ego_lateral);
    let ego: Vec<EgoMotion> = speed
        .iter()
        .zip(&lateral)
        .map(|(&s, &vx)| [s, vx, s / 3.6])
        .collect();

    let side_left = rng.gen_bool(0.5);
    let mut cx = if side_left {
        uniform(rng, 0.08 * w, 0.35 * w)
    } else {
        uniform(rng, 0.65 * w, 0.92 * w)
    };
    let foot = uniform(rng, 0.6 * h, 0.85 * h);
    let mut height = (foot - 0.45 * h) / (0.4 * h) * 0.3 * h + 0.06 * h;
    let mut cy = foot - height / 2.0;
    let foe = (w / 2.0, 0.45 * h);

    let n_distractors = if config.max_distractors == 0 {
        0
    } else {
        rng.gen_range(0..=config.max_distractors)
    };
    let mut distractors: Vec<Distractor> = (0..n_distractors)
        .map(|_| {
            let label = *[labels::CAR, labels::CAR, labels::PERSON, labels::BICYCLE, labels::TRUCK]
                .choose(rng)
                .expect("non-empty");
            let y = uniform(rng, 0.55 * h, 0.9 * h);
            let scale = (y - 0.45 * h) / (0.45 * h);
            let size = match label {
                labels::PERSON => (0.03 * w * scale + 8.0, 0.2 * h * scale + 20.0),
                labels::BICYCLE => (0.06 * w * scale + 10.0, 0.15 * h * scale + 15.0),
                _ => (0.2 * w * scale + 30.0, 0.15 * h * scale + 20.0),
            };
            Distractor {
                label,
                center: (uniform(rng, 0.05 * w, 0.95 * w), y - size.1 / 2.0),
                size,
            }
        })
        .collect();

    let mut vel = (0.0, 0.0);
    let mut next_change = 0;
    let mut frames = Vec::with_capacity(len);
    let mut distractor_frames = Vec::with_capacity(len);
    for f in 0..len {
        if f > 0 {
            // Ego-induced expansion about the focus of expansion, plus lateral shift.
            let [_, vx, vz] = ego[f];
            let k = 1.0 / (1.0 - vz * dt * config.depth_proxy);
            let shift = -vx * config.lateral_px;
            let warp = |x: f64, y: f64| (foe.0 + (x - foe.0) * k + shift, foe.1 + (y - foe.1) * k);
            (cx, cy) = warp(cx, cy);
            height *= k;
            for d in &mut distractors {
                d.center = warp(d.center.0, d.center.1);
                d.size = (d.size.0 * k, d.size.1 * k);
            }
        }
        if f == next_change {
            vel = (
                uniform(rng, -config.ped_speed, config.ped_speed),
                uniform(rng, -0.2 * config.ped_speed, 0.2 * config.ped_speed),
            );
            next_change = f + rng.gen_range(20..=40);
        }
        let mut step = vel;
        if let Some(e) = event {
            if f + lead >= e {
                let dir = *cross_dir.get_or_insert(if cx < w / 2.0 { 1.0 } else { -1.0 });
                step = (dir * cross_speed, vel.1);
            }
        }
        if f > 0 {
            cx += step.0;
            cy += step.1;
        }
        height = height.clamp(0.03 * h, 0.6 * h);
        let bw = 0.42 * height;
        cx = cx.clamp(bw / 2.0 + 1.0, w - bw / 2.0 - 1.0);
        cy = cy.clamp(height / 2.0 + 1.0, h - height / 2.0 - 1.0);
        let bbox: PixelBox = [cx - bw / 2.0, cy - height / 2.0, cx + bw / 2.0, cy + height / 2.0];
        frames.push(Frame {
            frame_index: f,
            bbox,
            crossing: u8::from(event.is_some_and(|e| f >= e)),
            ego: ego[f],
        });
        distractor_frames.push(distractors.clone());
    }

    Scene {
        track: TrackSequence {
            ped_id: format!("syn_{index:05}"),
            fps: config.fps,
            image_size: config.image_size,
            frames,
        },
        distractors: distractor_frames,
    }
}

fn render_labels(config: &ScenarioConfig, scene: &Scene, pos: usize) -> LabelMap {
    let [mh, mw] = config.map_size;
    let (sx, sy) = (mw as f64 / config.image_size[0] as f64, mh as f64 / config.image_size[1] as f64);
    let mut map = LabelMap::filled(mw, mh, labels::BUILDING);
    let horizon = 0.45 * mh as f64;
    map.fill_rect(0.0, 0.0, mw as f64, 0.2 * mh as f64, labels::SKY);
    map.fill_rect(0.0, horizon, mw as f64, mh as f64, labels::SIDEWALK);
    for y in (horizon.round() as usize)..mh {
        let depth = (y as f64 - horizon) / (mh as f64 - horizon);
        let half = (0.05 + 0.45 * depth) * mw as f64;
        map.fill_rect(mw as f64 / 2.0 - half, y as f64, mw as f64 / 2.0 + half, y as f64 + 1.0, labels::ROAD);
    }
    for d in &scene.distractors[pos] {
        let (x0, x1) = (d.center.0 - d.size.0 / 2.0, d.center.0 + d.size.0 / 2.0);
        let (y0, y1) = (d.center.1 - d.size.1 / 2.0, d.center.1 + d.size.1 / 2.0);
        map.fill_rect(x0 * sx, y0 * sy, x1 * sx, y1 * sy, d.label);
    }
    let b = scene.track.frames[pos].bbox;
    map.fill_rect(b[0] * sx, b[1] * sy, b[2] * sx, b[3] * sy, labels::PERSON);
    map
}
