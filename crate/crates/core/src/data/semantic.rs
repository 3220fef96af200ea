//! Four-channel semantic scene maps.
//!
//! File layout: the 8-byte magic `SEMMAP01`, a JSON header
//! `{"frame", "width", "height", "channels": 4}` terminated by a newline, then
//! `4·H·W` bytes in channel-major order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SEMMAP01";
pub const NUM_CHANNELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Persons,
    Bikes,
    Vehicles,
    Static,
}

impl Channel {
    pub const ALL: [Channel; 4] = [Channel::Persons, Channel::Bikes, Channel::Vehicles, Channel::Static];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Per-pixel class ids from a segmenter (or the synthetic renderer).
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn filled(width: usize, height: usize, label: u8) -> Self {
        Self {
            width,
            height,
            labels: vec![label; width * height],
        }
    }

    /// Paints the half-open pixel rectangle `[x0, x1) × [y0, y1)`, clipped to the map.
    pub fn fill_rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, label: u8) {
        let cx = |v: f64| (v.round().max(0.0) as usize).min(self.width);
        let cy = |v: f64| (v.round().max(0.0) as usize).min(self.height);
        let (xa, xb, ya, yb) = (cx(x0), cx(x1), cy(y0), cy(y1));
        for y in ya..yb {
            self.labels[y * self.width + xa..y * self.width + xb].fill(label);
        }
    }
}

/// Binary occupancy per channel, channel-major `[4][H][W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticMap {
    pub frame: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl SemanticMap {
    pub fn empty(frame: usize, width: usize, height: usize) -> Self {
        Self {
            frame,
            width,
            height,
            data: vec![0; NUM_CHANNELS * width * height],
        }
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> u8 {
        self.data[(channel * self.height + y) * self.width + x]
    }

    pub fn channel(&self, channel: Channel) -> &[u8] {
        let n = self.width * self.height;
        &self.data[channel.index() * n..(channel.index() + 1) * n]
    }

    /// Nearest-neighbour resampling (equivalent to resampling the label map).
    pub fn resize_nearest(&self, height: usize, width: usize) -> SemanticMap {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = SemanticMap::empty(self.frame, width, height);
        for c in 0..NUM_CHANNELS {
            for y in 0..height {
                let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64) as usize;
                let sy = sy.min(self.height - 1);
                for x in 0..width {
                    let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64) as usize;
                    let sx = sx.min(self.width - 1);
                    out.data[(c * height + y) * width + x] = self.get(c, sy, sx);
                }
            }
        }
        out
    }
}

/// Maps segmentation label ids to channels. Ids not listed go to the static channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassGrouping {
    pub groups: BTreeMap<u8, Channel>,
}

/// Label ids used by the synthetic renderer, following Cityscapes numbering.
pub mod labels {
    pub const ROAD: u8 = 7;
    pub const SIDEWALK: u8 = 8;
    pub const BUILDING: u8 = 11;
    pub const VEGETATION: u8 = 21;
    pub const SKY: u8 = 23;
    pub const PERSON: u8 = 24;
    pub const RIDER: u8 = 25;
    pub const CAR: u8 = 26;
    pub const TRUCK: u8 = 27;
    pub const BUS: u8 = 28;
    pub const MOTORCYCLE: u8 = 32;
    pub const BICYCLE: u8 = 33;
}

impl Default for ClassGrouping {
    fn default() -> Self {
        use labels::*;
        let mut groups = BTreeMap::new();
        groups.insert(PERSON, Channel::Persons);
        groups.insert(RIDER, Channel::Bikes);
        groups.insert(BICYCLE, Channel::Bikes);
        groups.insert(MOTORCYCLE, Channel::Bikes);
        for id in [CAR, TRUCK, BUS, 29, 30, 31] {
            groups.insert(id, Channel::Vehicles);
        }
        for id in [ROAD, SIDEWALK, 9, 10, BUILDING, 12, 13, 17, 19, 20, VEGETATION, 22, SKY] {
            groups.insert(id, Channel::Static);
        }
        Self { groups }
    }
}

impl ClassGrouping {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn channel_of(&self, label: u8) -> Option<Channel> {
        self.groups.get(&label).copied()
    }
}

/// Splits a label map into the four binary channels.
///
/// Returns the map and the number of pixels whose label was not in `grouping`
/// (those are assigned to the static channel).
pub fn channelize(labels: &LabelMap, grouping: &ClassGrouping, frame: usize) -> (SemanticMap, usize) {
    let mut map = SemanticMap::empty(frame, labels.width, labels.height);
    let n = labels.width * labels.height;
    let mut unknown = 0;
    for (p, &label) in labels.labels.iter().enumerate() {
        let channel = grouping.channel_of(label).unwrap_or_else(|| {
            unknown += 1;
            Channel::Static
        });
        map.data[channel.index() * n + p] = 1;
    }
    (map, unknown)
}

#[derive(Serialize, Deserialize)]
struct Header {
    frame: usize,
    width: usize,
    height: usize,
    channels: usize,
}

pub fn encode_semantic_map(map: &SemanticMap) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(64 + map.data.len());
    out.extend_from_slice(MAGIC);
    serde_json::to_writer(
        &mut out,
        &Header {
            frame: map.frame,
            width: map.width,
            height: map.height,
            channels: NUM_CHANNELS,
        },
    )?;
    out.push(b'\n');
    out.extend_from_slice(&map.data);
    Ok(out)
}

pub fn decode_semantic_map(bytes: &[u8]) -> Result<SemanticMap> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not a semantic map (bad magic)".into()));
    }
    let rest = &bytes[MAGIC.len()..];
    let mut stream = serde_json::Deserializer::from_slice(rest).into_iter::<Header>();
    let header = stream
        .next()
        .ok_or_else(|| Error::Format("missing semantic map header".into()))??;
    let mut offset = stream.byte_offset();
    if rest.get(offset) == Some(&b'\n') {
        offset += 1;
    }
    if header.channels != NUM_CHANNELS {
        return Err(Error::Format(format!("expected 4 channels, got {}", header.channels)));
    }
    let payload = &rest[offset..];
    let expected = NUM_CHANNELS * header.width * header.height;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "semantic map payload has {} bytes, expected {expected}",
            payload.len()
        )));
    }
    Ok(SemanticMap {
        frame: header.frame,
        width: header.width,
        height: header.height,
        data: payload.to_vec(),
    })
}

pub fn write_semantic_map(path: &Path, map: &SemanticMap) -> Result<()> {
    let bytes = encode_semantic_map(map)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_semantic_map(path: &Path) -> Result<SemanticMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_semantic_map(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_road_is_static_only() {
        let lm = LabelMap::filled(8, 6, labels::ROAD);
        let (map, unknown) = channelize(&lm, &ClassGrouping::default(), 0);
        assert_eq!(unknown, 0);
        assert!(map.channel(Channel::Static).iter().all(|&v| v == 1));
        for c in [Channel::Persons, Channel::Bikes, Channel::Vehicles] {
            assert!(map.channel(c).iter().all(|&v| v == 0));
        }
    }

    #[test]
    fn person_blob_lands_in_persons() {
        let mut lm = LabelMap::filled(10, 10, labels::SIDEWALK);
        lm.fill_rect(2.0, 3.0, 5.0, 8.0, labels::PERSON);
        let (map, _) = channelize(&lm, &ClassGrouping::default(), 0);
        for y in 0..10 {
            for x in 0..10 {
                let inside = (2..5).contains(&x) && (3..8).contains(&y);
                assert_eq!(map.get(0, y, x), u8::from(inside));
                if inside {
                    assert_eq!(map.get(1, y, x) + map.get(2, y, x) + map.get(3, y, x), 0);
                }
            }
        }
    }

    #[test]
    fn mixed_map_is_one_hot_everywhere() {
        let mut lm = LabelMap::filled(16, 12, labels::ROAD);
        lm.fill_rect(0.0, 0.0, 16.0, 4.0, labels::BUILDING);
        lm.fill_rect(3.0, 5.0, 9.0, 9.0, labels::CAR);
        lm.fill_rect(10.0, 6.0, 12.0, 11.0, labels::BICYCLE);
        lm.fill_rect(12.0, 6.0, 14.0, 11.0, labels::PERSON);
        lm.fill_rect(0.0, 11.0, 2.0, 12.0, 200);
        let (map, unknown) = channelize(&lm, &ClassGrouping::default(), 0);
        assert_eq!(unknown, 2);
        for y in 0..12 {
            for x in 0..16 {
                let total: u8 = (0..4).map(|c| map.get(c, y, x)).sum();
                assert_eq!(total, 1);
            }
        }
    }

    #[test]
    fn file_round_trip() {
        let mut lm = LabelMap::filled(7, 5, labels::ROAD);
        lm.fill_rect(1.0, 1.0, 3.0, 4.0, labels::PERSON);
        let (map, _) = channelize(&lm, &ClassGrouping::default(), 42);
        let bytes = encode_semantic_map(&map).unwrap();
        assert_eq!(&bytes[..8], b"SEMMAP01");
        assert_eq!(decode_semantic_map(&bytes).unwrap(), map);
        assert!(decode_semantic_map(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn grouping_json() {
        let g = ClassGrouping::from_json(r#"{"24": "persons", "33": "bikes", "7": "static"}"#).unwrap();
        assert_eq!(g.channel_of(33), Some(Channel::Bikes));
        assert_eq!(g.channel_of(26), None);
        assert!(ClassGrouping::from_json(r#"{"24": "people"}"#).is_err());
    }

    #[test]
    fn resize_keeps_blocks() {
        let mut lm = LabelMap::filled(8, 8, labels::ROAD);
        lm.fill_rect(0.0, 0.0, 4.0, 4.0, labels::PERSON);
        let (map, _) = channelize(&lm, &ClassGrouping::default(), 0);
        let small = map.resize_nearest(4, 4);
        assert_eq!(small.get(0, 0, 0), 1);
        assert_eq!(small.get(0, 3, 3), 0);
        assert_eq!(small.get(3, 3, 3), 1);
    }
}
