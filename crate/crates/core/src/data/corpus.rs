//! Corpus directories: `tracks.jsonl`, `maps/<ped_id>/<frame>.semmap` and `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::semantic::{read_semantic_map, write_semantic_map};
use super::{load_annotations, sample_windows, write_tracks, GridSpec, Profile, ScenarioConfig, SemanticMap, TrackSequence};
use crate::error::{Error, Result};

pub const TRACKS_FILE: &str = "tracks.jsonl";
pub const MAPS_DIR: &str = "maps";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
}

/// Summary statistics written next to a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: Option<u64>,
    pub profile: Option<Profile>,
    pub scenario: Option<ScenarioConfig>,
    pub num_tracks: usize,
    pub crossing_tracks: usize,
    /// Share of tracks that contain a crossing event.
    pub crossing_ratio: f64,
    pub track_length: Option<LengthStats>,
    pub num_maps: usize,
    pub num_samples: usize,
    pub crossing_samples: usize,
    pub sample_crossing_ratio: f64,
}

impl Manifest {
    /// Statistics of `tracks` windowed with the scenario's window (or the default one) on `grid`.
    pub fn describe(
        tracks: &[TrackSequence],
        maps: &BTreeMap<String, SemanticMap>,
        scenario: Option<&ScenarioConfig>,
        grid: &GridSpec,
    ) -> Self {
        let window = scenario.map(|s| s.window).unwrap_or_default();
        let crossing_tracks = tracks.iter().filter(|t| t.is_crossing()).count();
        let lengths: Vec<usize> = tracks.iter().map(|t| t.len()).collect();
        let track_length = (!lengths.is_empty()).then(|| LengthStats {
            min: *lengths.iter().min().expect("non-empty"),
            max: *lengths.iter().max().expect("non-empty"),
            mean: lengths.iter().sum::<usize>() as f64 / lengths.len() as f64,
        });
        let samples: Vec<_> = tracks.iter().flat_map(|t| sample_windows(t, &window, grid)).collect();
        let crossing_samples = samples.iter().filter(|s| s.crossing_label == 1).count();
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self {
            seed: None,
            profile: None,
            scenario: scenario.cloned(),
            num_tracks: tracks.len(),
            crossing_tracks,
            crossing_ratio: ratio(crossing_tracks, tracks.len()),
            track_length,
            num_maps: maps.len(),
            num_samples: samples.len(),
            crossing_samples,
            sample_crossing_ratio: ratio(crossing_samples, samples.len()),
        }
    }
}

/// Tracks and scene maps read from, or destined for, a corpus directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub tracks: Vec<TrackSequence>,
    pub maps: BTreeMap<String, SemanticMap>,
    pub manifest: Option<Manifest>,
}

fn map_path(dir: &Path, map_ref: &str) -> PathBuf {
    dir.join(MAPS_DIR).join(format!("{map_ref}.semmap"))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes every file of the corpus; existing files with the same names are replaced.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    create_dir(dir)?;
    let tracks_path = dir.join(TRACKS_FILE);
    let file = fs::File::create(&tracks_path).map_err(|e| Error::io(&tracks_path, e))?;
    write_tracks(BufWriter::new(file), &corpus.tracks)?;
    create_dir(&dir.join(MAPS_DIR))?;
    for (map_ref, map) in &corpus.maps {
        let path = map_path(dir, map_ref);
        if let Some(parent) = path.parent() {
            create_dir(parent)?;
        }
        write_semantic_map(&path, map)?;
    }
    if let Some(manifest) = &corpus.manifest {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(manifest)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Reads a corpus directory. The map directory and manifest are optional.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    if !dir.is_dir() {
        return Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "corpus directory not found")));
    }
    let tracks = load_annotations(&dir.join(TRACKS_FILE))?;
    let mut maps = BTreeMap::new();
    let maps_dir = dir.join(MAPS_DIR);
    if maps_dir.is_dir() {
        let mut peds: Vec<_> = read_dir(&maps_dir)?.into_iter().filter(|p| p.is_dir()).collect();
        peds.sort();
        for ped_dir in peds {
            let ped = ped_dir.file_name().expect("entry name").to_string_lossy().into_owned();
            for path in read_dir(&ped_dir)? {
                if path.extension().and_then(|e| e.to_str()) != Some("semmap") {
                    continue;
                }
                let stem = path.file_stem().expect("file stem").to_string_lossy().into_owned();
                maps.insert(format!("{ped}/{stem}"), read_semantic_map(&path)?);
            }
        }
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = if manifest_path.is_file() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        Some(serde_json::from_str(&text)?)
    } else {
        None
    };
    Ok(Corpus { tracks, maps, manifest })
}

fn read_dir(path: &Path) -> Result<Vec<PathBuf>> {
    fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(path, e)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;

    fn small() -> ScenarioConfig {
        ScenarioConfig {
            num_tracks: 5,
            map_size: [12, 16],
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn round_trip() {
        let scenario = small();
        let generated = generate_synthetic(&scenario, 4).unwrap();
        let manifest = Manifest::describe(&generated.tracks, &generated.maps, Some(&scenario), &GridSpec::default());
        let corpus = Corpus {
            tracks: generated.tracks,
            maps: generated.maps,
            manifest: Some(manifest),
        };
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &corpus).unwrap();
        let back = load_corpus(dir.path()).unwrap();
        assert_eq!(back, corpus);
    }

    #[test]
    fn empty_corpus_has_valid_manifest() {
        let manifest = Manifest::describe(&[], &BTreeMap::new(), None, &GridSpec::default());
        assert_eq!(manifest.num_tracks, 0);
        assert_eq!(manifest.crossing_ratio, 0.0);
        assert!(manifest.track_length.is_none());
        let dir = tempfile::tempdir().unwrap();
        let corpus = Corpus {
            tracks: vec![],
            maps: BTreeMap::new(),
            manifest: Some(manifest),
        };
        write_corpus(dir.path(), &corpus).unwrap();
        assert_eq!(load_corpus(dir.path()).unwrap(), corpus);
    }

    #[test]
    fn missing_directory() {
        assert!(matches!(load_corpus(Path::new("/nonexistent/corpus")), Err(Error::Io { .. })));
    }
}
