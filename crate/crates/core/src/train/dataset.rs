use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{sample_windows, GridSpec, Sample, SemanticMap, TrackSequence, WindowSpec};
use crate::error::Result;
use crate::model::{ModelConfig, SampleInputs};
use crate::objectives::Targets;

/// Samples with their model-ready inputs and targets.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub inputs: Vec<SampleInputs>,
    pub targets: Vec<Targets>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Prepares already-windowed samples. Maps are looked up by each sample's map reference.
    pub fn from_samples(samples: Vec<Sample>, maps: &BTreeMap<String, SemanticMap>, config: &ModelConfig) -> Result<Self> {
        let inputs = samples
            .par_iter()
            .map(|s| SampleInputs::new(s, maps.get(&s.semantic_map_ref), config))
            .collect::<Result<Vec<_>>>()?;
        let targets = samples.iter().map(Targets::from_sample).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            samples,
            inputs,
            targets,
        })
    }

    /// Windows every track and prepares the resulting samples.
    pub fn from_tracks(
        tracks: &[TrackSequence],
        maps: &BTreeMap<String, SemanticMap>,
        window: &WindowSpec,
        grid: &GridSpec,
        config: &ModelConfig,
    ) -> Result<Self> {
        let samples = tracks.iter().flat_map(|t| sample_windows(t, window, grid)).collect();
        Self::from_samples(samples, maps, config)
    }

    /// The samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: indices.iter().map(|&i| self.targets[i].clone()).collect(),
        }
    }

    /// Indices of the first `per_class` crossing samples followed by the first `per_class` others.
    pub fn balanced_indices(&self, per_class: usize) -> Vec<usize> {
        let pick = |label: u8| {
            (0..self.len())
                .filter(move |&i| self.samples[i].crossing_label == label)
                .take(per_class)
        };
        pick(1).chain(pick(0)).collect()
    }

    pub fn crossing_count(&self) -> usize {
        self.samples.iter().filter(|s| s.crossing_label == 1).count()
    }
}

/// Splits tracks by pedestrian id into `(train, validation)`; the validation share
/// is `round(fraction · ids)`, at least one id when there are two or more.
pub fn split_by_track(tracks: &[TrackSequence], fraction: f64, seed: u64) -> (Vec<TrackSequence>, Vec<TrackSequence>) {
    let ids: BTreeSet<&str> = tracks.iter().map(|t| t.ped_id.as_str()).collect();
    let mut ids: Vec<&str> = ids.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    ids.shuffle(&mut rng);
    let mut n_val = (fraction * ids.len() as f64).round() as usize;
    if fraction > 0.0 && n_val == 0 && ids.len() >= 2 {
        n_val = 1;
    }
    let val: BTreeSet<&str> = ids[..n_val.min(ids.len())].iter().copied().collect();
    tracks
        .iter()
        .cloned()
        .partition(|t| !val.contains(t.ped_id.as_str()))
}
