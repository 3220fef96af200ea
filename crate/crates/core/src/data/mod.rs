//! Annotation ingestion, input derivation, windowing and synthetic scenarios.

pub mod corpus;
mod grid;
pub mod semantic;
pub mod synthetic;
mod track;
mod window;

pub use corpus::{load_corpus, write_corpus, Corpus, LengthStats, Manifest};
pub use grid::GridSpec;
pub use semantic::{channelize, Channel, ClassGrouping, LabelMap, SemanticMap};
pub use synthetic::{generate_synthetic, Profile, ScenarioConfig, SyntheticCorpus};
pub use track::{load_annotations, parse_tracks, write_tracks, EgoMotion, Frame, PixelBox, TrackSequence};
pub use window::{compute_velocity, denormalize_box, normalize_box, sample_windows, window_starts, Sample, WindowSpec};
