//! Generate a synthetic driving corpus, cut it into samples and look at the crossing cue.

use pedformer::data::{generate_synthetic, sample_windows, GridSpec, Manifest, ScenarioConfig};

fn main() -> pedformer::Result<()> {
    let scenario = ScenarioConfig {
        num_tracks: 40,
        ..ScenarioConfig::default()
    };
    let corpus = generate_synthetic(&scenario, 11)?;
    let grid = GridSpec::default();
    let manifest = Manifest::describe(&corpus.tracks, &corpus.maps, Some(&scenario), &grid);
    println!(
        "{} tracks, {} crossing (ratio {:.3}); {} samples, {} crossing",
        manifest.num_tracks, manifest.crossing_tracks, manifest.crossing_ratio, manifest.num_samples, manifest.crossing_samples
    );

    // Lateral shift of the box center over the last second before the event, against the same span elsewhere.
    let fps = scenario.fps as usize;
    let center_x = |b: &[f64; 4]| (b[0] + b[2]) / 2.0;
    let (mut crossing, mut other) = (Vec::new(), Vec::new());
    for t in &corpus.tracks {
        match t.crossing_event() {
            Some(event) => {
                let pos = t.frames.iter().position(|f| f.frame_index == event).expect("event frame");
                let start = pos.saturating_sub(fps);
                crossing.push((center_x(&t.frames[pos].bbox) - center_x(&t.frames[start].bbox)).abs());
            }
            None => other.push((center_x(&t.frames[fps].bbox) - center_x(&t.frames[0].bbox)).abs()),
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    println!("mean lateral shift in px: crossing {:.1}, not crossing {:.1}", mean(&crossing), mean(&other));

    let first = &sample_windows(&corpus.tracks[0], &scenario.window, &grid)[0];
    println!(
        "sample {} @ {}: {} observed boxes, {} future boxes, cells {:?}, final cell {}, map {}",
        first.ped_id,
        first.obs_end_frame,
        first.obs_len(),
        first.pred_len(),
        first.obs_cells,
        first.final_cell,
        first.semantic_map_ref
    );
    Ok(())
}
