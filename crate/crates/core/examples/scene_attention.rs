//! Global attention of pedestrian dynamics over semantic scene patches.

use pedformer::data::{generate_synthetic, sample_windows, GridSpec, ScenarioConfig, WindowSpec};
use pedformer::model::{ModelConfig, SampleInputs, Saim};
use pedformer::nn::Builder;
use pedformer::tensor::{ParamStore, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> pedformer::Result<()> {
    let window = WindowSpec {
        obs_len: 8,
        pred_len: 8,
        ..WindowSpec::default()
    };
    let scenario = ScenarioConfig {
        num_tracks: 2,
        map_size: [24, 48],
        window,
        ..ScenarioConfig::default()
    };
    let corpus = generate_synthetic(&scenario, 2)?;
    let sample = &sample_windows(&corpus.tracks[0], &window, &GridSpec::default())[0];
    let config = ModelConfig::compact(8, 8);
    let inputs = SampleInputs::new(sample, corpus.maps.get(&sample.semantic_map_ref), &config)?;
    let patches = inputs.patches.as_ref().expect("scene patches");
    println!("{} patches of {} values", patches.shape()[0], patches.shape()[1]);

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let saim = Saim::new(&mut Builder::new(&mut store, &mut rng), &config.saim, 16, config.l2_recurrent)?;

    let tape = Tape::new();
    let xi = saim.embed_patches(&tape, &store, tape.constant(patches.clone()))?;
    let gamma = saim.scene_attention(&tape, &store, xi)?;
    let psi = saim.encode(&tape, &store, &inputs)?;
    let query = saim.dynamics().expect("dynamics encoder").forward(&tape, &store, &inputs)?;
    let (_, weights) = saim.global_attention(&tape, &store, gamma, query)?;
    let w = tape.value(weights);
    let w = w.data();
    let mut ranked: Vec<usize> = (0..w.len()).collect();
    ranked.sort_by(|&a, &b| w[b].total_cmp(&w[a]));
    println!("attention sums to {:.12}", w.iter().sum::<f64>());
    for &p in ranked.iter().take(3) {
        println!("patch {p} (row {}, col {}): weight {:.4}", p / 4, p % 4, w[p]);
    }
    println!("interaction encoding {:?}, {} parameters", tape.shape(psi), saim.num_params());
    Ok(())
}
