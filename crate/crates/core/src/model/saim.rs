use super::config::{SaimConfig, SaimMode};
use super::inputs::SampleInputs;
use crate::error::{Error, Result};
use crate::nn::{positional_encoding, Activation, Builder, Linear, Lstm, MultiHeadAttention};
use crate::tensor::{ParamId, ParamStore, Tape, Var};

/// Pedestrian and ego dynamics summarized into the query φ_q.
pub struct DynamicsEncoder {
    embed_box: Linear,
    embed_ego: Linear,
    lstm: Lstm,
    out: Linear,
}

impl DynamicsEncoder {
    fn new(b: &mut Builder, config: &SaimConfig, embed_dim: usize, l2: f64) -> Result<Self> {
        let mut s = b.scope("dynamics");
        Ok(Self {
            embed_box: Linear::new(&mut s, "embed_box", 4, embed_dim, true)?,
            embed_ego: Linear::new(&mut s, "embed_ego", 3, embed_dim, true)?,
            lstm: Lstm::new(&mut s, "lstm", 2 * embed_dim, config.recurrent_hidden, Activation::Tanh, l2)?,
            out: Linear::new(&mut s, "out", config.recurrent_hidden, config.query_dim, true)?,
        })
    }

    /// `1 × query_dim`.
    pub fn forward(&self, tape: &Tape, store: &ParamStore, inputs: &SampleInputs) -> Result<Var> {
        let boxes = self.embed_box.forward(tape, store, tape.constant(inputs.location.clone()))?;
        let ego = self.embed_ego.forward(tape, store, tape.constant(inputs.ego_obs.clone()))?;
        let last = self.lstm.last_hidden(tape, store, tape.concat(&[boxes, ego], 1)?)?;
        self.out.forward(tape, store, last)
    }

    fn num_params(&self) -> usize {
        self.embed_box.num_params() + self.embed_ego.num_params() + self.lstm.num_params() + self.out.num_params()
    }
}

enum Summary {
    Global {
        score: ParamId,
        combine: Linear,
        dynamics: Option<DynamicsEncoder>,
    },
    /// Per-patch 1×1 projection followed by a dense map over patches.
    Pointwise { pointwise: Linear, dense: Linear },
}

/// Semantic attention over scene patches, producing ψ_int.
pub struct Saim {
    pub config: SaimConfig,
    patch_embed: Linear,
    attention: Vec<MultiHeadAttention>,
    summary: Summary,
}

impl Saim {
    /// `embed_dim` is the per-step embedding width of the dynamics encoder.
    pub fn new(b: &mut Builder, config: &SaimConfig, embed_dim: usize, l2: f64) -> Result<Self> {
        if config.mode == SaimMode::Off {
            return Err(Error::Config("scene module is disabled".into()));
        }
        let mut s = b.scope("saim");
        let lp = config.patch_dim;
        let patch_embed = Linear::new(&mut s, "patch_embed", config.patch_len(), lp, true)?;
        let first_in = if config.positional_encoding { 2 * lp } else { lp };
        let attention = (0..config.depth)
            .map(|k| {
                let d_in = if k == 0 { first_in } else { lp };
                MultiHeadAttention::new(&mut s, &format!("attention{k}"), d_in, lp, config.num_heads, false)
            })
            .collect::<Result<Vec<_>>>()?;
        let summary = match config.mode {
            SaimMode::NoGlobalAttention => Summary::Pointwise {
                pointwise: Linear::new(&mut s, "pointwise", lp, 1, true)?,
                dense: Linear::new(&mut s, "dense", config.num_patches(), config.output_dim, true)?,
            },
            mode => {
                let dynamics = if mode == SaimMode::Full {
                    Some(DynamicsEncoder::new(&mut s, config, embed_dim, l2)?)
                } else {
                    None
                };
                Summary::Global {
                    score: s.glorot("score", config.query_dim, lp, 0.0)?,
                    combine: Linear::new(&mut s, "combine", lp + config.query_dim, config.output_dim, false)?,
                    dynamics,
                }
            }
        };
        Ok(Self {
            config: config.clone(),
            patch_embed,
            attention,
            summary,
        })
    }

    pub fn expected_params(config: &SaimConfig, embed_dim: usize) -> usize {
        let lp = config.patch_dim;
        let first_in = if config.positional_encoding { 2 * lp } else { lp };
        let mut n = config.patch_len() * lp + lp;
        for k in 0..config.depth {
            let d_in = if k == 0 { first_in } else { lp };
            n += 3 * d_in * lp + lp * lp;
        }
        match config.mode {
            SaimMode::Off => 0,
            SaimMode::NoGlobalAttention => n + (lp + 1) + (config.num_patches() * config.output_dim + config.output_dim),
            mode => {
                n += config.query_dim * lp + (lp + config.query_dim) * config.output_dim;
                if mode == SaimMode::Full {
                    let h = config.recurrent_hidden;
                    n += (4 * embed_dim + embed_dim)
                        + (3 * embed_dim + embed_dim)
                        + 4 * h * (2 * embed_dim + h + 1)
                        + h * config.query_dim
                        + config.query_dim;
                }
                n
            }
        }
    }

    /// The motion encoder producing the attention query, when the configuration has one.
    pub fn dynamics(&self) -> Option<&DynamicsEncoder> {
        match &self.summary {
            Summary::Global { dynamics, .. } => dynamics.as_ref(),
            Summary::Pointwise { .. } => None,
        }
    }

    pub fn num_params(&self) -> usize {
        let mut n = self.patch_embed.num_params() + self.attention.iter().map(|a| a.num_params()).sum::<usize>();
        n += match &self.summary {
            Summary::Pointwise { pointwise, dense } => pointwise.num_params() + dense.num_params(),
            Summary::Global { combine, dynamics, .. } => {
                self.config.query_dim * self.config.patch_dim
                    + combine.num_params()
                    + dynamics.as_ref().map_or(0, |d| d.num_params())
            }
        };
        n
    }

    /// ξ_sc: `np × λ_p` patch embeddings, with positional encodings appended when enabled.
    pub fn embed_patches(&self, tape: &Tape, store: &ParamStore, patches: Var) -> Result<Var> {
        let xi = self.patch_embed.forward(tape, store, patches)?;
        if self.config.positional_encoding {
            let np = tape.shape(patches)[0];
            tape.concat(&[xi, tape.constant(positional_encoding(np, self.config.patch_dim))], 1)
        } else {
            Ok(xi)
        }
    }

    /// Γ_sc: self-attention over the patch embeddings.
    pub fn scene_attention(&self, tape: &Tape, store: &ParamStore, xi: Var) -> Result<Var> {
        let mut g = xi;
        for unit in &self.attention {
            g = unit.forward(tape, store, g, g, g)?;
        }
        Ok(g)
    }

    /// `tanh(W_c[c ⊕ q])` with `c = softmax(q W_Γ Γᵀ) Γ`; also returns the attention weights.
    pub fn global_attention(&self, tape: &Tape, store: &ParamStore, gamma: Var, query: Var) -> Result<(Var, Var)> {
        let Summary::Global { score, combine, .. } = &self.summary else {
            return Err(Error::Contract("global attention is disabled in this configuration".into()));
        };
        let keyed = tape.matmul(query, tape.param(store, *score))?;
        let weights = tape.softmax(tape.matmul(keyed, tape.transpose(gamma)?)?, 1)?;
        let context = tape.matmul(weights, gamma)?;
        let joined = tape.concat(&[context, query], 1)?;
        Ok((tape.tanh(combine.forward(tape, store, joined)?)?, weights))
    }

    /// ψ_int for one sample, `1 × output_dim`.
    pub fn encode(&self, tape: &Tape, store: &ParamStore, inputs: &SampleInputs) -> Result<Var> {
        let patches = inputs
            .patches
            .as_ref()
            .ok_or_else(|| Error::Contract("scene patches are missing".into()))?;
        let xi = self.embed_patches(tape, store, tape.constant(patches.clone()))?;
        let gamma = self.scene_attention(tape, store, xi)?;
        match &self.summary {
            Summary::Pointwise { pointwise, dense } => {
                let per_patch = pointwise.forward(tape, store, gamma)?;
                tape.tanh(dense.forward(tape, store, tape.transpose(per_patch)?)?)
            }
            Summary::Global { dynamics, .. } => {
                let query = match dynamics {
                    Some(d) => d.forward(tape, store, inputs)?,
                    None => {
                        let np = tape.shape(gamma)[0];
                        tape.row(gamma, np - 1)?
                    }
                };
                Ok(self.global_attention(tape, store, gamma, query)?.0)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::inputs::patchify;
    use crate::nn::test_builder_parts;
    use crate::data::SemanticMap;
    use crate::tensor::{grad_check, GradCheckOptions, OpKind, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(mode: SaimMode) -> SaimConfig {
        SaimConfig {
            mode,
            map_size: [24, 24],
            patch_size: 12,
            patch_dim: 8,
            num_heads: 2,
            recurrent_hidden: 8,
            query_dim: 8,
            output_dim: 8,
            ..SaimConfig::default()
        }
    }

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> SemanticMap {
        let mut map = SemanticMap::empty(0, w, h);
        for y in 0..h {
            for x in 0..w {
                let ch = rng.gen_range(0..4);
                map.data[(ch * h + y) * w + x] = 1;
            }
        }
        map
    }

    fn inputs(seed: u64, config: &SaimConfig) -> SampleInputs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |r: usize, c: usize| Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (location, ego_obs, velocity, ego_future) = (t(3, 4), t(3, 3), t(3, 4), t(2, 3));
        let mut map_rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let map = random_map(&mut map_rng, config.map_size[0], config.map_size[1]);
        SampleInputs {
            location,
            velocity,
            cells: vec![0; 3],
            ego_obs,
            ego_future,
            patches: Some(patchify(&map, config.patch_size).unwrap()),
        }
    }

    fn build(config: &SaimConfig, seed: u64) -> (ParamStore, Saim) {
        let (mut store, mut rng) = test_builder_parts(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let saim = Saim::new(&mut b, config, 8, 1e-4).unwrap();
        (store, saim)
    }

    #[test]
    fn zero_map_embeds_identically() {
        let config = SaimConfig { positional_encoding: false, ..tiny(SaimMode::Full) };
        let (store, saim) = build(&config, 0);
        let tape = Tape::new();
        let xi = tape.value(saim.embed_patches(&tape, &store, tape.constant(Tensor::zeros(&[4, 576]))).unwrap());
        for r in 1..4 {
            assert_eq!(xi.row_slice(r), xi.row_slice(0));
        }
    }

    #[test]
    fn one_patch_change_touches_one_row() {
        let config = tiny(SaimMode::Full);
        let (store, saim) = build(&config, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let map = random_map(&mut rng, 24, 24);
        let mut other = map.clone();
        // flip a pixel of patch 3 (bottom right) between persons and static
        let (y, x) = (20, 20);
        for ch in 0..4 {
            other.data[(ch * 24 + y) * 24 + x] = 0;
        }
        let was_static = map.get(3, y, x) == 1;
        other.data[((if was_static { 0 } else { 3 }) * 24 + y) * 24 + x] = 1;
        let tape = Tape::new();
        let a = tape.value(saim.embed_patches(&tape, &store, tape.constant(patchify(&map, 12).unwrap())).unwrap());
        let b = tape.value(saim.embed_patches(&tape, &store, tape.constant(patchify(&other, 12).unwrap())).unwrap());
        for r in 0..4 {
            assert_eq!(a.row_slice(r) == b.row_slice(r), r != 3, "row {r}");
        }
    }

    #[test]
    fn identical_patch_rows_give_that_row() {
        let config = tiny(SaimMode::Full);
        let (store, saim) = build(&config, 3);
        let tape = Tape::new();
        let row = [0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8];
        let gamma = tape.constant(Tensor::from_rows(&[row; 5]).unwrap());
        let q = tape.constant(Tensor::row(&[0.9, 0.1, -0.4, 0.2, 0.3, -0.6, 0.5, 0.0]));
        let (_, weights) = saim.global_attention(&tape, &store, gamma, q).unwrap();
        let c = tape.value(tape.matmul(weights, gamma).unwrap());
        for (a, e) in c.data().iter().zip(row) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn peaked_scores_select_patch() {
        let config = tiny(SaimMode::Full);
        let (mut store, saim) = build(&config, 4);
        let Summary::Global { score, .. } = &saim.summary else { unreachable!() };
        store.get_mut(*score).value = Tensor::identity(8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut rows: Vec<Vec<f64>> = (0..6).map(|_| (0..8).map(|_| rng.gen_range(-0.1..0.1)).collect()).collect();
        rows[4][2] = 1.0;
        let tape = Tape::new();
        let gamma = tape.constant(Tensor::from_rows(&rows).unwrap());
        let mut q = vec![0.0; 8];
        q[2] = 40.0;
        let (_, weights) = saim.global_attention(&tape, &store, gamma, tape.constant(Tensor::row(&q))).unwrap();
        let c = tape.value(tape.matmul(weights, gamma).unwrap());
        for (a, e) in c.data().iter().zip(&rows[4]) {
            assert!((a - e).abs() < 1e-6, "{a} vs {e}");
        }
    }

    #[test]
    fn context_in_hull_and_encoding_bounded() {
        let config = tiny(SaimMode::Full);
        let (store, saim) = build(&config, 6);
        for seed in 0..10 {
            let inp = inputs(seed, &config);
            let tape = Tape::new();
            let psi = tape.value(saim.encode(&tape, &store, &inp).unwrap());
            assert_eq!(psi.shape(), &[1, 8]);
            assert!(psi.data().iter().all(|v| v.abs() < 1.0));
            for w in tape.values_of_kind(OpKind::Softmax) {
                for r in 0..w.rows() {
                    assert!((w.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-10);
                }
            }
            let xi = saim.embed_patches(&tape, &store, tape.constant(inp.patches.clone().unwrap())).unwrap();
            let gamma = saim.scene_attention(&tape, &store, xi).unwrap();
            let q = tape.constant(Tensor::row(&[0.5; 8]));
            let (_, weights) = saim.global_attention(&tape, &store, gamma, q).unwrap();
            let c = tape.value(tape.matmul(weights, gamma).unwrap());
            let g = tape.value(gamma);
            for k in 0..8 {
                let col: Vec<f64> = (0..g.rows()).map(|r| g.at(r, k)).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!(c.data()[k] >= lo - 1e-12 && c.data()[k] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn ego_motion_changes_encoding() {
        let config = tiny(SaimMode::Full);
        let (store, saim) = build(&config, 7);
        let inp = inputs(8, &config);
        let run = |i: &SampleInputs| {
            let tape = Tape::new();
            tape.value(saim.encode(&tape, &store, i).unwrap())
        };
        let a = run(&inp);
        assert_eq!(a, run(&inp));
        let mut moved = inp.clone();
        moved.ego_obs.data_mut()[0] += 0.5;
        let b = run(&moved);
        assert!(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() > 0.0);
    }

    #[test]
    fn patch_permutation_invariance_without_positions() {
        let config = SaimConfig { positional_encoding: false, ..tiny(SaimMode::Full) };
        let config = SaimConfig { map_size: [36, 24], ..config };
        let (store, saim) = build(&config, 9);
        let inp = inputs(10, &config);
        let patches = inp.patches.clone().unwrap();
        let perm = [4usize, 2, 0, 5, 1, 3];
        let shuffled = Tensor::from_rows(&perm.iter().map(|&p| patches.row_slice(p).to_vec()).collect::<Vec<_>>()).unwrap();
        let run = |p: Tensor| {
            let tape = Tape::new();
            let i = SampleInputs { patches: Some(p), ..inp.clone() };
            tape.value(saim.encode(&tape, &store, &i).unwrap())
        };
        let a = run(patches);
        let b = run(shuffled);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn variants_and_parameter_counts() {
        for mode in [SaimMode::Full, SaimMode::NoMotion, SaimMode::NoGlobalAttention] {
            for depth in [1, 2] {
                let config = SaimConfig { depth, ..tiny(mode) };
                let (store, saim) = build(&config, 11);
                assert_eq!(store.num_scalars(), Saim::expected_params(&config, 8), "{mode:?}");
                assert_eq!(saim.num_params(), store.num_scalars());
                let tape = Tape::new();
                let psi = saim.encode(&tape, &store, &inputs(12, &config)).unwrap();
                assert_eq!(tape.shape(psi), vec![1, 8]);
            }
        }
        let (store, _) = build(&tiny(SaimMode::NoMotion), 11);
        assert_eq!(store.num_scalars_with_prefix("saim.dynamics"), 0);
    }

    #[test]
    fn dynamics_gradient() {
        let config = tiny(SaimMode::Full);
        let (mut store, mut rng) = test_builder_parts(13);
        let mut b = Builder::new(&mut store, &mut rng);
        let dyn_enc = DynamicsEncoder::new(&mut b, &config, 8, 0.0).unwrap();
        let inp = inputs(14, &config);
        let report = grad_check(
            &store,
            |tape, s| {
                let q = dyn_enc.forward(tape, s, &inp)?;
                tape.sum(tape.mul(q, q)?)
            },
            GradCheckOptions { step: 1e-5, tolerance: 1e-4, max_entries: None },
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures().collect::<Vec<_>>());
    }

    #[test]
    fn full_module_gradient() {
        let config = tiny(SaimMode::Full);
        let (store, saim) = build(&config, 15);
        let inp = inputs(16, &config);
        let w = Tensor::row(&[0.5, -0.3, 0.8, 0.1, -0.9, 0.4, 0.2, -0.6]);
        let report = grad_check(
            &store,
            |tape, s| {
                let psi = saim.encode(tape, s, &inp)?;
                tape.sum(tape.mul(psi, tape.constant(w.clone()))?)
            },
            GradCheckOptions { step: 1e-4, tolerance: 1e-3, max_entries: None },
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures().collect::<Vec<_>>());
    }
}
