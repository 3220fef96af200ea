//! Finite-difference verification of every primitive, each module and the full objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, PedFormer, SampleInputs, SaimMode};
use crate::nn::{Activation, Builder, Lstm, MultiHeadAttention};
use crate::objectives::{batch_loss, LossWeights, Targets};
use crate::tensor::{grad_check_where, GradCheckOptions, OpKind, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub passed: bool,
    /// Parameters whose gradients disagree.
    pub failing_params: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// One line per check; long failing-parameter lists are cut short.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{:<6} {:<28} max_rel_error {:.3e} (tol {:.0e})",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.max_rel_error,
                c.tolerance
            ));
            if !c.failing_params.is_empty() {
                let shown = &c.failing_params[..c.failing_params.len().min(SHOWN_PARAMS)];
                out.push_str(&format!("  failing: {}", shown.join(", ")));
                if c.failing_params.len() > shown.len() {
                    out.push_str(&format!(" (+{} more)", c.failing_params.len() - shown.len()));
                }
            }
            out.push('\n');
        }
        out
    }
}

const SHOWN_PARAMS: usize = 6;

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub primitive_tolerance: f64,
    pub model_tolerance: f64,
    pub step: f64,
    /// Random points per primitive.
    pub points: u64,
    /// Negates the backward rule of one op kind (negative control).
    pub sign_fault: Option<OpKind>,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            primitive_tolerance: 1e-5,
            model_tolerance: 1e-3,
            step: 1e-4,
            points: 5,
            sign_fault: None,
            seed: 0,
        }
    }
}

/// Rejects configurations too large for an exhaustive finite-difference sweep.
pub fn ensure_tiny(config: &ModelConfig) -> Result<()> {
    let mut problems = Vec::new();
    if config.encoder.d_embed > 16 {
        problems.push(format!("encoder.d_embed {} exceeds 16", config.encoder.d_embed));
    }
    if config.obs_len > 4 {
        problems.push(format!("obs_len {} exceeds 4", config.obs_len));
    }
    if config.pred_len > 3 {
        problems.push(format!("pred_len {} exceeds 3", config.pred_len));
    }
    if config.saim.mode != SaimMode::Off && (config.saim.map_size[0] > 24 || config.saim.map_size[1] > 24) {
        problems.push(format!(
            "saim.map_size {}x{} exceeds 24x24",
            config.saim.map_size[0], config.saim.map_size[1]
        ));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("gradient check needs a tiny configuration: {}", problems.join("; "))))
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

fn check<F>(name: &str, store: &ParamStore, loss: F, step: f64, tol: f64, fault: Option<OpKind>) -> Result<CheckResult>
where
    F: Fn(&Tape, &ParamStore) -> Result<Var> + Sync,
{
    check_prefix(name, store, "", loss, step, tol, fault)
}

fn check_prefix<F>(
    name: &str,
    store: &ParamStore,
    prefix: &str,
    loss: F,
    step: f64,
    tol: f64,
    fault: Option<OpKind>,
) -> Result<CheckResult>
where
    F: Fn(&Tape, &ParamStore) -> Result<Var> + Sync,
{
    let report = grad_check_where(
        store,
        |tape, s| {
            if let Some(kind) = fault {
                tape.inject_sign_fault(kind);
            }
            loss(tape, s)
        },
        GradCheckOptions {
            step,
            tolerance: tol,
            max_entries: None,
        },
        |n| n.starts_with(prefix),
    )?;
    Ok(CheckResult {
        name: name.to_string(),
        tolerance: tol,
        max_rel_error: report.max_rel_error(),
        passed: report.passed(),
        failing_params: report.failures().map(|p| p.name.clone()).collect(),
    })
}

fn merge(name: &str, parts: Vec<CheckResult>) -> CheckResult {
    let mut failing: Vec<String> = parts.iter().flat_map(|p| p.failing_params.clone()).collect();
    failing.sort();
    failing.dedup();
    CheckResult {
        name: name.to_string(),
        tolerance: parts[0].tolerance,
        max_rel_error: parts.iter().fold(0.0, |m, p| m.max(p.max_rel_error)),
        passed: parts.iter().all(|p| p.passed),
        failing_params: failing,
    }
}

type Primitive = fn(&mut ChaCha8Rng) -> (ParamStore, Box<dyn Fn(&Tape, &ParamStore) -> Result<Var> + Sync>);

fn primitives() -> Vec<(&'static str, Primitive)> {
    vec![
        ("matmul", |rng| {
            let mut s = ParamStore::new();
            let a = s.add("a", random_tensor(rng, &[3, 4], -1.0, 1.0), 0.0).unwrap();
            let b = s.add("b", random_tensor(rng, &[4, 2], -1.0, 1.0), 0.0).unwrap();
            (s, Box::new(move |t, s| t.sum(t.matmul(t.param(s, a), t.param(s, b))?)))
        }),
        ("elementwise_add_mul_sub", |rng| {
            let mut s = ParamStore::new();
            let a = s.add("a", random_tensor(rng, &[2, 3], -1.0, 1.0), 0.0).unwrap();
            let b = s.add("b", random_tensor(rng, &[2, 3], -1.0, 1.0), 0.0).unwrap();
            let r = s.add("r", random_tensor(rng, &[1, 3], -1.0, 1.0), 0.0).unwrap();
            (
                s,
                Box::new(move |t, s| {
                    let (a, b, r) = (t.param(s, a), t.param(s, b), t.param(s, r));
                    let x = t.add_row(t.mul(t.add(a, b)?, t.sub(a, b)?)?, r)?;
                    t.mean(t.mul(x, x)?)
                }),
            )
        }),
        ("tanh", |rng| unary(rng, |t, x| t.tanh(x))),
        ("sigmoid", |rng| unary(rng, |t, x| t.sigmoid(x))),
        ("softsign", |rng| unary(rng, |t, x| t.softsign(x))),
        ("relu", |rng| unary(rng, |t, x| t.relu(x))),
        ("log_cosh", |rng| unary(rng, |t, x| t.log_cosh(x))),
        ("softmax_cross_entropy", |rng| {
            let mut s = ParamStore::new();
            let x = s.add("logits", random_tensor(rng, &[3, 5], -2.0, 2.0), 0.0).unwrap();
            let target = rng.gen_range(0..5);
            (
                s,
                Box::new(move |t, s| {
                    let p = t.softmax(t.param(s, x), 1)?;
                    let picked = t.narrow(p, 1, target, 1)?;
                    t.scale(t.sum(t.ln_clamped(picked, 1e-7, 1.0)?)?, -1.0)
                }),
            )
        }),
        ("layer_norm", |rng| {
            let mut s = ParamStore::new();
            let x = s.add("x", random_tensor(rng, &[2, 8], -1.0, 1.0), 0.0).unwrap();
            let g = s.add("gain", random_tensor(rng, &[1, 8], 0.5, 1.5), 0.0).unwrap();
            let b = s.add("bias", random_tensor(rng, &[1, 8], -0.5, 0.5), 0.0).unwrap();
            let w = random_tensor(rng, &[2, 8], -1.0, 1.0);
            (
                s,
                Box::new(move |t, s| {
                    let y = t.layer_norm(t.param(s, x), t.param(s, g), t.param(s, b))?;
                    t.sum(t.mul(y, t.constant(w.clone()))?)
                }),
            )
        }),
        ("concat_linear", |rng| {
            let mut s = ParamStore::new();
            let a = s.add("a", random_tensor(rng, &[2, 3], -1.0, 1.0), 0.0).unwrap();
            let b = s.add("b", random_tensor(rng, &[2, 2], -1.0, 1.0), 0.0).unwrap();
            let w = s.add("w", random_tensor(rng, &[5, 4], -1.0, 1.0), 0.0).unwrap();
            let bias = s.add("bias", random_tensor(rng, &[1, 4], -1.0, 1.0), 0.0).unwrap();
            (
                s,
                Box::new(move |t, s| {
                    let x = t.concat(&[t.param(s, a), t.param(s, b)], 1)?;
                    t.sum(t.linear(x, t.param(s, w), Some(t.param(s, bias)))?)
                }),
            )
        }),
        ("shape_ops", |rng| {
            let mut s = ParamStore::new();
            let table = s.add("table", random_tensor(rng, &[5, 3], -1.0, 1.0), 0.0).unwrap();
            let w = random_tensor(rng, &[4, 4], -1.0, 1.0);
            (
                s,
                Box::new(move |t, s| {
                    let rows = t.gather_rows(t.param(s, table), &[4, 0, 2, 0])?;
                    let sq = t.matmul(rows, t.transpose(rows)?)?;
                    let r = t.reshape(t.narrow(sq, 1, 1, 2)?, &[2, 4])?;
                    let m = t.mean_rows(r)?;
                    let rep = t.repeat_rows(t.row(t.reshape(m, &[4, 1])?, 0)?, 4)?;
                    let y = t.mul(t.concat(&[rep, rep, rep, rep], 1)?, t.constant(w.clone()))?;
                    t.add(t.sum(y)?, t.mean(t.scale(sq, 0.5)?)?)
                }),
            )
        }),
        ("multi_head_attention", |rng| {
            let mut s = ParamStore::new();
            let mut init = ChaCha8Rng::seed_from_u64(rng.gen());
            let mha = {
                let mut b = Builder::new(&mut s, &mut init);
                MultiHeadAttention::new(&mut b, "mha", 4, 4, 2, false).unwrap()
            };
            let (q, kv) = (random_tensor(rng, &[3, 4], -1.0, 1.0), random_tensor(rng, &[5, 4], -1.0, 1.0));
            let w = random_tensor(rng, &[3, 4], -1.0, 1.0);
            (
                s,
                Box::new(move |t, s| {
                    let kv = t.constant(kv.clone());
                    let y = mha.forward(t, s, t.constant(q.clone()), kv, kv)?;
                    t.sum(t.mul(y, t.constant(w.clone()))?)
                }),
            )
        }),
        ("lstm", |rng| {
            let mut s = ParamStore::new();
            let mut init = ChaCha8Rng::seed_from_u64(rng.gen());
            let lstm = {
                let mut b = Builder::new(&mut s, &mut init);
                Lstm::new(&mut b, "lstm", 3, 4, Activation::Softsign, 0.0).unwrap()
            };
            let xs = random_tensor(rng, &[3, 3], -1.0, 1.0);
            let w = random_tensor(rng, &[3, 4], -1.0, 1.0);
            (
                s,
                Box::new(move |t, s| {
                    let y = lstm.run(t, s, t.constant(xs.clone()), false)?;
                    t.sum(t.mul(y, t.constant(w.clone()))?)
                }),
            )
        }),
    ]
}

fn unary(
    rng: &mut ChaCha8Rng,
    op: fn(&Tape, Var) -> Result<Var>,
) -> (ParamStore, Box<dyn Fn(&Tape, &ParamStore) -> Result<Var> + Sync>) {
    let mut s = ParamStore::new();
    // keep entries away from the kink of the rectifier and the sign switch of softsign
    let data: Vec<f64> = (0..6)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..3.0);
            if rng.gen_bool(0.5) {
                -v
            } else {
                v
            }
        })
        .collect();
    let x = s.add("x", Tensor::new(vec![2, 3], data).unwrap(), 0.0).unwrap();
    let w = random_tensor(rng, &[2, 3], -1.0, 1.0);
    (s, Box::new(move |t, s| t.sum(t.mul(op(t, t.param(s, x))?, t.constant(w.clone()))?)))
}

/// Deterministic random inputs and targets shaped for `config`.
pub fn synthetic_batch(config: &ModelConfig, n: usize, seed: u64) -> Vec<(SampleInputs, Targets)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (o, tau) = (config.obs_len, config.pred_len);
    (0..n)
        .map(|_| {
            let patches = (config.saim.mode != SaimMode::Off).then(|| {
                let np = config.saim.num_patches();
                let len = config.saim.patch_len();
                Tensor::new(vec![np, len], (0..np * len).map(|_| f64::from(rng.gen_bool(0.25) as u8)).collect())
                    .expect("shape")
            });
            let inputs = SampleInputs {
                location: random_tensor(&mut rng, &[o, 4], 0.0, 1.0),
                velocity: random_tensor(&mut rng, &[o, 4], -0.5, 0.5),
                cells: (0..o).map(|_| rng.gen_range(0..config.num_cells)).collect(),
                ego_obs: random_tensor(&mut rng, &[o, 3], -1.0, 1.0),
                ego_future: random_tensor(&mut rng, &[tau, 3], -1.0, 1.0),
                patches,
            };
            let targets = Targets {
                boxes: random_tensor(&mut rng, &[tau, 4], 0.0, 1.0),
                crossing: rng.gen_range(0..2),
                cell: rng.gen_range(0..config.num_cells),
            };
            (inputs, targets)
        })
        .collect()
}

fn model_checks(config: &ModelConfig, options: &SuiteOptions) -> Result<Vec<CheckResult>> {
    let (model, store) = PedFormer::build(config, options.seed)?;
    let batch = synthetic_batch(config, 2, options.seed + 1);
    let weights = LossWeights {
        class_weight_cross: 3.0,
        ..LossWeights::default()
    };
    let (step, tol, fault) = (options.step, options.model_tolerance, options.sign_fault);
    let probe = random_tensor(&mut ChaCha8Rng::seed_from_u64(options.seed + 2), &[1, 512], -1.0, 1.0);
    let weighted = |t: &Tape, v: Var| -> Result<Var> {
        let n = t.shape(v)[1];
        let w = Tensor::row(&probe.data()[..n]);
        t.sum(t.mul(v, t.constant(w))?)
    };
    let inputs = &batch[0].0;

    let mut out = Vec::new();
    out.push(check_prefix(
        "cross_modal_encoder",
        &store,
        "encoder.",
        |t, s| weighted(t, model.encoder.encode(t, s, inputs)?),
        step,
        tol,
        fault,
    )?);
    if let Some(saim) = &model.saim {
            out.push(check_prefix(
            "scene_interaction",
            &store,
            "saim.",
            |t, s| weighted(t, saim.encode(t, s, inputs)?),
            step,
            tol,
            fault,
        )?);
    }
    let context = random_tensor(&mut ChaCha8Rng::seed_from_u64(options.seed + 3), &[config.pred_len, config.context_dim()], -1.0, 1.0);
    let last_box = Tensor::row(inputs.location.row_slice(config.obs_len - 1));
    let target = batch[0].1.clone();
    out.push(check_prefix(
        "gated_decoder",
        &store,
        "decoder.",
        |t, s| {
            let o = model
                .decoder
                .forward(t, s, t.constant(context.clone()), t.constant(last_box.clone()))?;
            batch_loss(t, &[(o, target.clone())], &weights)
        },
        step,
        tol,
        fault,
    )?);
    out.push(check(
        "end_to_end_loss",
        &store,
        |t, s| {
            let pairs = batch
                .iter()
                .map(|(i, tg)| Ok((model.forward(t, s, i)?, tg.clone())))
                .collect::<Result<Vec<_>>>()?;
            batch_loss(t, &pairs, &weights)
        },
        step,
        tol,
        fault,
    )?);
    Ok(out)
}

/// Runs every primitive check and the module and end-to-end checks for `config`.
pub fn run_suite(config: &ModelConfig, options: &SuiteOptions) -> Result<SuiteReport> {
    ensure_tiny(config)?;
    let mut checks = Vec::new();
    for (name, build) in primitives() {
        let parts = (0..options.points)
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(options.seed.wrapping_mul(1000) + k);
                let (store, loss) = build(&mut rng);
                check(name, &store, loss, 1e-5, options.primitive_tolerance, options.sign_fault)
            })
            .collect::<Result<Vec<_>>>()?;
        checks.push(merge(name, parts));
    }
    checks.extend(model_checks(config, options)?);
    Ok(SuiteReport { checks })
}
