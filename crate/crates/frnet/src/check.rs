//! Central finite-difference verification of the tape adjoints.
//!
//! The numeric side recomputes the loss from perturbed copies of the
//! inputs, so it shares nothing with the adjoint code it checks. Errors
//! are relative with a unit floor: `|a - n| / max(1, |a|, |n|)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Instance;
use crate::error::Result;
use crate::model::{self, ModelDims, ModelParams};
use crate::refine::{Phase, Variant};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Outcome of one named check, aggregated over its random seeds.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<22} max rel err {:>10.3e}  (tol {:.0e})  {}",
            self.name,
            self.max_rel_err,
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

type Build<F> = Box<dyn Fn(&mut Tape<F>, &[Var]) -> Result<Var>>;

struct Case<F: Real> {
    inputs: Vec<Tensor<F>>,
    build: Build<F>,
}

/// Compares the tape adjoints of `case.inputs` against central
/// differences of step `h`; returns the worst relative error.
fn check_case<F: Real>(case: &Case<F>, h: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = (case.build)(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<F>> = vars
        .iter()
        .zip(&case.inputs)
        .map(|(v, t)| {
            tape.grad(*v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![F::ZERO; t.numel()])
        })
        .collect();

    let eval = |inputs: &[Tensor<F>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = (case.build)(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0].to_f64())
    };

    let mut work = case.inputs.to_vec();
    let mut worst = 0.0f64;
    for ti in 0..work.len() {
        for j in 0..work[ti].numel() {
            let x0 = work[ti].data()[j];
            let xp = x0 + F::from_f64(h);
            let xm = x0 - F::from_f64(h);
            work[ti].data_mut()[j] = xp;
            let lp = eval(&work)?;
            work[ti].data_mut()[j] = xm;
            let lm = eval(&work)?;
            work[ti].data_mut()[j] = x0;
            let numeric = (lp - lm) / (xp.to_f64() - xm.to_f64());
            worst = worst.max(rel_err(analytic[ti][j].to_f64(), numeric));
        }
    }
    Ok(worst)
}

fn randn<F: Real>(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<F> {
    Tensor::randn(shape, 1.0, rng)
}

/// N(0,1) values nudged away from zero, for kinked activations.
fn randn_off_zero<F: Real>(shape: Vec<usize>, rng: &mut ChaCha8Rng, margin: f64) -> Tensor<F> {
    let mut t = randn::<F>(shape, rng);
    let m = F::from_f64(margin);
    for v in t.data_mut() {
        if v.abs() < m {
            *v = if *v >= F::ZERO { *v + m } else { *v - m };
        }
    }
    t
}

/// The weighted-sum wrapper that turns an op output into a scalar loss
/// with a non-uniform adjoint.
fn weighted_sum<F: Real>(tape: &mut Tape<F>, out: Var, w: Var) -> Result<Var> {
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn op_cases<F: Real>(rng: &mut ChaCha8Rng, h: f64) -> Vec<(&'static str, Case<F>)> {
    let mut cases: Vec<(&'static str, Case<F>)> = Vec::new();
    let (b, m, k, n) = (
        rng.gen_range(2..4usize),
        rng.gen_range(2..5usize),
        rng.gen_range(2..5usize),
        rng.gen_range(2..5usize),
    );

    cases.push((
        "matmul",
        Case {
            inputs: vec![randn(vec![m, k], rng), randn(vec![k, n], rng), randn(vec![m, n], rng)],
            build: Box::new(|t, v| {
                let c = t.matmul(v[0], v[1])?;
                weighted_sum(t, c, v[2])
            }),
        },
    ));
    cases.push((
        "matmul_batched",
        Case {
            inputs: vec![
                randn(vec![b, m, k], rng),
                randn(vec![k, n], rng),
                randn(vec![b, m, n], rng),
            ],
            build: Box::new(|t, v| {
                let c = t.matmul(v[0], v[1])?;
                weighted_sum(t, c, v[2])
            }),
        },
    ));
    cases.push((
        "bmm",
        Case {
            inputs: vec![
                randn(vec![b, m, k], rng),
                randn(vec![b, k, n], rng),
                randn(vec![b, m, n], rng),
            ],
            build: Box::new(|t, v| {
                let c = t.bmm(v[0], v[1])?;
                weighted_sum(t, c, v[2])
            }),
        },
    ));
    cases.push((
        "bmm_nt",
        Case {
            inputs: vec![
                randn(vec![b, m, k], rng),
                randn(vec![b, n, k], rng),
                randn(vec![b, m, n], rng),
            ],
            build: Box::new(|t, v| {
                let c = t.bmm_nt(v[0], v[1])?;
                weighted_sum(t, c, v[2])
            }),
        },
    ));
    cases.push((
        "row_softmax",
        Case {
            inputs: vec![randn(vec![m, n], rng), randn(vec![m, n], rng)],
            build: Box::new(|t, v| {
                let s = t.row_softmax(v[0]);
                weighted_sum(t, s, v[1])
            }),
        },
    ));
    cases.push((
        "sigmoid",
        Case {
            inputs: vec![randn(vec![m, n], rng), randn(vec![m, n], rng)],
            build: Box::new(|t, v| {
                let s = t.sigmoid(v[0]);
                weighted_sum(t, s, v[1])
            }),
        },
    ));
    let slope = Tensor::scalar(F::from_f64(rng.gen_range(0.1..0.6)));
    cases.push((
        "prelu",
        Case {
            inputs: vec![
                randn_off_zero(vec![m, n], rng, 20.0 * h),
                slope,
                randn(vec![m, n], rng),
            ],
            build: Box::new(|t, v| {
                let y = t.prelu(v[0], v[1])?;
                weighted_sum(t, y, v[2])
            }),
        },
    ));
    cases.push((
        "linear",
        Case {
            inputs: vec![
                randn(vec![m, k], rng),
                randn(vec![n, k], rng),
                randn(vec![n], rng),
                randn(vec![m, n], rng),
            ],
            build: Box::new(|t, v| {
                let y = t.linear(v[0], v[1], v[2])?;
                weighted_sum(t, y, v[3])
            }),
        },
    ));
    cases.push((
        "reshape",
        Case {
            inputs: vec![randn(vec![m, n], rng), randn(vec![n, m], rng)],
            build: Box::new(move |t, v| {
                let shape = [t.shape(v[0])[1], t.shape(v[0])[0]];
                let r = t.reshape(v[0], &shape)?;
                weighted_sum(t, r, v[1])
            }),
        },
    ));
    cases.push((
        "mul",
        Case {
            inputs: vec![randn(vec![m, n], rng), randn(vec![m, n], rng), randn(vec![m, n], rng)],
            build: Box::new(|t, v| {
                let y = t.mul(v[0], v[1])?;
                weighted_sum(t, y, v[2])
            }),
        },
    ));
    cases.push((
        "mul_row_broadcast",
        Case {
            inputs: vec![
                randn(vec![b, m, n], rng),
                randn(vec![b, 1, n], rng),
                randn(vec![b, m, n], rng),
            ],
            build: Box::new(|t, v| {
                let y = t.mul(v[0], v[1])?;
                weighted_sum(t, y, v[2])
            }),
        },
    ));
    cases.push((
        "repeat_cols",
        Case {
            inputs: vec![randn(vec![m, 1], rng), randn(vec![m, n], rng)],
            build: Box::new(move |t, v| {
                let cols = t.shape(v[1])[1];
                let y = t.repeat_cols(v[0], cols)?;
                weighted_sum(t, y, v[1])
            }),
        },
    ));
    cases.push((
        "add",
        Case {
            inputs: vec![randn(vec![m, n], rng), randn(vec![m, n], rng), randn(vec![m, n], rng)],
            build: Box::new(|t, v| {
                let y = t.add(v[0], v[1])?;
                weighted_sum(t, y, v[2])
            }),
        },
    ));
    let (c1, c2) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
    cases.push((
        "scale_add_scalar",
        Case {
            inputs: vec![randn(vec![m, n], rng), randn(vec![m, n], rng)],
            build: Box::new(move |t, v| {
                let s = t.scale(v[0], c1);
                let y = t.add_scalar(s, c2);
                weighted_sum(t, y, v[1])
            }),
        },
    ));
    cases.push((
        "concat_rows",
        Case {
            inputs: vec![
                randn(vec![m, n], rng),
                randn(vec![k, n], rng),
                randn(vec![m + k, n], rng),
            ],
            build: Box::new(|t, v| {
                let y = t.concat_rows(v[0], v[1])?;
                weighted_sum(t, y, v[2])
            }),
        },
    ));
    cases.push((
        "sum",
        Case {
            inputs: vec![randn(vec![m, n], rng)],
            build: Box::new(|t, v| Ok(t.sum(v[0]))),
        },
    ));
    let table_rows = rng.gen_range(4..8usize);
    let fields = rng.gen_range(2..4usize);
    let rows = rng.gen_range(2..4usize);
    let idx: Vec<usize> = (0..rows * fields)
        .map(|_| rng.gen_range(0..table_rows))
        .collect();
    let idx2 = idx.clone();
    cases.push((
        "gather_rows",
        Case {
            inputs: vec![
                randn(vec![table_rows, n], rng),
                randn(vec![rows, fields, n], rng),
            ],
            build: Box::new(move |t, v| {
                let e = t.gather_rows(v[0], &idx, fields)?;
                weighted_sum(t, e, v[1])
            }),
        },
    ));
    cases.push((
        "gather_sum",
        Case {
            inputs: vec![randn(vec![table_rows, 1], rng), randn(vec![rows], rng)],
            build: Box::new(move |t, v| {
                let s = t.gather_sum(v[0], &idx2, fields)?;
                weighted_sum(t, s, v[1])
            }),
        },
    ));
    cases.push((
        "fm_pairwise",
        Case {
            inputs: vec![randn(vec![b, m, n], rng), randn(vec![b], rng)],
            build: Box::new(|t, v| {
                let p = t.fm_pairwise(v[0])?;
                weighted_sum(t, p, v[1])
            }),
        },
    ));
    cases.push((
        "add_bias",
        Case {
            inputs: vec![randn(vec![m], rng), randn(vec![1], rng), randn(vec![m], rng)],
            build: Box::new(|t, v| {
                let y = t.add_bias(v[0], v[1])?;
                weighted_sum(t, y, v[2])
            }),
        },
    ));
    let labels: Vec<u8> = (0..m).map(|_| rng.gen_range(0..2u8)).collect();
    cases.push((
        "bce_mean",
        Case {
            inputs: vec![randn(vec![m], rng)],
            build: Box::new(move |t, v| {
                let p = t.sigmoid(v[0]);
                t.bce_mean(p, &labels)
            }),
        },
    ));
    let mask_seed: u64 = rng.gen();
    cases.push((
        "dropout",
        Case {
            inputs: vec![randn(vec![m, n], rng), randn(vec![m, n], rng)],
            build: Box::new(move |t, v| {
                // The mask is re-drawn from a fixed seed on every rebuild,
                // so the perturbed losses see the same subnetwork.
                let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
                let y = t.dropout(v[0], 0.5, &mut rng);
                weighted_sum(t, y, v[1])
            }),
        },
    ));
    cases
}

/// Finite-difference check of every tape op over `seeds` random draws.
pub fn op_suite<F: Real>(seeds: u64, h: f64, tol: f64) -> Result<Vec<CheckReport>> {
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + seed);
        for (i, (name, case)) in op_cases::<F>(&mut rng, h).into_iter().enumerate() {
            let err = check_case(&case, h)?;
            if seed == 0 {
                worst.push((name, err));
            } else {
                worst[i].1 = worst[i].1.max(err);
            }
        }
    }
    Ok(worst
        .into_iter()
        .map(|(name, err)| CheckReport {
            name: name.to_string(),
            max_rel_err: err,
            tolerance: tol,
        })
        .collect())
}

/// Worst finite-difference error of `d(loss)/d(param)` over every
/// parameter tensor of the model on one batch.
pub fn model_fd<F: Real>(
    params: &ModelParams<F>,
    batch: &[Instance],
    h: f64,
) -> Result<f64> {
    let eval = |p: &ModelParams<F>| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = model::bind(&mut tape, p);
        let (loss, _) = model::batch_loss(&mut tape, &bound, p, batch, &mut Phase::Eval)?;
        Ok(tape.value(loss).data()[0].to_f64())
    };

    let mut tape = Tape::new();
    let bound = model::bind(&mut tape, params);
    let (loss, _) = model::batch_loss(&mut tape, &bound, params, batch, &mut Phase::Eval)?;
    tape.backward(loss)?;
    let vars = bound.flat();
    let analytic: Vec<Vec<F>> = vars
        .iter()
        .map(|v| {
            tape.grad(*v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![F::ZERO; tape.value(*v).numel()])
        })
        .collect();

    let mut work = params.clone();
    let mut worst = 0.0f64;
    let n_tensors = work.visit().len();
    for ti in 0..n_tensors {
        let len = work.visit()[ti].1.numel();
        for j in 0..len {
            let x0 = work.visit()[ti].1.data()[j];
            let xp = x0 + F::from_f64(h);
            let xm = x0 - F::from_f64(h);
            work.visit_mut()[ti].1.data_mut()[j] = xp;
            let lp = eval(&work)?;
            work.visit_mut()[ti].1.data_mut()[j] = xm;
            let lm = eval(&work)?;
            work.visit_mut()[ti].1.data_mut()[j] = x0;
            let numeric = (lp - lm) / (xp.to_f64() - xm.to_f64());
            worst = worst.max(rel_err(analytic[ti][j].to_f64(), numeric));
        }
    }
    Ok(worst)
}

fn random_batch(dims: &ModelDims, vocab_sizes: &[usize], rng: &mut ChaCha8Rng) -> Vec<Instance> {
    let mut offsets = Vec::with_capacity(vocab_sizes.len());
    let mut acc = 0u32;
    for &s in vocab_sizes {
        offsets.push(acc);
        acc += s as u32;
    }
    (0..4)
        .map(|_| Instance {
            label: rng.gen_range(0..2u8),
            features: (0..dims.n_fields)
                .map(|f| offsets[f] + rng.gen_range(0..vocab_sizes[f] as u32))
                .collect(),
        })
        .collect()
}

/// End-to-end loss gradient checks for the gated bit and vector models.
pub fn end_to_end<F: Real>(seeds: u64, h: f64, tol: f64) -> Result<Vec<CheckReport>> {
    let vocab_sizes = [4usize, 3, 3, 2];
    let dims = ModelDims {
        n_features: vocab_sizes.iter().sum(),
        n_fields: vocab_sizes.len(),
        embed_dim: 3,
        attn_dim: 2,
        cie_hidden: vec![5],
    };
    let mut reports = Vec::new();
    for (name, variant) in [
        ("end_to_end_bit", Variant::GATED_BIT),
        ("end_to_end_vec", Variant::GATED_VEC),
    ] {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(0xe2e_0000 + seed);
            let params = ModelParams::<F>::init(dims.clone(), variant, rng.gen());
            let batch = random_batch(&dims, &vocab_sizes, &mut rng);
            worst = worst.max(model_fd(&params, &batch, h)?);
        }
        reports.push(CheckReport {
            name: name.to_string(),
            max_rel_err: worst,
            tolerance: tol,
        });
    }
    Ok(reports)
}

/// The whole double-precision suite: every op plus both end-to-end paths.
pub fn full_suite(seeds: u64) -> Result<Vec<CheckReport>> {
    let mut reports = op_suite::<f64>(seeds, 1e-5, 1e-6)?;
    reports.extend(end_to_end::<f64>(seeds, 1e-5, 1e-6)?);
    Ok(reports)
}
