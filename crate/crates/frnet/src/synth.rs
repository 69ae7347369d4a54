//! Planted-structure dataset generator for desk-scale experiments.
//!
//! Instances mimic app-log CTR data: ten categorical fields, one of which
//! acts as a context that switches interaction dimensions on and off per
//! value. The label score mixes three standardized components:
//!
//! * first-order feature weights,
//! * always-on pairwise interactions (learnable by a plain FM), and
//! * context-gated pairwise interactions, whose mask depends on the
//!   context field — only a context-aware model can recover the part
//!   that deviates from the average mask.
//!
//! The generator is fully deterministic for a fixed (rows, seed).

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{RawData, RawRecord};
use crate::error::Result;

/// Field layout: (name, token prefix, vocabulary size).
const FIELDS: &[(&str, &str, usize)] = &[
    ("ctx", "c", 8),
    ("user", "u", 150),
    ("item", "i", 250),
    ("daypart", "d", 7),
    ("weekday", "w", 7),
    ("env", "e", 4),
    ("link", "l", 9),
    ("region", "r", 24),
    ("cost", "p", 2),
    ("kind", "k", 6),
];

/// Latent dimensions: the first block is always active, the second is
/// gated per context value.
const K_BASE: usize = 3;
const K_CTX: usize = 3;
const K: usize = K_BASE + K_CTX;

/// Standardized-component mixing weights.
const FIRST_ORDER_SHARE: f64 = 0.72;
const BASE_PAIR_SHARE: f64 = 0.72;
const CTX_PAIR_SHARE: f64 = 0.42;

/// Label sharpness: larger means less label noise.
const SHARPNESS: f64 = 9.0;
/// Target positive rate.
const POSITIVE_RATE: f64 = 0.33;

pub const DEFAULT_ROWS: usize = 40_000;

struct Planted {
    /// Per-field, per-value latent vectors.
    z: Vec<Vec<[f64; K]>>,
    /// Per-field, per-value first-order weights.
    w: Vec<Vec<f64>>,
    /// Per-context-value 0/1 gate over the last `K_CTX` dims.
    gates: Vec<[f64; K_CTX]>,
}

fn plant(rng: &mut ChaCha8Rng) -> Planted {
    let normal = |rng: &mut ChaCha8Rng| -> f64 {
        // Box-Muller keeps the generator self-contained.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    };
    let z = FIELDS
        .iter()
        .map(|&(_, _, size)| {
            (0..size)
                .map(|_| {
                    let mut v = [0.0; K];
                    for x in v.iter_mut() {
                        *x = normal(rng);
                    }
                    v
                })
                .collect()
        })
        .collect();
    let w = FIELDS
        .iter()
        .map(|&(_, _, size)| (0..size).map(|_| normal(rng)).collect())
        .collect();
    let gates = (0..FIELDS[0].2)
        .map(|_| {
            let mut g = [0.0; K_CTX];
            for x in g.iter_mut() {
                *x = if rng.gen::<bool>() { 1.0 } else { 0.0 };
            }
            g
        })
        .collect();
    Planted { z, w, gates }
}

/// Raw score components of one instance: first-order, always-on pairwise,
/// context-gated pairwise.
fn components(p: &Planted, values: &[usize]) -> (f64, f64, f64) {
    let ctx = values[0];
    let gate = &p.gates[ctx];
    let mut first = 0.0;
    for (f, &v) in values.iter().enumerate() {
        first += p.w[f][v];
    }
    let mut base = 0.0;
    let mut gated = 0.0;
    for i in 1..values.len() {
        let zi = &p.z[i][values[i]];
        for j in (i + 1)..values.len() {
            let zj = &p.z[j][values[j]];
            for m in 0..K_BASE {
                base += zi[m] * zj[m];
            }
            for m in 0..K_CTX {
                gated += gate[m] * zi[K_BASE + m] * zj[K_BASE + m];
            }
        }
    }
    (first, base, gated)
}

fn standardize(xs: &mut [f64]) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-9);
    for x in xs.iter_mut() {
        *x = (*x - mean) / std;
    }
}

/// Generates `rows` labeled records.
pub fn generate(rows: usize, seed: u64) -> RawData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planted = plant(&mut rng);

    let draws: Vec<Vec<usize>> = (0..rows)
        .map(|_| {
            FIELDS
                .iter()
                .map(|&(_, _, size)| rng.gen_range(0..size))
                .collect()
        })
        .collect();

    let mut first: Vec<f64> = Vec::with_capacity(rows);
    let mut base: Vec<f64> = Vec::with_capacity(rows);
    let mut gated: Vec<f64> = Vec::with_capacity(rows);
    for values in &draws {
        let (f, b, g) = components(&planted, values);
        first.push(f);
        base.push(b);
        gated.push(g);
    }
    standardize(&mut first);
    standardize(&mut base);
    standardize(&mut gated);

    let mut scores: Vec<f64> = (0..rows)
        .map(|r| {
            FIRST_ORDER_SHARE * first[r] + BASE_PAIR_SHARE * base[r] + CTX_PAIR_SHARE * gated[r]
        })
        .collect();
    standardize(&mut scores);

    // Shift so that the expected positive rate lands near the target.
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    let cut = sorted[((rows as f64) * (1.0 - POSITIVE_RATE)) as usize % rows.max(1)];

    let records = draws
        .iter()
        .zip(&scores)
        .map(|(values, &s)| {
            let p = 1.0 / (1.0 + (-SHARPNESS * (s - cut)).exp());
            let label = (rng.gen::<f64>() < p) as u8;
            RawRecord {
                label,
                tokens: values
                    .iter()
                    .zip(FIELDS)
                    .map(|(&v, &(_, prefix, _))| format!("{prefix}{v}"))
                    .collect(),
            }
        })
        .collect();
    RawData {
        fields: FIELDS.iter().map(|&(name, _, _)| name.to_string()).collect(),
        records,
    }
}

/// Writes records as delimited text with a `label`-first header.
pub fn write_delimited(path: &Path, raw: &RawData, delimiter: char) -> Result<()> {
    let mut out = String::with_capacity(raw.records.len() * 64);
    out.push_str("label");
    for f in &raw.fields {
        out.push(delimiter);
        out.push_str(f);
    }
    out.push('\n');
    for rec in &raw.records {
        let _ = write!(out, "{}", rec.label);
        for tok in &rec.tokens {
            out.push(delimiter);
            out.push_str(tok);
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
