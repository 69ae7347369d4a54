//! Context-aware feature refinement.
//!
//! An information extraction unit (IEU) runs two parallel views over the
//! per-instance embedding matrix `E` (`batch x fields x d`):
//!
//! * a simplified single-head self-attention unit — no score scaling and
//!   no projection biases — capturing cross-feature relations, and
//! * a contextual extractor, an MLP over the flattened instance that
//!   compresses all fields into one `1 x d` context vector,
//!
//! whose outputs are combined by an element-wise product (bit form) or an
//! outer product down to one weight per field (vector form). Two
//! independent IEUs feed the complementary selection gate: one produces
//! gate logits, the other a complementary representation blended with the
//! original embeddings. The ablation [`Variant`] family swaps or removes
//! individual pieces of this composition.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Weight/CIE initialization: zero-mean normal with variance 0.01, keeping
/// early gate logits near zero so the gate starts as an even blend.
pub const INIT_STD: f64 = 0.1;
/// Initial learnable PReLU slope.
pub const INIT_PRELU_SLOPE: f64 = 0.25;

// ── variants ────────────────────────────────────────────────────────────

/// The refinement compositions, numbered 1..=13.
///
/// | id | output |
/// |----|--------|
/// | 1  | `E` (plain FM) |
/// | 2  | attention output alone |
/// | 3  | complement branch alone |
/// | 4  | full gate with the context extractor removed |
/// | 5  | `E + E_g` |
/// | 6  | `E ⊙ σ(W_v)` |
/// | 7  | `E ⊙ σ(W_b)` |
/// | 8  | `E ⊙ σ(W_v) + E` |
/// | 9  | `E ⊙ σ(W_b) + E` |
/// | 10 | `E ⊙ σ(W_v) + E_g` |
/// | 11 | `E ⊙ σ(W_b) + E_g` |
/// | 12 | gated blend, vector weights |
/// | 13 | gated blend, bit weights |
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant(u8);

impl Variant {
    pub const FM: Variant = Variant(1);
    pub const GATED_VEC: Variant = Variant(12);
    pub const GATED_BIT: Variant = Variant(13);

    pub fn from_id(id: u8) -> Result<Variant> {
        if (1..=13).contains(&id) {
            Ok(Variant(id))
        } else {
            Err(Error::Config(format!("unknown variant id {id} (want 1..=13)")))
        }
    }

    /// Accepts an id or one of the aliases `fm`, `frnet`, `frnet-vec`.
    pub fn parse(s: &str) -> Result<Variant> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fm" => Ok(Variant::FM),
            "frnet" => Ok(Variant::GATED_BIT),
            "frnet-vec" | "frnet_vec" => Ok(Variant::GATED_VEC),
            other => match other.parse::<u8>() {
                Ok(id) => Variant::from_id(id),
                Err(_) => Err(Error::Config(format!(
                    "unknown variant `{s}` (want 1..=13, fm, frnet or frnet-vec)"
                ))),
            },
        }
    }

    pub fn id(self) -> u8 {
        self.0
    }

    pub fn name(self) -> &'static str {
        match self.0 {
            1 => "fm",
            2 => "attention-only",
            3 => "complement-only",
            4 => "no-context",
            5 => "add-complement",
            6 => "vec-weights",
            7 => "bit-weights",
            8 => "vec-weights-residual",
            9 => "bit-weights-residual",
            10 => "vec-weights-complement",
            11 => "bit-weights-complement",
            12 => "frnet-vec",
            13 => "frnet",
            _ => unreachable!(),
        }
    }

    /// Identity refinement needs no refinement parameters.
    pub fn uses_refiner(self) -> bool {
        self.0 != 1
    }

    /// Whether the weight branch produces a full `fields x d` gate, which
    /// the gate-statistics analysis requires.
    pub fn has_bit_gate(self) -> bool {
        matches!(self.0, 7 | 9 | 11 | 13)
    }

    pub fn all() -> impl Iterator<Item = Variant> {
        (1..=13).map(Variant)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "#{} ({})", self.0, self.name())
    }
}

// ── parameters ──────────────────────────────────────────────────────────

/// One affine layer of the contextual extractor with its PReLU slope.
#[derive(Clone, Debug)]
pub struct CieLayer<F: Real> {
    /// `[out, in]`
    pub w: Tensor<F>,
    /// `[out]`
    pub b: Tensor<F>,
    /// `[1]`, learnable, shared across the layer.
    pub slope: Tensor<F>,
}

/// Learnable tensors of one information extraction unit.
#[derive(Clone, Debug)]
pub struct IeuParams<F: Real> {
    /// `[d, d_k]`
    pub w_q: Tensor<F>,
    pub w_k: Tensor<F>,
    pub w_v: Tensor<F>,
    /// `[d_k, d]`
    pub w_p: Tensor<F>,
    /// Hidden layers then the projection to width `d`; never empty.
    pub cie: Vec<CieLayer<F>>,
}

impl<F: Real> IeuParams<F> {
    pub fn init<R: Rng>(
        fields: usize,
        d: usize,
        d_k: usize,
        cie_hidden: &[usize],
        rng: &mut R,
    ) -> Self {
        let mut widths = vec![fields * d];
        widths.extend_from_slice(cie_hidden);
        widths.push(d);
        let cie = widths
            .windows(2)
            .map(|io| CieLayer {
                w: Tensor::randn(vec![io[1], io[0]], INIT_STD, rng),
                b: Tensor::zeros(vec![io[1]]),
                slope: Tensor::scalar(F::from_f64(INIT_PRELU_SLOPE)),
            })
            .collect();
        IeuParams {
            w_q: Tensor::randn(vec![d, d_k], INIT_STD, rng),
            w_k: Tensor::randn(vec![d, d_k], INIT_STD, rng),
            w_v: Tensor::randn(vec![d, d_k], INIT_STD, rng),
            w_p: Tensor::randn(vec![d_k, d], INIT_STD, rng),
            cie,
        }
    }

    /// Shape-chain check: attention maps `d -> d_k -> d`, extractor input
    /// `fields * d`, extractor output `d`.
    pub fn validate(&self, fields: usize, d: usize) -> Result<()> {
        let d_k = self.w_q.shape()[1];
        for (name, t, want) in [
            ("w_q", &self.w_q, [d, d_k]),
            ("w_k", &self.w_k, [d, d_k]),
            ("w_v", &self.w_v, [d, d_k]),
            ("w_p", &self.w_p, [d_k, d]),
        ] {
            if t.shape() != want {
                return Err(Error::Shape(format!(
                    "{name} has shape {:?}, want {want:?}",
                    t.shape()
                )));
            }
        }
        if d_k == 0 {
            return Err(Error::Shape("attention size must be positive".into()));
        }
        if self.cie.is_empty() {
            return Err(Error::Shape(
                "contextual extractor needs at least the final projection".into(),
            ));
        }
        let mut expect_in = fields * d;
        for (li, layer) in self.cie.iter().enumerate() {
            let s = layer.w.shape();
            if s.len() != 2 || s[1] != expect_in {
                return Err(Error::Shape(format!(
                    "extractor layer {li} weight {:?} does not chain from width {expect_in}",
                    s
                )));
            }
            if layer.b.shape() != [s[0]] || layer.slope.numel() != 1 {
                return Err(Error::Shape(format!(
                    "extractor layer {li} bias/slope shapes are off"
                )));
            }
            expect_in = s[0];
        }
        if expect_in != d {
            return Err(Error::Shape(format!(
                "extractor output width {expect_in}, want {d}"
            )));
        }
        Ok(())
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<F>)>) {
        out.push((format!("{prefix}.w_q"), &self.w_q));
        out.push((format!("{prefix}.w_k"), &self.w_k));
        out.push((format!("{prefix}.w_v"), &self.w_v));
        out.push((format!("{prefix}.w_p"), &self.w_p));
        for (i, l) in self.cie.iter().enumerate() {
            out.push((format!("{prefix}.cie.{i}.w"), &l.w));
            out.push((format!("{prefix}.cie.{i}.b"), &l.b));
            out.push((format!("{prefix}.cie.{i}.slope"), &l.slope));
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<F>)>) {
        out.push((format!("{prefix}.w_q"), &mut self.w_q));
        out.push((format!("{prefix}.w_k"), &mut self.w_k));
        out.push((format!("{prefix}.w_v"), &mut self.w_v));
        out.push((format!("{prefix}.w_p"), &mut self.w_p));
        for (i, l) in self.cie.iter_mut().enumerate() {
            out.push((format!("{prefix}.cie.{i}.w"), &mut l.w));
            out.push((format!("{prefix}.cie.{i}.b"), &mut l.b));
            out.push((format!("{prefix}.cie.{i}.slope"), &mut l.slope));
        }
    }
}

/// Both independent IEUs: the weight branch and the complement branch
/// share no tensors.
#[derive(Clone, Debug)]
pub struct FrnetParams<F: Real> {
    pub ieu_w: IeuParams<F>,
    pub ieu_g: IeuParams<F>,
}

impl<F: Real> FrnetParams<F> {
    pub fn init<R: Rng>(
        fields: usize,
        d: usize,
        d_k: usize,
        cie_hidden: &[usize],
        rng: &mut R,
    ) -> Self {
        FrnetParams {
            ieu_w: IeuParams::init(fields, d, d_k, cie_hidden, rng),
            ieu_g: IeuParams::init(fields, d, d_k, cie_hidden, rng),
        }
    }

    pub fn validate(&self, fields: usize, d: usize) -> Result<()> {
        self.ieu_w.validate(fields, d)?;
        self.ieu_g.validate(fields, d)
    }

    pub fn visit<'a>(&'a self, out: &mut Vec<(String, &'a Tensor<F>)>) {
        self.ieu_w.visit("ieu_w", out);
        self.ieu_g.visit("ieu_g", out);
    }

    pub fn visit_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor<F>)>) {
        self.ieu_w.visit_mut("ieu_w", out);
        self.ieu_g.visit_mut("ieu_g", out);
    }
}

// ── tape bindings ───────────────────────────────────────────────────────

pub struct BoundCieLayer {
    pub w: Var,
    pub b: Var,
    pub slope: Var,
}

pub struct BoundIeu {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_p: Var,
    pub cie: Vec<BoundCieLayer>,
}

pub struct BoundFrnet {
    pub ieu_w: BoundIeu,
    pub ieu_g: BoundIeu,
}

fn bind_ieu<F: Real>(tape: &mut Tape<F>, p: &IeuParams<F>) -> BoundIeu {
    BoundIeu {
        w_q: tape.leaf(p.w_q.clone()),
        w_k: tape.leaf(p.w_k.clone()),
        w_v: tape.leaf(p.w_v.clone()),
        w_p: tape.leaf(p.w_p.clone()),
        cie: p
            .cie
            .iter()
            .map(|l| BoundCieLayer {
                w: tape.leaf(l.w.clone()),
                b: tape.leaf(l.b.clone()),
                slope: tape.leaf(l.slope.clone()),
            })
            .collect(),
    }
}

pub fn bind_frnet<F: Real>(tape: &mut Tape<F>, p: &FrnetParams<F>) -> BoundFrnet {
    BoundFrnet {
        ieu_w: bind_ieu(tape, &p.ieu_w),
        ieu_g: bind_ieu(tape, &p.ieu_g),
    }
}

impl BoundIeu {
    fn flat(&self, out: &mut Vec<Var>) {
        out.extend([self.w_q, self.w_k, self.w_v, self.w_p]);
        for l in &self.cie {
            out.extend([l.w, l.b, l.slope]);
        }
    }
}

impl BoundFrnet {
    pub fn flat(&self, out: &mut Vec<Var>) {
        self.ieu_w.flat(out);
        self.ieu_g.flat(out);
    }
}

// ── forward phase ───────────────────────────────────────────────────────

/// Training applies inverted dropout after each hidden extractor
/// activation; evaluation is deterministic.
pub enum Phase<'r> {
    Train { dropout: f64, rng: &'r mut ChaCha8Rng },
    Eval,
}

// ── operations ──────────────────────────────────────────────────────────

/// Simplified self-attention: `softmax(QK^T) V W^P` with `Q,K,V = E W^{Q,K,V}`.
/// Single head, no `1/sqrt(d_k)` scaling and no projection biases.
pub fn self_attention<F: Real>(tape: &mut Tape<F>, e: Var, p: &BoundIeu) -> Result<Var> {
    let q = tape.matmul(e, p.w_q)?;
    let k = tape.matmul(e, p.w_k)?;
    let v = tape.matmul(e, p.w_v)?;
    let scores = tape.bmm_nt(q, k)?;
    let attn = tape.row_softmax(scores);
    let mixed = tape.bmm(attn, v)?;
    tape.matmul(mixed, p.w_p)
}

/// Contextual extractor: flattens each instance to `1 x (fields * d)` and
/// runs the PReLU MLP down to a `batch x 1 x d` context vector.
pub fn cie<F: Real>(
    tape: &mut Tape<F>,
    e: Var,
    p: &BoundIeu,
    phase: &mut Phase<'_>,
) -> Result<Var> {
    let se = tape.shape(e).to_vec();
    if se.len() != 3 {
        return Err(Error::Shape(format!(
            "contextual extractor expects [batch, fields, d], got {se:?}"
        )));
    }
    if p.cie.is_empty() {
        return Err(Error::Shape(
            "contextual extractor needs at least the final projection".into(),
        ));
    }
    let (bsz, f, d) = (se[0], se[1], se[2]);
    let mut h = tape.reshape(e, &[bsz, f * d])?;
    let last = p.cie.len() - 1;
    for (i, layer) in p.cie.iter().enumerate() {
        h = tape.linear(h, layer.w, layer.b)?;
        h = tape.prelu(h, layer.slope)?;
        if i < last {
            if let Phase::Train { dropout, rng } = phase {
                if *dropout > 0.0 {
                    h = tape.dropout(h, *dropout, rng);
                }
            }
        }
    }
    let width = tape.shape(h)[1];
    if width != d {
        return Err(Error::Shape(format!(
            "extractor produced width {width}, embeddings have width {d}"
        )));
    }
    tape.reshape(h, &[bsz, 1, d])
}

/// Bit-form IEU: context vector broadcast-multiplied over the attention
/// rows, `batch x fields x d`.
pub fn ieu_bit<F: Real>(
    tape: &mut Tape<F>,
    e: Var,
    p: &BoundIeu,
    phase: &mut Phase<'_>,
) -> Result<Var> {
    let o_vec = self_attention(tape, e, p)?;
    let o_bit = cie(tape, e, p, phase)?;
    tape.mul(o_vec, o_bit)
}

/// Vector-form IEU: outer product of the attention rows with the context
/// vector, one weight per field (`batch x fields x 1`).
pub fn ieu_vec<F: Real>(
    tape: &mut Tape<F>,
    e: Var,
    p: &BoundIeu,
    phase: &mut Phase<'_>,
) -> Result<Var> {
    let o_vec = self_attention(tape, e, p)?;
    let o_bit = cie(tape, e, p, phase)?;
    tape.bmm_nt(o_vec, o_bit)
}

/// Complementary selection gate:
/// `E ⊙ σ(W) + E_g ⊙ (1 − σ(W))`, a per-element convex blend. `W` may be
/// `batch x fields x d` or `batch x fields x 1`; the single-column form is
/// tiled across the embedding width.
pub fn csgate<F: Real>(tape: &mut Tape<F>, e: Var, e_g: Var, w: Var) -> Result<Var> {
    let se = tape.shape(e).to_vec();
    let sw = tape.shape(w).to_vec();
    if tape.shape(e_g) != se.as_slice() {
        return Err(Error::Shape(format!(
            "gate operands differ: E {:?} vs complement {:?}",
            se,
            tape.shape(e_g)
        )));
    }
    let d = *se.last().unwrap_or(&0);
    let gate = tape.sigmoid(w);
    let gate = if sw == se {
        gate
    } else if sw.len() == se.len()
        && sw.last() == Some(&1)
        && sw[..sw.len() - 1] == se[..se.len() - 1]
        && d != 1
    {
        tape.repeat_cols(gate, d)?
    } else if sw.last() == Some(&1) && sw[..sw.len() - 1] == se[..se.len() - 1] {
        gate
    } else {
        return Err(Error::Shape(format!(
            "gate weights {sw:?} not broadcastable to {se:?}"
        )));
    };
    let selected = tape.mul(e, gate)?;
    let neg = tape.scale(gate, -1.0);
    let inverse = tape.add_scalar(neg, 1.0);
    let complement = tape.mul(e_g, inverse)?;
    tape.add(selected, complement)
}

/// Applies the chosen [`Variant`] to the embedding matrix. Variant 1
/// returns `e` unchanged; every other variant draws on the bound
/// refinement parameters.
pub fn refine<F: Real>(
    tape: &mut Tape<F>,
    e: Var,
    params: Option<&BoundFrnet>,
    variant: Variant,
    phase: &mut Phase<'_>,
) -> Result<Var> {
    if !variant.uses_refiner() {
        return Ok(e);
    }
    let p = params.ok_or_else(|| {
        Error::Config(format!("variant {variant} needs refinement parameters"))
    })?;
    let d = *tape.shape(e).last().unwrap();
    match variant.id() {
        2 => self_attention(tape, e, &p.ieu_g),
        3 => ieu_bit(tape, e, &p.ieu_g, phase),
        4 => {
            // Context extractor removed: both IEUs collapse to attention.
            let e_g = self_attention(tape, e, &p.ieu_g)?;
            let w = self_attention(tape, e, &p.ieu_w)?;
            csgate(tape, e, e_g, w)
        }
        5 => {
            let e_g = ieu_bit(tape, e, &p.ieu_g, phase)?;
            tape.add(e, e_g)
        }
        6 | 8 => {
            let w = ieu_vec(tape, e, &p.ieu_w, phase)?;
            let g = tape.sigmoid(w);
            let g = if d != 1 { tape.repeat_cols(g, d)? } else { g };
            let weighted = tape.mul(e, g)?;
            if variant.id() == 8 {
                tape.add(weighted, e)
            } else {
                Ok(weighted)
            }
        }
        7 | 9 => {
            let w = ieu_bit(tape, e, &p.ieu_w, phase)?;
            let g = tape.sigmoid(w);
            let weighted = tape.mul(e, g)?;
            if variant.id() == 9 {
                tape.add(weighted, e)
            } else {
                Ok(weighted)
            }
        }
        10 => {
            let e_g = ieu_bit(tape, e, &p.ieu_g, phase)?;
            let w = ieu_vec(tape, e, &p.ieu_w, phase)?;
            let g = tape.sigmoid(w);
            let g = if d != 1 { tape.repeat_cols(g, d)? } else { g };
            let weighted = tape.mul(e, g)?;
            tape.add(weighted, e_g)
        }
        11 => {
            let e_g = ieu_bit(tape, e, &p.ieu_g, phase)?;
            let w = ieu_bit(tape, e, &p.ieu_w, phase)?;
            let g = tape.sigmoid(w);
            let weighted = tape.mul(e, g)?;
            tape.add(weighted, e_g)
        }
        12 => {
            let e_g = ieu_bit(tape, e, &p.ieu_g, phase)?;
            let w = ieu_vec(tape, e, &p.ieu_w, phase)?;
            csgate(tape, e, e_g, w)
        }
        13 => {
            let e_g = ieu_bit(tape, e, &p.ieu_g, phase)?;
            let w = ieu_bit(tape, e, &p.ieu_w, phase)?;
            csgate(tape, e, e_g, w)
        }
        _ => unreachable!("variant ids are validated at construction"),
    }
}

/// Gate openness `σ(W_b)` of the bit weight branch, for distribution
/// analysis. Only meaningful for variants with a bit-level gate.
pub fn bit_gate<F: Real>(
    tape: &mut Tape<F>,
    e: Var,
    p: &BoundFrnet,
    phase: &mut Phase<'_>,
) -> Result<Var> {
    let w = ieu_bit(tape, e, &p.ieu_w, phase)?;
    Ok(tape.sigmoid(w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn ones_ieu(fields: usize, d: usize) -> IeuParams<f64> {
        IeuParams {
            w_q: Tensor::full(vec![d, d], 1.0),
            w_k: Tensor::full(vec![d, d], 1.0),
            w_v: Tensor::full(vec![d, d], 1.0),
            w_p: Tensor::full(vec![d, d], 1.0),
            cie: vec![CieLayer {
                w: Tensor::full(vec![d, fields * d], 1.0),
                b: Tensor::zeros(vec![d]),
                slope: Tensor::scalar(0.25),
            }],
        }
    }

    fn e_batch(rows: &[f64], fields: usize, d: usize) -> Tensor<f64> {
        Tensor::new(vec![1, fields, d], rows.to_vec()).unwrap()
    }

    #[test]
    fn attention_hand_case() {
        // f=2, d=d_k=1, all weights 1, E=[[1],[2]]:
        // softmax rows (0.2689, 0.7311) and (0.1192, 0.8808) give
        // weighted sums 1.7311 and 1.8808.
        let mut tape = Tape::<f64>::new();
        let p = ones_ieu(2, 1);
        let bound = bind_ieu(&mut tape, &p);
        let e = tape.leaf(e_batch(&[1.0, 2.0], 2, 1));
        let o = self_attention(&mut tape, e, &bound).unwrap();
        let v = tape.value(o).data();
        assert!((v[0] - 1.7311).abs() < 1e-4, "{v:?}");
        assert!((v[1] - 1.8808).abs() < 1e-4, "{v:?}");
    }

    #[test]
    fn attention_of_zeros_is_zero() {
        let mut tape = Tape::<f64>::new();
        let p = ones_ieu(3, 2);
        let bound = bind_ieu(&mut tape, &p);
        let e = tape.leaf(Tensor::zeros(vec![1, 3, 2]));
        let o = self_attention(&mut tape, e, &bound).unwrap();
        assert!(tape.value(o).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = IeuParams::<f64>::init(3, 4, 2, &[], &mut rng);
        let e = Tensor::randn(vec![1, 3, 4], 1.0, &mut rng);

        let run = |input: &Tensor<f64>| -> Vec<f64> {
            let mut tape = Tape::new();
            let bound = bind_ieu(&mut tape, &p);
            let ev = tape.leaf(input.clone());
            let o = self_attention(&mut tape, ev, &bound).unwrap();
            tape.value(o).data().to_vec()
        };

        let base = run(&e);
        // Swap rows 0 and 2.
        let mut swapped = e.data().to_vec();
        for k in 0..4 {
            swapped.swap(k, 2 * 4 + k);
        }
        let perm = run(&Tensor::new(vec![1, 3, 4], swapped).unwrap());
        for k in 0..4 {
            assert!((base[k] - perm[2 * 4 + k]).abs() < 1e-12);
            assert!((base[2 * 4 + k] - perm[k]).abs() < 1e-12);
            assert!((base[4 + k] - perm[4 + k]).abs() < 1e-12);
        }
    }

    #[test]
    fn cie_hand_cases() {
        // Zero projection -> zero context for any input.
        let mut p = ones_ieu(2, 1);
        p.cie[0].w = Tensor::zeros(vec![1, 2]);
        let mut tape = Tape::<f64>::new();
        let bound = bind_ieu(&mut tape, &p);
        let e = tape.leaf(e_batch(&[3.0, -4.0], 2, 1));
        let o = cie(&mut tape, e, &bound, &mut Phase::Eval).unwrap();
        assert_eq!(tape.value(o).data(), &[0.0]);

        // W_L = [[1,1]], b = 0, slope 0.25 on E=[[1],[2]] -> PReLU(3) = 3.
        let p = ones_ieu(2, 1);
        let mut tape = Tape::<f64>::new();
        let bound = bind_ieu(&mut tape, &p);
        let e = tape.leaf(e_batch(&[1.0, 2.0], 2, 1));
        let o = cie(&mut tape, e, &bound, &mut Phase::Eval).unwrap();
        assert_eq!(tape.shape(o), &[1, 1, 1]);
        assert_eq!(tape.value(o).data(), &[3.0]);
    }

    #[test]
    fn cie_distinguishes_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = IeuParams::<f64>::init(3, 2, 2, &[5], &mut rng);
        let a = Tensor::randn(vec![1, 3, 2], 1.0, &mut rng);
        let mut b_data = a.data().to_vec();
        b_data[0] += 1.5; // differ in one feature's embedding
        let b = Tensor::new(vec![1, 3, 2], b_data).unwrap();

        let run = |input: &Tensor<f64>| -> Vec<f64> {
            let mut tape = Tape::new();
            let bound = bind_ieu(&mut tape, &p);
            let ev = tape.leaf(input.clone());
            let o = cie(&mut tape, ev, &bound, &mut Phase::Eval).unwrap();
            tape.value(o).data().to_vec()
        };
        let oa = run(&a);
        let ob = run(&b);
        let diff: f64 = oa.iter().zip(&ob).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 0.0, "context vectors must differ across instances");
    }

    #[test]
    fn integration_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = IeuParams::<f64>::init(2, 2, 2, &[], &mut rng);

        // O_bit forced to ones leaves O_vec unchanged; zeros kill it.
        let mut tape = Tape::<f64>::new();
        let bound = bind_ieu(&mut tape, &p);
        let e = tape.leaf(Tensor::randn(vec![1, 2, 2], 1.0, &mut rng));
        let o_vec = self_attention(&mut tape, e, &bound).unwrap();
        let ones = tape.leaf(Tensor::full(vec![1, 1, 2], 1.0));
        let kept = tape.mul(o_vec, ones).unwrap();
        assert_eq!(tape.value(kept).data(), tape.value(o_vec).data());
        let zeros = tape.leaf(Tensor::zeros(vec![1, 1, 2]));
        let killed = tape.mul(o_vec, zeros).unwrap();
        assert!(tape.value(killed).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vec_weights_are_row_sums_against_context() {
        let mut tape = Tape::<f64>::new();
        let o_vec = tape.leaf(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let o_bit = tape.leaf(Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap());
        let w = tape.bmm_nt(o_vec, o_bit).unwrap();
        assert_eq!(tape.shape(w), &[1, 2, 1]);
        assert_eq!(tape.value(w).data(), &[3.0, 7.0]);
    }

    #[test]
    fn gate_hand_cases() {
        let mut tape = Tape::<f64>::new();
        let e = tape.leaf(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let e_g = tape.leaf(Tensor::new(vec![1, 2, 2], vec![4.0, 3.0, 2.0, 1.0]).unwrap());

        // W = 0: exact midpoint.
        let w0 = tape.leaf(Tensor::zeros(vec![1, 2, 2]));
        let mid = csgate(&mut tape, e, e_g, w0).unwrap();
        assert_eq!(tape.value(mid).data(), &[2.5, 2.5, 2.5, 2.5]);

        // W = +100: saturated toward E.
        let wbig = tape.leaf(Tensor::full(vec![1, 2, 2], 100.0));
        let sat = csgate(&mut tape, e, e_g, wbig).unwrap();
        for (s, x) in tape.value(sat).data().iter().zip(tape.value(e).data()) {
            assert!((s - x).abs() < 1e-6);
        }

        // E = E_g: any gate returns E (up to rounding).
        let wr = tape.leaf(Tensor::new(vec![1, 2, 2], vec![0.3, -2.0, 5.0, 0.0]).unwrap());
        let same = csgate(&mut tape, e, e, wr).unwrap();
        for (s, x) in tape.value(same).data().iter().zip(tape.value(e).data()) {
            assert!((s - x).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_is_convex_and_strictly_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let mut tape = Tape::<f64>::new();
            let e = tape.leaf(Tensor::randn(vec![2, 3, 4], 1.0, &mut rng));
            let e_g = tape.leaf(Tensor::randn(vec![2, 3, 4], 1.0, &mut rng));
            let w = tape.leaf(Tensor::randn(vec![2, 3, 4], 3.0, &mut rng));
            let g = tape.sigmoid(w);
            for &v in tape.value(g).data() {
                assert!(v > 0.0 && v < 1.0);
            }
            let out = csgate(&mut tape, e, e_g, w).unwrap();
            let (ev, gv, ov) = (
                tape.value(e).data(),
                tape.value(e_g).data(),
                tape.value(out).data(),
            );
            for ((&x, &y), &r) in ev.iter().zip(gv).zip(ov) {
                let (lo, hi) = if x < y { (x, y) } else { (y, x) };
                assert!(r >= lo - 1e-12 && r <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn variant_one_is_bit_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::<f64>::new();
        let e = tape.leaf(Tensor::randn(vec![2, 3, 4], 1.0, &mut rng));
        let out = refine(&mut tape, e, None, Variant::FM, &mut Phase::Eval).unwrap();
        assert_eq!(out, e);
    }

    #[test]
    fn zero_refiner_halves_the_embeddings() {
        // All IEU weights zero: O_vec = 0 and O_bit = 0 give W = 0 and
        // E_g = 0, so the gate blends E with zeros at sigma(0) = 0.5.
        let zero_ieu = |fields: usize, d: usize| IeuParams::<f64> {
            w_q: Tensor::zeros(vec![d, d]),
            w_k: Tensor::zeros(vec![d, d]),
            w_v: Tensor::zeros(vec![d, d]),
            w_p: Tensor::zeros(vec![d, d]),
            cie: vec![CieLayer {
                w: Tensor::zeros(vec![d, fields * d]),
                b: Tensor::zeros(vec![d]),
                slope: Tensor::scalar(0.25),
            }],
        };
        let p = FrnetParams {
            ieu_w: zero_ieu(2, 3),
            ieu_g: zero_ieu(2, 3),
        };
        let mut tape = Tape::<f64>::new();
        let bound = bind_frnet(&mut tape, &p);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = tape.leaf(Tensor::randn(vec![1, 2, 3], 1.0, &mut rng));
        let out = refine(&mut tape, e, Some(&bound), Variant::GATED_BIT, &mut Phase::Eval).unwrap();
        for (o, x) in tape.value(out).data().iter().zip(tape.value(e).data()) {
            assert!((o - 0.5 * x).abs() < 1e-12);
        }
    }

    #[test]
    fn variant_four_equals_gate_over_attention_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = FrnetParams::<f64>::init(3, 2, 2, &[4], &mut rng);
        let e_t = Tensor::randn(vec![2, 3, 2], 1.0, &mut rng);

        let mut tape = Tape::new();
        let bound = bind_frnet(&mut tape, &p);
        let e = tape.leaf(e_t.clone());
        let via_variant = refine(
            &mut tape,
            e,
            Some(&bound),
            Variant::from_id(4).unwrap(),
            &mut Phase::Eval,
        )
        .unwrap();
        let e_g = self_attention(&mut tape, e, &bound.ieu_g).unwrap();
        let w = self_attention(&mut tape, e, &bound.ieu_w).unwrap();
        let manual = csgate(&mut tape, e, e_g, w).unwrap();
        assert_eq!(tape.value(via_variant).data(), tape.value(manual).data());
    }

    #[test]
    fn bit_and_vec_agree_when_d_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = FrnetParams::<f64>::init(4, 1, 1, &[3], &mut rng);
        let e_t = Tensor::randn(vec![2, 4, 1], 1.0, &mut rng);
        let run = |variant: Variant| -> Vec<f64> {
            let mut tape = Tape::new();
            let bound = bind_frnet(&mut tape, &p);
            let e = tape.leaf(e_t.clone());
            let out = refine(&mut tape, e, Some(&bound), variant, &mut Phase::Eval).unwrap();
            tape.value(out).data().to_vec()
        };
        assert_eq!(run(Variant::GATED_BIT), run(Variant::GATED_VEC));
    }

    #[test]
    fn branches_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let p = FrnetParams::<f64>::init(3, 2, 2, &[4], &mut rng);
        let e_t = Tensor::randn(vec![1, 3, 2], 1.0, &mut rng);

        let gate_of = |p: &FrnetParams<f64>| -> Vec<f64> {
            let mut tape = Tape::new();
            let bound = bind_frnet(&mut tape, p);
            let e = tape.leaf(e_t.clone());
            let g = bit_gate(&mut tape, e, &bound, &mut Phase::Eval).unwrap();
            tape.value(g).data().to_vec()
        };
        let complement_of = |p: &FrnetParams<f64>| -> Vec<f64> {
            let mut tape = Tape::new();
            let bound = bind_frnet(&mut tape, p);
            let e = tape.leaf(e_t.clone());
            let c = ieu_bit(&mut tape, e, &bound.ieu_g, &mut Phase::Eval).unwrap();
            tape.value(c).data().to_vec()
        };

        let mut zero_g = p.clone();
        zero_g.ieu_g = IeuParams {
            w_q: Tensor::zeros(vec![2, 2]),
            w_k: Tensor::zeros(vec![2, 2]),
            w_v: Tensor::zeros(vec![2, 2]),
            w_p: Tensor::zeros(vec![2, 2]),
            cie: vec![CieLayer {
                w: Tensor::zeros(vec![2, 6]),
                b: Tensor::zeros(vec![2]),
                slope: Tensor::scalar(0.25),
            }],
        };
        assert_eq!(gate_of(&p), gate_of(&zero_g));

        let mut zero_w = p.clone();
        zero_w.ieu_w = zero_g.ieu_g.clone();
        assert_eq!(complement_of(&p), complement_of(&zero_w));
    }

    #[test]
    fn all_variants_preserve_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let p = FrnetParams::<f64>::init(3, 4, 2, &[5], &mut rng);
        let e_t = Tensor::randn(vec![2, 3, 4], 1.0, &mut rng);
        for variant in Variant::all() {
            let mut tape = Tape::new();
            let bound = bind_frnet(&mut tape, &p);
            let e = tape.leaf(e_t.clone());
            let out = refine(&mut tape, e, Some(&bound), variant, &mut Phase::Eval).unwrap();
            assert_eq!(tape.shape(out), &[2, 3, 4], "variant {variant}");
            assert!(tape.value(out).all_finite());
        }
    }

    #[test]
    fn context_sensitivity_of_shared_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let p = FrnetParams::<f64>::init(3, 2, 2, &[4], &mut rng);
        // Two instances sharing rows 0 and 1, differing in row 2.
        let shared: Vec<f64> = Tensor::randn(vec![4], 1.0, &mut rng).into_data();
        let mut a = shared.clone();
        let mut b = shared;
        a.extend(Tensor::<f64>::randn(vec![2], 1.0, &mut rng).into_data());
        b.extend(Tensor::<f64>::randn(vec![2], 1.0, &mut rng).into_data());

        let run = |data: Vec<f64>| -> Vec<f64> {
            let mut tape = Tape::new();
            let bound = bind_frnet(&mut tape, &p);
            let e = tape.leaf(Tensor::new(vec![1, 3, 2], data).unwrap());
            let out =
                refine(&mut tape, e, Some(&bound), Variant::GATED_BIT, &mut Phase::Eval).unwrap();
            tape.value(out).data().to_vec()
        };
        let oa = run(a);
        let ob = run(b);
        let shared_diff: f64 = oa[..4]
            .iter()
            .zip(&ob[..4])
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(
            shared_diff > 0.0,
            "shared features must be re-represented per context"
        );
    }

    #[test]
    fn variant_parsing() {
        assert_eq!(Variant::parse("fm").unwrap(), Variant::FM);
        assert_eq!(Variant::parse("frnet").unwrap(), Variant::GATED_BIT);
        assert_eq!(Variant::parse("frnet-vec").unwrap(), Variant::GATED_VEC);
        assert_eq!(Variant::parse("7").unwrap().id(), 7);
        assert!(Variant::parse("14").is_err());
        assert!(Variant::parse("0").is_err());
        assert!(Variant::parse("nope").is_err());
    }
}
