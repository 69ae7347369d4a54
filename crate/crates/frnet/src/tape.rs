//! Reverse-mode autodiff over a linear operation tape.
//!
//! Every forward op appends one record; `backward` replays the records in
//! reverse, accumulating adjoints additively so a tensor used twice
//! receives both contributions. Model tensors carry a leading batch
//! extent and the kernels treat it as an outer loop with independent
//! gradients, so results do not depend on thread count.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F: Real> {
    Leaf,
    /// a: `[m,k]` or `[B,m,k]`, b: `[k,n]`.
    MatMul { a: usize, b: usize },
    /// a: `[B,m,k]`; b: `[B,k,n]`, or `[B,n,k]` when `nt` (multiplied transposed).
    Bmm { a: usize, b: usize, nt: bool },
    RowSoftmax { a: usize },
    Sigmoid { a: usize },
    Prelu { a: usize, slope: usize },
    /// x: `[m,in]`, w: `[out,in]`, b: `[out]` -> `[m,out]`.
    Linear { x: usize, w: usize, b: usize },
    Reshape { a: usize },
    Mul { a: usize, b: usize, row_broadcast: bool },
    RepeatCols { a: usize },
    Add { a: usize, b: usize },
    Scale { a: usize, c: F },
    AddScalar { a: usize },
    ConcatRows { a: usize, b: usize },
    Sum { a: usize },
    /// table: `[n,d]`; one output row per index.
    GatherRows { table: usize, idx: Vec<usize> },
    /// table: `[n]` or `[n,1]`; sums `fields` consecutive lookups per row.
    GatherSum { table: usize, idx: Vec<usize>, fields: usize },
    /// e: `[B,f,d]` -> `[B]`, the square-of-sums pairwise interaction.
    FmPairwise { e: usize },
    /// a: `[B]`, bias: `[1]`.
    AddBias { a: usize, bias: usize },
    /// p: `[B]` probabilities, labels 0/1 -> `[1]` mean cross entropy.
    BceMean { p: usize, labels: Vec<F> },
    Dropout { a: usize, mask: Vec<F> },
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Ordered record of executed operations plus per-node adjoint buffers.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Registers an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Adjoint of a node; populated by `backward` for every node the loss
    /// reaches.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    // ── forward ops ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 {
            return Err(Error::Shape(format!(
                "matmul rhs must be rank 2, got {sa:?} x {sb:?}"
            )));
        }
        let (batch, m, k) = match sa.len() {
            2 => (1, sa[0], sa[1]),
            3 => (sa[0], sa[1], sa[2]),
            _ => {
                return Err(Error::Shape(format!(
                    "matmul lhs must be rank 2 or 3, got {sa:?} x {sb:?}"
                )))
            }
        };
        if k != sb[0] {
            return Err(Error::Shape(format!(
                "matmul inner dims differ: {sa:?} x {sb:?}"
            )));
        }
        let n = sb[1];
        let mut out = vec![F::ZERO; batch * m * n];
        {
            let av = self.nodes[a.0].value.data();
            let bv = self.nodes[b.0].value.data();
            if batch == 1 {
                mm_nn(av, bv, &mut out, m, k, n);
            } else {
                batched(&mut out, m * n, |bi, o| {
                    mm_nn(&av[bi * m * k..(bi + 1) * m * k], bv, o, m, k, n)
                });
            }
        }
        let shape = if sa.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a: a.0, b: b.0 }))
    }

    /// Batched product `a @ b`, both carrying the same leading batch extent.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, false)
    }

    /// Batched product against the transpose, `a @ b^T`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, true)
    }

    fn bmm_impl(&mut self, a: Var, b: Var, nt: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::Shape(format!(
                "bmm expects matching rank-3 batches, got {sa:?} x {sb:?}"
            )));
        }
        let (bsz, m, k) = (sa[0], sa[1], sa[2]);
        let (inner, n) = if nt { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if inner != k {
            return Err(Error::Shape(format!(
                "bmm inner dims differ: {sa:?} x {sb:?} (nt={nt})"
            )));
        }
        let mut out = vec![F::ZERO; bsz * m * n];
        {
            let av = self.nodes[a.0].value.data();
            let bv = self.nodes[b.0].value.data();
            batched(&mut out, m * n, |bi, o| {
                let ab = &av[bi * m * k..(bi + 1) * m * k];
                let bb = &bv[bi * n * k..(bi + 1) * n * k];
                if nt {
                    mm_nt(ab, bb, o, m, k, n);
                } else {
                    mm_nn(ab, bb, o, m, k, n);
                }
            });
        }
        Ok(self.push(
            Tensor::new(vec![bsz, m, n], out)?,
            Op::Bmm { a: a.0, b: b.0, nt },
        ))
    }

    /// Softmax over the last axis, computed with per-row max subtraction.
    pub fn row_softmax(&mut self, a: Var) -> Var {
        let value = {
            let t = &self.nodes[a.0].value;
            let n = *t.shape().last().expect("tensor shapes are non-empty");
            let mut out = t.data().to_vec();
            row_apply(&mut out, n, |row| {
                let mut mx = row[0];
                for &v in row.iter() {
                    mx = mx.maximum(v);
                }
                let mut sum = F::ZERO;
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            });
            Tensor::new(t.shape().to_vec(), out).expect("shape preserved")
        };
        self.push(value, Op::RowSoftmax { a: a.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let out: Vec<F> = t
            .data()
            .iter()
            .map(|&x| F::ONE / (F::ONE + (-x).exp()))
            .collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("shape preserved");
        self.push(value, Op::Sigmoid { a: a.0 })
    }

    /// PReLU with one learnable slope: `x` for `x >= 0`, `slope * x` otherwise.
    pub fn prelu(&mut self, a: Var, slope: Var) -> Result<Var> {
        if self.nodes[slope.0].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "prelu slope must be a single scalar, got {:?}",
                self.shape(slope)
            )));
        }
        let s = self.nodes[slope.0].value.data()[0];
        let t = &self.nodes[a.0].value;
        let out: Vec<F> = t
            .data()
            .iter()
            .map(|&x| if x >= F::ZERO { x } else { s * x })
            .collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("shape preserved");
        Ok(self.push(
            value,
            Op::Prelu {
                a: a.0,
                slope: slope.0,
            },
        ))
    }

    /// Affine layer `x @ w^T + b` with `w` stored output-major.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        if sx.len() != 2 || sw.len() != 2 || sb.len() != 1 {
            return Err(Error::Shape(format!(
                "linear expects x[m,in] w[out,in] b[out], got {sx:?} {sw:?} {sb:?}"
            )));
        }
        let (m, nin) = (sx[0], sx[1]);
        let (nout, win) = (sw[0], sw[1]);
        if win != nin || sb[0] != nout {
            return Err(Error::Shape(format!(
                "linear dims differ: x{sx:?} w{sw:?} b{sb:?}"
            )));
        }
        let mut out = vec![F::ZERO; m * nout];
        {
            let xv = self.nodes[x.0].value.data();
            let wv = self.nodes[w.0].value.data();
            let bv = self.nodes[b.0].value.data();
            mm_nt(xv, wv, &mut out, m, nin, nout);
            for row in out.chunks_mut(nout) {
                for (o, &bj) in row.iter_mut().zip(bv) {
                    *o += bj;
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![m, nout], out)?,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.0,
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.clone().reshaped(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape { a: a.0 }))
    }

    /// Elementwise product. Accepts equal shapes, or a single-row `b`
    /// (`[.., 1, d]` against `[.., f, d]`) broadcast over the rows of `a`;
    /// any other shape pair is rejected.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let row_broadcast = if sa == sb {
            false
        } else if sa.len() == sb.len()
            && sa.len() >= 2
            && sb[sb.len() - 2] == 1
            && sa.last() == sb.last()
            && sa[..sa.len() - 2] == sb[..sb.len() - 2]
        {
            true
        } else {
            return Err(Error::Shape(format!(
                "mul operands are neither equal-shape nor row-broadcastable: {sa:?} x {sb:?}"
            )));
        };
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let out: Vec<F> = if !row_broadcast {
            av.iter().zip(bv).map(|(&x, &y)| x * y).collect()
        } else {
            let d = *sa.last().expect("rank >= 2");
            let f = sa[sa.len() - 2];
            let mut out = Vec::with_capacity(av.len());
            for (chunk_a, chunk_b) in av.chunks(f * d).zip(bv.chunks(d)) {
                for row in chunk_a.chunks(d) {
                    out.extend(row.iter().zip(chunk_b).map(|(&x, &y)| x * y));
                }
            }
            out
        };
        Ok(self.push(
            Tensor::new(sa, out)?,
            Op::Mul {
                a: a.0,
                b: b.0,
                row_broadcast,
            },
        ))
    }

    /// Tiles a trailing singleton axis: `[.., f, 1]` -> `[.., f, n]`.
    pub fn repeat_cols(&mut self, a: Var, n: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 || *sa.last().unwrap() != 1 || n == 0 {
            return Err(Error::Shape(format!(
                "repeat_cols expects [.., 1] and positive width, got {sa:?} x{n}"
            )));
        }
        let av = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(av.len() * n);
        for &v in av {
            out.extend(std::iter::repeat(v).take(n));
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Tensor::new(shape, out)?, Op::RepeatCols { a: a.0 }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::Shape(format!("add shapes differ: {sa:?} x {sb:?}")));
        }
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let out: Vec<F> = av.iter().zip(bv).map(|(&x, &y)| x + y).collect();
        Ok(self.push(Tensor::new(sa, out)?, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = F::from_f64(c);
        let t = &self.nodes[a.0].value;
        let out: Vec<F> = t.data().iter().map(|&x| x * c).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("shape preserved");
        self.push(value, Op::Scale { a: a.0, c })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = F::from_f64(c);
        let t = &self.nodes[a.0].value;
        let out: Vec<F> = t.data().iter().map(|&x| x + c).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("shape preserved");
        self.push(value, Op::AddScalar { a: a.0 })
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::Shape(format!(
                "concat_rows expects rank-2 with equal widths, got {sa:?} x {sb:?}"
            )));
        }
        let mut out = self.nodes[a.0].value.data().to_vec();
        out.extend_from_slice(self.nodes[b.0].value.data());
        Ok(self.push(
            Tensor::new(vec![sa[0] + sb[0], sa[1]], out)?,
            Op::ConcatRows { a: a.0, b: b.0 },
        ))
    }

    /// Reduction to a single scalar (shape `[1]`).
    pub fn sum(&mut self, a: Var) -> Var {
        let mut acc = F::ZERO;
        for &v in self.nodes[a.0].value.data() {
            acc += v;
        }
        self.push(Tensor::scalar(acc), Op::Sum { a: a.0 })
    }

    /// Embedding lookup: one `[fields, d]` block per instance.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize], fields: usize) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::Shape(format!(
                "gather_rows table must be rank 2, got {st:?}"
            )));
        }
        if fields == 0 || idx.is_empty() || idx.len() % fields != 0 {
            return Err(Error::Shape(format!(
                "gather_rows got {} indices for {} fields",
                idx.len(),
                fields
            )));
        }
        let (n, d) = (st[0], st[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Data(format!(
                "feature index {bad} out of range for table of {n} rows"
            )));
        }
        let rows = idx.len() / fields;
        let tv = self.nodes[table.0].value.data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            Tensor::new(vec![rows, fields, d], out)?,
            Op::GatherRows {
                table: table.0,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Per-instance sum of scalar weights: `out[r] = sum_i table[idx[r,i]]`.
    pub fn gather_sum(&mut self, table: Var, idx: &[usize], fields: usize) -> Result<Var> {
        let st = self.shape(table).to_vec();
        let n = match st.as_slice() {
            [n] => *n,
            [n, 1] => *n,
            _ => {
                return Err(Error::Shape(format!(
                    "gather_sum table must be [n] or [n,1], got {st:?}"
                )))
            }
        };
        if fields == 0 || idx.is_empty() || idx.len() % fields != 0 {
            return Err(Error::Shape(format!(
                "gather_sum got {} indices for {} fields",
                idx.len(),
                fields
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Data(format!(
                "feature index {bad} out of range for table of {n} rows"
            )));
        }
        let tv = self.nodes[table.0].value.data();
        let out: Vec<F> = idx
            .chunks(fields)
            .map(|row| {
                let mut acc = F::ZERO;
                for &i in row {
                    acc += tv[i];
                }
                acc
            })
            .collect();
        let rows = idx.len() / fields;
        Ok(self.push(
            Tensor::new(vec![rows], out)?,
            Op::GatherSum {
                table: table.0,
                idx: idx.to_vec(),
                fields,
            },
        ))
    }

    /// Sum of pairwise inner products per instance via the square-of-sums
    /// identity: `0.5 * sum_k [(sum_i e_ik)^2 - sum_i e_ik^2]`.
    pub fn fm_pairwise(&mut self, e: Var) -> Result<Var> {
        let se = self.shape(e).to_vec();
        if se.len() != 3 {
            return Err(Error::Shape(format!(
                "fm_pairwise expects [batch, fields, d], got {se:?}"
            )));
        }
        let (bsz, f, d) = (se[0], se[1], se[2]);
        let ev = self.nodes[e.0].value.data();
        let half = F::from_f64(0.5);
        let out: Vec<F> = (0..bsz)
            .map(|bi| {
                let block = &ev[bi * f * d..(bi + 1) * f * d];
                let mut acc = F::ZERO;
                for k in 0..d {
                    let mut s = F::ZERO;
                    let mut q = F::ZERO;
                    for i in 0..f {
                        let v = block[i * d + k];
                        s += v;
                        q += v * v;
                    }
                    acc += s * s - q;
                }
                half * acc
            })
            .collect();
        Ok(self.push(Tensor::new(vec![bsz], out)?, Op::FmPairwise { e: e.0 }))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        if self.shape(a).len() != 1 || self.nodes[bias.0].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "add_bias expects vector + scalar, got {:?} x {:?}",
                self.shape(a),
                self.shape(bias)
            )));
        }
        let bv = self.nodes[bias.0].value.data()[0];
        let t = &self.nodes[a.0].value;
        let out: Vec<F> = t.data().iter().map(|&x| x + bv).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("shape preserved");
        Ok(self.push(
            value,
            Op::AddBias {
                a: a.0,
                bias: bias.0,
            },
        ))
    }

    /// Mean binary cross entropy over probabilities already in (0,1);
    /// probabilities are clamped to `[1e-7, 1 - 1e-7]` before the logs.
    pub fn bce_mean(&mut self, p: Var, labels: &[u8]) -> Result<Var> {
        let sp = self.shape(p).to_vec();
        if sp.len() != 1 || sp[0] != labels.len() {
            return Err(Error::Shape(format!(
                "bce_mean got probabilities {:?} for {} labels",
                sp,
                labels.len()
            )));
        }
        let labels_f: Vec<F> = labels.iter().map(|&y| F::from_f64(y as f64)).collect();
        let pv = self.nodes[p.0].value.data();
        let loss = mean_bce(pv, labels);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceMean {
                p: p.0,
                labels: labels_f,
            },
        ))
    }

    /// Inverted dropout: kept entries are scaled by `1/keep` so the
    /// expectation matches the eval-mode forward. Call only in training.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f64, rng: &mut R) -> Var {
        debug_assert!((0.0..1.0).contains(&rate));
        if rate <= 0.0 {
            let t = self.nodes[a.0].value.clone();
            return self.push(t, Op::Reshape { a: a.0 });
        }
        let keep = 1.0 - rate;
        let inv = F::from_f64(1.0 / keep);
        let t = &self.nodes[a.0].value;
        let mask: Vec<F> = (0..t.numel())
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    inv
                } else {
                    F::ZERO
                }
            })
            .collect();
        let out: Vec<F> = t.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("shape preserved");
        self.push(value, Op::Dropout { a: a.0, mask })
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Seeds the adjoint of `loss` with one and replays every recorded op
    /// in reverse order exactly once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![F::ONE]);

        for id in (0..=loss.0).rev() {
            let (lower, upper) = self.grads.split_at_mut(id);
            let Some(g) = upper[0].as_deref() else {
                continue;
            };
            let nodes = &self.nodes;
            let out_shape = nodes[id].value.shape();
            match &nodes[id].op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let sa = nodes[*a].value.shape();
                    let (batch, m, k) = if sa.len() == 2 {
                        (1, sa[0], sa[1])
                    } else {
                        (sa[0], sa[1], sa[2])
                    };
                    let n = nodes[*b].value.shape()[1];
                    let av = nodes[*a].value.data();
                    let bv = nodes[*b].value.data();
                    {
                        let da = grad_buf(&mut lower[*a], batch * m * k);
                        batched(da, m * k, |bi, o| {
                            mm_nt(&g[bi * m * n..(bi + 1) * m * n], bv, o, m, n, k)
                        });
                    }
                    let db = grad_buf(&mut lower[*b], k * n);
                    mm_tn(av, g, db, batch * m, k, n);
                }
                Op::Bmm { a, b, nt } => {
                    let sa = nodes[*a].value.shape();
                    let (bsz, m, k) = (sa[0], sa[1], sa[2]);
                    let n = out_shape[2];
                    let av = nodes[*a].value.data();
                    let bv = nodes[*b].value.data();
                    let nt = *nt;
                    {
                        let da = grad_buf(&mut lower[*a], bsz * m * k);
                        batched(da, m * k, |bi, o| {
                            let gb = &g[bi * m * n..(bi + 1) * m * n];
                            let bb = &bv[bi * n * k..(bi + 1) * n * k];
                            if nt {
                                mm_nn(gb, bb, o, m, n, k);
                            } else {
                                mm_nt(gb, bb, o, m, n, k);
                            }
                        });
                    }
                    let db = grad_buf(&mut lower[*b], bsz * n * k);
                    batched(db, n * k, |bi, o| {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let ab = &av[bi * m * k..(bi + 1) * m * k];
                        if nt {
                            mm_tn(gb, ab, o, m, n, k);
                        } else {
                            mm_tn(ab, gb, o, m, k, n);
                        }
                    });
                }
                Op::RowSoftmax { a } => {
                    let y = nodes[id].value.data();
                    let n = *out_shape.last().unwrap();
                    let da = grad_buf(&mut lower[*a], y.len());
                    for ((drow, yrow), grow) in
                        da.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n))
                    {
                        let mut dot = F::ZERO;
                        for (gi, yi) in grow.iter().zip(yrow) {
                            dot += *gi * *yi;
                        }
                        for ((d, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += *yi * (*gi - dot);
                        }
                    }
                }
                Op::Sigmoid { a } => {
                    let y = nodes[id].value.data();
                    let da = grad_buf(&mut lower[*a], y.len());
                    for ((d, gi), yi) in da.iter_mut().zip(g).zip(y) {
                        *d += *gi * *yi * (F::ONE - *yi);
                    }
                }
                Op::Prelu { a, slope } => {
                    let x = nodes[*a].value.data();
                    let s = nodes[*slope].value.data()[0];
                    {
                        let da = grad_buf(&mut lower[*a], x.len());
                        for ((d, gi), xi) in da.iter_mut().zip(g).zip(x) {
                            *d += *gi * if *xi >= F::ZERO { F::ONE } else { s };
                        }
                    }
                    let mut ds_acc = F::ZERO;
                    for (gi, xi) in g.iter().zip(x) {
                        if *xi < F::ZERO {
                            ds_acc += *gi * *xi;
                        }
                    }
                    let ds = grad_buf(&mut lower[*slope], 1);
                    ds[0] += ds_acc;
                }
                Op::Linear { x, w, b } => {
                    let sx = nodes[*x].value.shape();
                    let (m, nin) = (sx[0], sx[1]);
                    let nout = out_shape[1];
                    let xv = nodes[*x].value.data();
                    let wv = nodes[*w].value.data();
                    {
                        let dx = grad_buf(&mut lower[*x], m * nin);
                        mm_nn(g, wv, dx, m, nout, nin);
                    }
                    {
                        let dw = grad_buf(&mut lower[*w], nout * nin);
                        mm_tn(g, xv, dw, m, nout, nin);
                    }
                    let db = grad_buf(&mut lower[*b], nout);
                    for grow in g.chunks(nout) {
                        for (d, gi) in db.iter_mut().zip(grow) {
                            *d += *gi;
                        }
                    }
                }
                Op::Reshape { a } => {
                    let da = grad_buf(&mut lower[*a], g.len());
                    for (d, gi) in da.iter_mut().zip(g) {
                        *d += *gi;
                    }
                }
                Op::Mul {
                    a,
                    b,
                    row_broadcast,
                } => {
                    let av = nodes[*a].value.data();
                    let bv = nodes[*b].value.data();
                    if !*row_broadcast {
                        {
                            let da = grad_buf(&mut lower[*a], av.len());
                            for ((d, gi), yi) in da.iter_mut().zip(g).zip(bv) {
                                *d += *gi * *yi;
                            }
                        }
                        let db = grad_buf(&mut lower[*b], bv.len());
                        for ((d, gi), xi) in db.iter_mut().zip(g).zip(av) {
                            *d += *gi * *xi;
                        }
                    } else {
                        let d = *out_shape.last().unwrap();
                        let f = out_shape[out_shape.len() - 2];
                        {
                            let da = grad_buf(&mut lower[*a], av.len());
                            for ((da_blk, g_blk), b_blk) in da
                                .chunks_mut(f * d)
                                .zip(g.chunks(f * d))
                                .zip(bv.chunks(d))
                            {
                                for (da_row, g_row) in
                                    da_blk.chunks_mut(d).zip(g_blk.chunks(d))
                                {
                                    for ((dd, gi), yi) in
                                        da_row.iter_mut().zip(g_row).zip(b_blk)
                                    {
                                        *dd += *gi * *yi;
                                    }
                                }
                            }
                        }
                        let db = grad_buf(&mut lower[*b], bv.len());
                        for ((db_blk, g_blk), a_blk) in db
                            .chunks_mut(d)
                            .zip(g.chunks(f * d))
                            .zip(av.chunks(f * d))
                        {
                            for (g_row, a_row) in g_blk.chunks(d).zip(a_blk.chunks(d)) {
                                for ((dd, gi), xi) in
                                    db_blk.iter_mut().zip(g_row).zip(a_row)
                                {
                                    *dd += *gi * *xi;
                                }
                            }
                        }
                    }
                }
                Op::RepeatCols { a } => {
                    let n = *out_shape.last().unwrap();
                    let len = nodes[*a].value.numel();
                    let da = grad_buf(&mut lower[*a], len);
                    for (d, grow) in da.iter_mut().zip(g.chunks(n)) {
                        for gi in grow {
                            *d += *gi;
                        }
                    }
                }
                Op::Add { a, b } => {
                    {
                        let da = grad_buf(&mut lower[*a], g.len());
                        for (d, gi) in da.iter_mut().zip(g) {
                            *d += *gi;
                        }
                    }
                    let db = grad_buf(&mut lower[*b], g.len());
                    for (d, gi) in db.iter_mut().zip(g) {
                        *d += *gi;
                    }
                }
                Op::Scale { a, c } => {
                    let c = *c;
                    let da = grad_buf(&mut lower[*a], g.len());
                    for (d, gi) in da.iter_mut().zip(g) {
                        *d += *gi * c;
                    }
                }
                Op::AddScalar { a, .. } => {
                    let da = grad_buf(&mut lower[*a], g.len());
                    for (d, gi) in da.iter_mut().zip(g) {
                        *d += *gi;
                    }
                }
                Op::ConcatRows { a, b } => {
                    let na = nodes[*a].value.numel();
                    {
                        let da = grad_buf(&mut lower[*a], na);
                        for (d, gi) in da.iter_mut().zip(&g[..na]) {
                            *d += *gi;
                        }
                    }
                    let nb = nodes[*b].value.numel();
                    let db = grad_buf(&mut lower[*b], nb);
                    for (d, gi) in db.iter_mut().zip(&g[na..]) {
                        *d += *gi;
                    }
                }
                Op::Sum { a } => {
                    let g0 = g[0];
                    let da = grad_buf(&mut lower[*a], nodes[*a].value.numel());
                    for d in da.iter_mut() {
                        *d += g0;
                    }
                }
                Op::GatherRows { table, idx } => {
                    let d = nodes[*table].value.shape()[1];
                    let dt = grad_buf(&mut lower[*table], nodes[*table].value.numel());
                    for (&i, grow) in idx.iter().zip(g.chunks(d)) {
                        for (dv, gi) in dt[i * d..(i + 1) * d].iter_mut().zip(grow) {
                            *dv += *gi;
                        }
                    }
                }
                Op::GatherSum { table, idx, fields } => {
                    let dt = grad_buf(&mut lower[*table], nodes[*table].value.numel());
                    for (row, gr) in idx.chunks(*fields).zip(g) {
                        for &i in row {
                            dt[i] += *gr;
                        }
                    }
                }
                Op::FmPairwise { e } => {
                    let se = nodes[*e].value.shape();
                    let (bsz, f, d) = (se[0], se[1], se[2]);
                    let ev = nodes[*e].value.data();
                    let de = grad_buf(&mut lower[*e], ev.len());
                    for bi in 0..bsz {
                        let gb = g[bi];
                        let block = &ev[bi * f * d..(bi + 1) * f * d];
                        let dblock = &mut de[bi * f * d..(bi + 1) * f * d];
                        for k in 0..d {
                            let mut s = F::ZERO;
                            for i in 0..f {
                                s += block[i * d + k];
                            }
                            for i in 0..f {
                                dblock[i * d + k] += gb * (s - block[i * d + k]);
                            }
                        }
                    }
                }
                Op::AddBias { a, bias } => {
                    {
                        let da = grad_buf(&mut lower[*a], g.len());
                        for (d, gi) in da.iter_mut().zip(g) {
                            *d += *gi;
                        }
                    }
                    let mut acc = F::ZERO;
                    for gi in g {
                        acc += *gi;
                    }
                    let db = grad_buf(&mut lower[*bias], 1);
                    db[0] += acc;
                }
                Op::BceMean { p, labels } => {
                    let pv = nodes[*p].value.data();
                    let g0 = g[0];
                    let inv_n = F::from_f64(1.0 / pv.len() as f64);
                    let lo = F::from_f64(BCE_EPS);
                    let hi = F::ONE - lo;
                    let dp = grad_buf(&mut lower[*p], pv.len());
                    for ((d, &pi), &yi) in dp.iter_mut().zip(pv).zip(labels) {
                        // The clamp has zero slope outside its bounds.
                        if pi >= lo && pi <= hi {
                            *d += g0 * inv_n * (pi - yi) / (pi * (F::ONE - pi));
                        }
                    }
                }
                Op::Dropout { a, mask } => {
                    let da = grad_buf(&mut lower[*a], mask.len());
                    for ((d, gi), mi) in da.iter_mut().zip(g).zip(mask) {
                        *d += *gi * *mi;
                    }
                }
            }
        }
        Ok(())
    }
}

const BCE_EPS: f64 = 1e-7;

/// Mean binary cross entropy with the clamp shared by the training loss
/// and the logloss metric.
pub fn mean_bce<F: Real>(probs: &[F], labels: &[u8]) -> F {
    debug_assert_eq!(probs.len(), labels.len());
    let lo = F::from_f64(BCE_EPS);
    let hi = F::ONE - lo;
    let mut acc = F::ZERO;
    for (&p, &y) in probs.iter().zip(labels) {
        let pc = p.maximum(lo).minimum(hi);
        acc += if y == 1 { pc.ln() } else { (F::ONE - pc).ln() };
    }
    -acc / F::from_f64(probs.len() as f64)
}

fn grad_buf<F: Real>(slot: &mut Option<Vec<F>>, len: usize) -> &mut [F] {
    slot.get_or_insert_with(|| vec![F::ZERO; len])
}

// ── kernels ─────────────────────────────────────────────────────────────
//
// Each output element is produced by exactly one fixed-order inner loop,
// so chunking the outer loop across threads cannot change any sum.

const PAR_WORK: usize = 1 << 15;

fn batched<F, K>(out: &mut [F], block: usize, kernel: K)
where
    F: Real,
    K: Fn(usize, &mut [F]) + Sync + Send,
{
    if out.len() >= PAR_WORK && out.len() > block {
        out.par_chunks_mut(block)
            .enumerate()
            .for_each(|(bi, o)| kernel(bi, o));
    } else {
        for (bi, o) in out.chunks_mut(block).enumerate() {
            kernel(bi, o);
        }
    }
}

fn row_apply<F, K>(data: &mut [F], row: usize, kernel: K)
where
    F: Real,
    K: Fn(&mut [F]) + Sync + Send,
{
    if data.len() >= PAR_WORK && data.len() > row {
        data.par_chunks_mut(row).for_each(|r| kernel(r));
    } else {
        for r in data.chunks_mut(row) {
            kernel(r);
        }
    }
}

/// `out[m,n] += a[m,k] @ b[k,n]`
fn mm_nn<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    let row = |i: usize, o: &mut [F]| {
        let arow = &a[i * k..(i + 1) * k];
        for (t, &av) in arow.iter().enumerate() {
            let brow = &b[t * n..(t + 1) * n];
            for (oj, &bj) in o.iter_mut().zip(brow) {
                *oj += av * bj;
            }
        }
    };
    if m > 1 && m * k * n >= PAR_WORK {
        out.par_chunks_mut(n).enumerate().for_each(|(i, o)| row(i, o));
    } else {
        for (i, o) in out.chunks_mut(n).enumerate() {
            row(i, o);
        }
    }
}

/// `out[m,n] += a[m,k] @ b[n,k]^T`
///
/// Large shapes route through an explicit transpose of `b` so the inner
/// loop is an axpy the compiler can vectorize. Path selection depends
/// only on the shape, so results stay deterministic run to run.
fn mm_nt<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    if m * k * n >= PAR_WORK {
        let mut bt = vec![F::ZERO; k * n];
        for j in 0..n {
            for t in 0..k {
                bt[t * n + j] = b[j * k + t];
            }
        }
        mm_nn(a, &bt, out, m, k, n);
        return;
    }
    for (i, o) in out.chunks_mut(n).enumerate() {
        let arow = &a[i * k..(i + 1) * k];
        for (j, oj) in o.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = F::ZERO;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            *oj += acc;
        }
    }
}

/// `out[k,n] += a[m,k]^T @ b[m,n]`
fn mm_tn<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    let row = |t: usize, o: &mut [F]| {
        for im in 0..m {
            let av = a[im * k + t];
            let brow = &b[im * n..(im + 1) * n];
            for (oj, &bj) in o.iter_mut().zip(brow) {
                *oj += av * bj;
            }
        }
    };
    if k > 1 && m * k * n >= PAR_WORK {
        out.par_chunks_mut(n).enumerate().for_each(|(t, o)| row(t, o));
    } else {
        for (t, o) in out.chunks_mut(n).enumerate() {
            row(t, o);
        }
    }
}
