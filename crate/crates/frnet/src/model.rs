//! Embedding layer, FM scoring head, and the composed predictor.
//!
//! The logit is `bias + sum_i w[x_i] + pairwise(E_r)`: the first-order
//! part reads the raw feature indices while the second-order part runs
//! over the refined embeddings, using the `O(fields * d)` square-of-sums
//! identity for the pairwise sum.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Instance;
use crate::error::{Error, Result};
use crate::refine::{bind_frnet, refine, BoundFrnet, FrnetParams, Phase, Variant};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Embedding table init: zero-mean normal, variance 0.01.
const EMBED_INIT_STD: f64 = 0.1;

/// Shape bookkeeping every forward pass is validated against.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub n_features: usize,
    pub n_fields: usize,
    pub embed_dim: usize,
    pub attn_dim: usize,
    pub cie_hidden: Vec<usize>,
}

/// All learnable tensors. `frnet` is absent for the plain FM model.
#[derive(Clone, Debug)]
pub struct ModelParams<F: Real> {
    pub dims: ModelDims,
    pub variant: Variant,
    /// `[n_features, embed_dim]`
    pub embed: Tensor<F>,
    /// `[n_features, 1]` first-order weights over raw indices.
    pub linear_w: Tensor<F>,
    /// `[1]` global bias.
    pub bias: Tensor<F>,
    pub frnet: Option<FrnetParams<F>>,
}

impl<F: Real> ModelParams<F> {
    /// Seeded initialization. The embedding table is drawn first so that
    /// models sharing a seed share embeddings regardless of variant.
    pub fn init(dims: ModelDims, variant: Variant, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = Tensor::randn(
            vec![dims.n_features, dims.embed_dim],
            EMBED_INIT_STD,
            &mut rng,
        );
        let linear_w = Tensor::zeros(vec![dims.n_features, 1]);
        let bias = Tensor::zeros(vec![1]);
        let frnet = variant.uses_refiner().then(|| {
            FrnetParams::init(
                dims.n_fields,
                dims.embed_dim,
                dims.attn_dim,
                &dims.cie_hidden,
                &mut rng,
            )
        });
        ModelParams {
            dims,
            variant,
            embed,
            linear_w,
            bias,
            frnet,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed.shape() != [self.dims.n_features, self.dims.embed_dim] {
            return Err(Error::Shape(format!(
                "embedding table {:?} does not match dims {:?}",
                self.embed.shape(),
                self.dims
            )));
        }
        if self.linear_w.shape() != [self.dims.n_features, 1] || self.bias.numel() != 1 {
            return Err(Error::Shape(
                "first-order weights or bias have unexpected shapes".into(),
            ));
        }
        if self.variant.uses_refiner() {
            match &self.frnet {
                Some(p) => p.validate(self.dims.n_fields, self.dims.embed_dim)?,
                None => {
                    return Err(Error::Config(format!(
                        "variant {} needs refinement parameters",
                        self.variant
                    )))
                }
            }
        }
        Ok(())
    }

    /// Named tensors in checkpoint order: `embed`, `linear_w`, `bias`,
    /// then `ieu_w.*` and `ieu_g.*` when present.
    pub fn visit(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = vec![
            ("embed".to_string(), &self.embed),
            ("linear_w".to_string(), &self.linear_w),
            ("bias".to_string(), &self.bias),
        ];
        if let Some(p) = &self.frnet {
            p.visit(&mut out);
        }
        out
    }

    pub fn visit_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = vec![
            ("embed".to_string(), &mut self.embed),
            ("linear_w".to_string(), &mut self.linear_w),
            ("bias".to_string(), &mut self.bias),
        ];
        if let Some(p) = &mut self.frnet {
            p.visit_mut(&mut out);
        }
        out
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.visit_mut() {
            t.zero_grad();
        }
    }

    pub fn all_finite(&self) -> bool {
        self.visit().iter().all(|(_, t)| t.all_finite())
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        ModelParams {
            dims: self.dims.clone(),
            variant: self.variant,
            embed: self.embed.cast(),
            linear_w: self.linear_w.cast(),
            bias: self.bias.cast(),
            frnet: self.frnet.as_ref().map(|p| FrnetParams {
                ieu_w: cast_ieu(&p.ieu_w),
                ieu_g: cast_ieu(&p.ieu_g),
            }),
        }
    }
}

fn cast_ieu<F: Real, G: Real>(p: &crate::refine::IeuParams<F>) -> crate::refine::IeuParams<G> {
    crate::refine::IeuParams {
        w_q: p.w_q.cast(),
        w_k: p.w_k.cast(),
        w_v: p.w_v.cast(),
        w_p: p.w_p.cast(),
        cie: p
            .cie
            .iter()
            .map(|l| crate::refine::CieLayer {
                w: l.w.cast(),
                b: l.b.cast(),
                slope: l.slope.cast(),
            })
            .collect(),
    }
}

/// Tape handles of one bound parameter set, aligned with `visit` order.
pub struct BoundModel {
    pub embed: Var,
    pub linear_w: Var,
    pub bias: Var,
    pub frnet: Option<BoundFrnet>,
}

impl BoundModel {
    pub fn flat(&self) -> Vec<Var> {
        let mut out = vec![self.embed, self.linear_w, self.bias];
        if let Some(p) = &self.frnet {
            p.flat(&mut out);
        }
        out
    }
}

/// Copies every parameter onto the tape as a leaf.
pub fn bind<F: Real>(tape: &mut Tape<F>, params: &ModelParams<F>) -> BoundModel {
    BoundModel {
        embed: tape.leaf(params.embed.clone()),
        linear_w: tape.leaf(params.linear_w.clone()),
        bias: tape.leaf(params.bias.clone()),
        frnet: params.frnet.as_ref().map(|p| bind_frnet(tape, p)),
    }
}

/// Pulls the adjoints of every bound parameter back into the parameter
/// set's gradient buffers (accumulating).
pub fn accumulate_grads<F: Real>(
    params: &mut ModelParams<F>,
    tape: &Tape<F>,
    bound: &BoundModel,
) {
    let vars = bound.flat();
    for ((_, t), var) in params.visit_mut().into_iter().zip(vars) {
        if let Some(g) = tape.grad(var) {
            t.accumulate_grad(g);
        }
    }
}

/// Flattens instances into the index layout the gather ops expect.
pub fn flat_features(instances: &[Instance]) -> Vec<usize> {
    let mut out = Vec::with_capacity(instances.len() * instances.first().map_or(0, |i| i.features.len()));
    for inst in instances {
        out.extend(inst.features.iter().map(|&i| i as usize));
    }
    out
}

/// Embedding lookup producing the `[batch, fields, d]` matrix.
pub fn embed<F: Real>(
    tape: &mut Tape<F>,
    bound: &BoundModel,
    feats: &[usize],
    fields: usize,
) -> Result<Var> {
    tape.gather_rows(bound.embed, feats, fields)
}

/// FM logit over refined embeddings: bias + first-order + pairwise.
pub fn fm_score<F: Real>(
    tape: &mut Tape<F>,
    bound: &BoundModel,
    refined: Var,
    feats: &[usize],
    fields: usize,
) -> Result<Var> {
    let pairwise = tape.fm_pairwise(refined)?;
    let first_order = tape.gather_sum(bound.linear_w, feats, fields)?;
    let partial = tape.add(pairwise, first_order)?;
    tape.add_bias(partial, bound.bias)
}

/// Full forward pass to probabilities in (0,1).
pub fn forward_probs<F: Real>(
    tape: &mut Tape<F>,
    bound: &BoundModel,
    variant: Variant,
    feats: &[usize],
    fields: usize,
    phase: &mut Phase<'_>,
) -> Result<Var> {
    let e = embed(tape, bound, feats, fields)?;
    let refined = refine(tape, e, bound.frnet.as_ref(), variant, phase)?;
    let logit = fm_score(tape, bound, refined, feats, fields)?;
    Ok(tape.sigmoid(logit))
}

/// Forward + mean cross entropy on one batch. Returns the loss and the
/// probability node.
pub fn batch_loss<F: Real>(
    tape: &mut Tape<F>,
    bound: &BoundModel,
    params: &ModelParams<F>,
    batch: &[Instance],
    phase: &mut Phase<'_>,
) -> Result<(Var, Var)> {
    let feats = flat_features(batch);
    let labels: Vec<u8> = batch.iter().map(|i| i.label).collect();
    let probs = forward_probs(
        tape,
        bound,
        params.variant,
        &feats,
        params.dims.n_fields,
        phase,
    )?;
    let loss = tape.bce_mean(probs, &labels)?;
    Ok((loss, probs))
}

/// Deterministic eval-mode probabilities, chunked by `batch_size`.
pub fn predict<F: Real>(
    params: &ModelParams<F>,
    instances: &[Instance],
    batch_size: usize,
) -> Result<Vec<F>> {
    let mut out = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let bound = bind(&mut tape, params);
        let feats = flat_features(chunk);
        let probs = forward_probs(
            &mut tape,
            &bound,
            params.variant,
            &feats,
            params.dims.n_fields,
            &mut Phase::Eval,
        )?;
        out.extend_from_slice(tape.value(probs).data());
    }
    Ok(out)
}

/// Eval-mode gate openness values `σ(W_b)`, flattened over
/// `batch x fields x d`. Requires a variant with a bit-level gate.
pub fn gate_values<F: Real>(
    params: &ModelParams<F>,
    instances: &[Instance],
    batch_size: usize,
) -> Result<Vec<F>> {
    if !params.variant.has_bit_gate() {
        return Err(Error::Config(format!(
            "variant {} has no bit-level gate to analyze",
            params.variant
        )));
    }
    let mut out = Vec::new();
    for chunk in instances.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let bound = bind(&mut tape, params);
        let frnet = bound
            .frnet
            .as_ref()
            .expect("bit-gate variants carry refinement parameters");
        let feats = flat_features(chunk);
        let e = embed(&mut tape, &bound, &feats, params.dims.n_fields)?;
        let gate = crate::refine::bit_gate(&mut tape, e, frnet, &mut Phase::Eval)?;
        out.extend_from_slice(tape.value(gate).data());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dims(n: usize, f: usize, d: usize) -> ModelDims {
        ModelDims {
            n_features: n,
            n_fields: f,
            embed_dim: d,
            attn_dim: d,
            cie_hidden: vec![4],
        }
    }

    fn inst(label: u8, feats: &[u32]) -> Instance {
        Instance {
            label,
            features: feats.to_vec(),
        }
    }

    #[test]
    fn duplicate_features_share_rows() {
        let params = ModelParams::<f32>::init(tiny_dims(6, 2, 3), Variant::FM, 7);
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params);
        let e = embed(&mut tape, &bound, &[0, 3, 0, 5], 2).unwrap();
        let v = tape.value(e).data();
        assert_eq!(&v[0..3], &v[6..9]); // feature 0 appears in both instances
    }

    #[test]
    fn out_of_range_feature_is_rejected() {
        let params = ModelParams::<f32>::init(tiny_dims(6, 2, 3), Variant::FM, 7);
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params);
        assert!(embed(&mut tape, &bound, &[0, 6], 2).is_err());
    }

    #[test]
    fn fm_pairwise_hand_case_and_single_field() {
        let mut tape = Tape::<f64>::new();
        let e = tape.leaf(Tensor::new(vec![1, 3, 2], vec![1.0, 0.0, 1.0, 1.0, 0.0, 2.0]).unwrap());
        let p = tape.fm_pairwise(e).unwrap();
        assert_eq!(tape.value(p).data(), &[3.0]);

        let single = tape.leaf(Tensor::new(vec![1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p1 = tape.fm_pairwise(single).unwrap();
        assert_eq!(tape.value(p1).data(), &[0.0]);
    }

    #[test]
    fn pairwise_trick_matches_brute_force() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let f = rng.gen_range(1..=8);
            let d = rng.gen_range(1..=8);
            let e = Tensor::<f32>::randn(vec![1, f, d], 1.0, &mut rng);
            let mut tape = Tape::new();
            let ev = tape.leaf(e.clone());
            let fast = tape.fm_pairwise(ev).unwrap();
            let fast = tape.value(fast).data()[0];

            let data = e.data();
            let mut brute = 0.0f32;
            for i in 0..f {
                for j in (i + 1)..f {
                    for k in 0..d {
                        brute += data[i * d + k] * data[j * d + k];
                    }
                }
            }
            assert!(
                (fast - brute).abs() <= 1e-5 * brute.abs().max(1.0),
                "fast {fast} vs brute {brute}"
            );
        }
    }

    #[test]
    fn zero_model_predicts_half() {
        let mut params = ModelParams::<f32>::init(tiny_dims(4, 2, 2), Variant::FM, 3);
        params.embed = Tensor::zeros(vec![4, 2]);
        let probs = predict(&params, &[inst(1, &[0, 2]), inst(0, &[1, 3])], 8).unwrap();
        assert_eq!(probs, vec![0.5, 0.5]);
    }

    #[test]
    fn higher_logit_means_higher_probability() {
        let mut params = ModelParams::<f32>::init(tiny_dims(4, 2, 2), Variant::FM, 3);
        let lo = predict(&params, &[inst(1, &[0, 2])], 1).unwrap()[0];
        params.bias.data_mut()[0] = 2.0;
        let hi = predict(&params, &[inst(1, &[0, 2])], 1).unwrap()[0];
        assert!(hi > lo);
        assert!(lo > 0.0 && hi < 1.0);
    }

    #[test]
    fn variant_one_predictions_bit_equal_plain_fm() {
        let dims = tiny_dims(8, 2, 3);
        let fm = ModelParams::<f32>::init(dims.clone(), Variant::FM, 11);
        let v1 = ModelParams::<f32>::init(dims, Variant::from_id(1).unwrap(), 11);
        let batch: Vec<Instance> = (0..6)
            .map(|i| inst((i % 2) as u8, &[i % 4, 4 + (i % 4)]))
            .collect();
        let pa = predict(&fm, &batch, 3).unwrap();
        let pb = predict(&v1, &batch, 3).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn visit_and_bound_orders_agree() {
        let params = ModelParams::<f32>::init(tiny_dims(5, 2, 2), Variant::GATED_BIT, 1);
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params);
        let names = params.visit();
        let vars = bound.flat();
        assert_eq!(names.len(), vars.len());
        for ((_, t), v) in names.iter().zip(&vars) {
            assert_eq!(t.shape(), tape.shape(*v));
            assert_eq!(t.data(), tape.value(*v).data());
        }
    }

    #[test]
    fn embedding_gradient_counts_occurrences() {
        let params = ModelParams::<f32>::init(tiny_dims(4, 2, 2), Variant::FM, 5);
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params);
        let e = embed(&mut tape, &bound, &[0, 1, 0, 2], 2).unwrap();
        let loss = tape.sum(e);
        tape.backward(loss).unwrap();
        let g = tape.grad(bound.embed).unwrap();
        assert_eq!(g, &[2.0, 2.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
    }
}
