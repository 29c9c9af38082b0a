//! Shared differentiable building blocks: linear maps, residual
//! feed-forward layers, and multi-head scaled-dot-product attention.
//!
//! Every block registers its weights on the tape it is run on, so the same
//! forward code serves training (weights trainable) and frozen evaluation
//! (gradients simply go unused). Residual outputs are arranged so that a
//! block with a zero-filled output-side weight is an exact identity map,
//! which keeps fresh stacks well-behaved and gives tests a closed form.

use crate::error::{Result, SanmError};
use crate::numerics::rng::SeededRng;
use crate::numerics::tape::GradTape;
use crate::numerics::tensor::NdTensor;

/// Dense layer `x W + b` with `W: [d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: NdTensor,
    pub b: Option<NdTensor>,
}

impl Linear {
    /// Gaussian init scaled by `1/sqrt(d_in)`; bias (if any) starts at zero.
    pub fn new(rng: &mut SeededRng, d_in: usize, d_out: usize, bias: bool) -> Self {
        let scale = 1.0 / (d_in as f64).sqrt();
        Linear {
            w: rng.gaussian_tensor(&[d_in, d_out], scale).unwrap(),
            b: bias.then(|| NdTensor::zeros(&[d_out])),
        }
    }

    /// All-zero layer (maps everything to the bias, i.e. to zero).
    pub fn zeros(d_in: usize, d_out: usize, bias: bool) -> Self {
        Linear {
            w: NdTensor::zeros(&[d_in, d_out]),
            b: bias.then(|| NdTensor::zeros(&[d_out])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn forward(&self, tape: &mut GradTape, x: &NdTensor) -> Result<NdTensor> {
        let w = tape.param(&self.w);
        let y = tape.matmul(x, &w)?;
        match &self.b {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(&y, &b)
            }
            None => Ok(y),
        }
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, NdTensor)>) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        if let Some(b) = &self.b {
            out.push((format!("{prefix}.b"), b.clone()));
        }
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut NdTensor)>) {
        out.push((format!("{prefix}.w"), &mut self.w));
        if let Some(b) = &mut self.b {
            out.push((format!("{prefix}.b"), b));
        }
    }
}

/// Residual two-layer map `x + gelu(x W1 + b1) W2 + b2`.
///
/// `W2` starts at zero, so a fresh layer is the identity.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl FeedForward {
    pub fn new(rng: &mut SeededRng, dim: usize, hidden: usize) -> Self {
        FeedForward {
            lin1: Linear::new(rng, dim, hidden, true),
            lin2: Linear::zeros(hidden, dim, true),
        }
    }

    pub fn forward(&self, tape: &mut GradTape, x: &NdTensor) -> Result<NdTensor> {
        let h = self.lin1.forward(tape, x)?;
        let h = tape.gelu(&h)?;
        let y = self.lin2.forward(tape, &h)?;
        tape.add(x, &y)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, NdTensor)>) {
        self.lin1.collect(&format!("{prefix}.lin1"), out);
        self.lin2.collect(&format!("{prefix}.lin2"), out);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut NdTensor)>) {
        self.lin1.collect_mut(&format!("{prefix}.lin1"), out);
        self.lin2.collect_mut(&format!("{prefix}.lin2"), out);
    }
}

/// Multi-head scaled-dot-product attention with a residual connection.
///
/// Queries come from the first argument, keys/values from the second; when
/// both are the same tensor this is self-attention. The output projection
/// maps back to the query width and starts at zero, so a fresh block is the
/// identity on its query stream.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub head_count: usize,
    pub model_dim: usize,
    pub w_q: NdTensor,
    pub w_k: NdTensor,
    pub w_v: NdTensor,
    pub w_o: NdTensor,
}

impl AttentionBlock {
    pub fn new(
        rng: &mut SeededRng,
        d_q: usize,
        d_kv: usize,
        model_dim: usize,
        head_count: usize,
    ) -> Result<Self> {
        if head_count == 0 || model_dim % head_count != 0 {
            return Err(SanmError::Config(format!(
                "attention width {model_dim} must be a positive multiple of {head_count} heads"
            )));
        }
        Ok(AttentionBlock {
            head_count,
            model_dim,
            w_q: rng
                .gaussian_tensor(&[d_q, model_dim], 1.0 / (d_q as f64).sqrt())
                .unwrap(),
            w_k: rng
                .gaussian_tensor(&[d_kv, model_dim], 1.0 / (d_kv as f64).sqrt())
                .unwrap(),
            w_v: rng
                .gaussian_tensor(&[d_kv, model_dim], 1.0 / (d_kv as f64).sqrt())
                .unwrap(),
            w_o: NdTensor::zeros(&[model_dim, d_q]),
        })
    }

    pub fn d_q(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn d_kv(&self) -> usize {
        self.w_k.shape()[0]
    }

    /// Attend `queries [n_q, d_q]` over `context [n_kv, d_kv]`; returns
    /// `queries + attended` with shape `[n_q, d_q]`.
    pub fn forward(
        &self,
        tape: &mut GradTape,
        queries: &NdTensor,
        context: &NdTensor,
    ) -> Result<NdTensor> {
        if queries.shape().len() != 2 || queries.shape()[1] != self.d_q() {
            return Err(SanmError::Shape(format!(
                "attention queries must be [n, {}], got {:?}",
                self.d_q(),
                queries.shape()
            )));
        }
        if context.shape().len() != 2 || context.shape()[1] != self.d_kv() {
            return Err(SanmError::Shape(format!(
                "attention context must be [n, {}], got {:?}",
                self.d_kv(),
                context.shape()
            )));
        }
        let head_dim = self.model_dim / self.head_count;
        let wq = tape.param(&self.w_q);
        let wk = tape.param(&self.w_k);
        let wv = tape.param(&self.w_v);
        let wo = tape.param(&self.w_o);

        let q = tape.matmul(queries, &wq)?;
        let k = tape.matmul(context, &wk)?;
        let v = tape.matmul(context, &wv)?;

        let mut heads = Vec::with_capacity(self.head_count);
        for h in 0..self.head_count {
            let qh = tape.slice_cols(&q, h * head_dim, head_dim)?;
            let kh = tape.slice_cols(&k, h * head_dim, head_dim)?;
            let vh = tape.slice_cols(&v, h * head_dim, head_dim)?;
            let logits = tape.matmul_nt(&qh, &kh)?;
            let logits = tape.scale(&logits, 1.0 / (head_dim as f64).sqrt())?;
            let weights = tape.softmax_rows(&logits)?;
            heads.push(tape.matmul(&weights, &vh)?);
        }
        let head_refs: Vec<&NdTensor> = heads.iter().collect();
        let merged = tape.concat_cols(&head_refs)?;
        let projected = tape.matmul(&merged, &wo)?;
        tape.add(queries, &projected)
    }

    /// Self-attention: queries and context are the same stream.
    pub fn forward_self(&self, tape: &mut GradTape, z: &NdTensor) -> Result<NdTensor> {
        self.forward(tape, z, z)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, NdTensor)>) {
        out.push((format!("{prefix}.w_q"), self.w_q.clone()));
        out.push((format!("{prefix}.w_k"), self.w_k.clone()));
        out.push((format!("{prefix}.w_v"), self.w_v.clone()));
        out.push((format!("{prefix}.w_o"), self.w_o.clone()));
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut NdTensor)>) {
        out.push((format!("{prefix}.w_q"), &mut self.w_q));
        out.push((format!("{prefix}.w_k"), &mut self.w_k));
        out.push((format!("{prefix}.w_v"), &mut self.w_v));
        out.push((format!("{prefix}.w_o"), &mut self.w_o));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_attention(block: &AttentionBlock, q: &NdTensor, kv: &NdTensor) -> NdTensor {
        let mut tape = GradTape::new();
        block.forward(&mut tape, q, kv).unwrap().detach()
    }

    /// Straight-line reference computation with plain tensor ops.
    fn reference_attention(block: &AttentionBlock, qin: &NdTensor, kvin: &NdTensor) -> NdTensor {
        let head_dim = block.model_dim / block.head_count;
        let q = qin.matmul(&block.w_q).unwrap();
        let k = kvin.matmul(&block.w_k).unwrap();
        let v = kvin.matmul(&block.w_v).unwrap();
        let n_q = qin.shape()[0];
        let n_kv = kvin.shape()[0];
        let mut merged = vec![0.0; n_q * block.model_dim];
        for h in 0..block.head_count {
            let off = h * head_dim;
            for i in 0..n_q {
                // Row of softmaxed logits against every context row.
                let mut logits = vec![0.0; n_kv];
                for (j, l) in logits.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for d in 0..head_dim {
                        dot += q.data()[i * block.model_dim + off + d]
                            * k.data()[j * block.model_dim + off + d];
                    }
                    *l = dot / (head_dim as f64).sqrt();
                }
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                for d in 0..head_dim {
                    let mut acc = 0.0;
                    for (j, e) in exps.iter().enumerate() {
                        acc += e / z * v.data()[j * block.model_dim + off + d];
                    }
                    merged[i * block.model_dim + off + d] = acc;
                }
            }
        }
        let merged = NdTensor::from_vec(&[n_q, block.model_dim], merged).unwrap();
        let out = merged.matmul(&block.w_o).unwrap();
        qin.add(&out).unwrap()
    }

    #[test]
    fn zero_weights_give_pure_residual() {
        let mut rng = SeededRng::new(11);
        let mut block = AttentionBlock::new(&mut rng, 6, 4, 8, 2).unwrap();
        block.w_o = NdTensor::zeros(&[8, 6]);
        let q = rng.gaussian_tensor(&[3, 6], 1.0).unwrap();
        let kv = rng.gaussian_tensor(&[5, 4], 1.0).unwrap();
        let out = run_attention(&block, &q, &kv);
        assert_eq!(out.data(), q.data());
    }

    #[test]
    fn single_context_token_weights_collapse_to_its_value() {
        let mut rng = SeededRng::new(12);
        let block = AttentionBlock::new(&mut rng, 4, 4, 8, 2).unwrap();
        let mut block = block;
        block.w_o = rng.gaussian_tensor(&[8, 4], 0.5).unwrap();
        let q = rng.gaussian_tensor(&[3, 4], 1.0).unwrap();
        let kv = rng.gaussian_tensor(&[1, 4], 1.0).unwrap();
        let out = run_attention(&block, &q, &kv);
        // One key: softmax over one logit is 1, so attended value is the
        // single projected token for every query row.
        let vrow = kv.matmul(&block.w_v).unwrap();
        let orow = vrow.matmul(&block.w_o).unwrap();
        for i in 0..3 {
            for c in 0..4 {
                let got = out.data()[i * 4 + c];
                let want = q.data()[i * 4 + c] + orow.data()[c];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_context_rows_mix_uniformly() {
        let mut rng = SeededRng::new(13);
        let mut block = AttentionBlock::new(&mut rng, 4, 3, 8, 2).unwrap();
        block.w_o = rng.gaussian_tensor(&[8, 4], 0.5).unwrap();
        let q = rng.gaussian_tensor(&[2, 4], 1.0).unwrap();
        let row = rng.gaussian_tensor(&[1, 3], 1.0).unwrap();
        let mut kv = vec![0.0; 4 * 3];
        for r in 0..4 {
            kv[r * 3..(r + 1) * 3].copy_from_slice(row.data());
        }
        let kv = NdTensor::from_vec(&[4, 3], kv).unwrap();
        let uniform = run_attention(&block, &q, &kv);
        let single = run_attention(&block, &q, &row);
        for (a, b) in uniform.data().iter().zip(single.data().iter()) {
            assert!((a - b).abs() < 1e-12, "uniform mix over equal keys");
        }
    }

    #[test]
    fn matches_brute_force_reference_on_random_case() {
        let mut rng = SeededRng::new(14);
        for round in 0..3 {
            let mut block = AttentionBlock::new(&mut rng, 4, 5, 8, 2).unwrap();
            block.w_o = rng.gaussian_tensor(&[8, 4], 0.5).unwrap();
            let q = rng.gaussian_tensor(&[4, 4], 1.0).unwrap();
            let kv = rng.gaussian_tensor(&[4 + round, 5], 1.0).unwrap();
            let got = run_attention(&block, &q, &kv);
            let want = reference_attention(&block, &q, &kv);
            for (a, b) in got.data().iter().zip(want.data().iter()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn hand_computed_three_token_case() {
        // One head, width 2, hand-set weights and a full by-hand forward.
        let mut block = AttentionBlock {
            head_count: 1,
            model_dim: 2,
            w_q: NdTensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            w_k: NdTensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            w_v: NdTensor::from_vec(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap(),
            w_o: NdTensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        };
        block.w_o = block.w_o.clone();
        let z = NdTensor::from_vec(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let out = run_attention(&block, &z, &z);
        // Logits row 0: z0.z = [1, 0, 1]/sqrt(2); softmax; values are z with
        // swapped columns. Worked by hand:
        let s = 1.0 / 2.0f64.sqrt();
        let w = [s.exp(), 1.0, s.exp()];
        let zsum: f64 = w.iter().sum();
        let attended0 = [
            (w[0] * 0.0 + w[1] * 1.0 + w[2] * 1.0) / zsum,
            (w[0] * 1.0 + w[1] * 0.0 + w[2] * 1.0) / zsum,
        ];
        assert!((out.data()[0] - (1.0 + attended0[0])).abs() < 1e-12);
        assert!((out.data()[1] - (0.0 + attended0[1])).abs() < 1e-12);
    }

    #[test]
    fn invalid_head_split_is_rejected() {
        let mut rng = SeededRng::new(15);
        assert!(AttentionBlock::new(&mut rng, 4, 4, 9, 2).is_err());
        assert!(AttentionBlock::new(&mut rng, 4, 4, 8, 0).is_err());
    }

    #[test]
    fn query_width_mismatch_is_rejected() {
        let mut rng = SeededRng::new(16);
        let block = AttentionBlock::new(&mut rng, 4, 4, 8, 2).unwrap();
        let mut tape = GradTape::new();
        let bad = rng.gaussian_tensor(&[3, 5], 1.0).unwrap();
        let kv = rng.gaussian_tensor(&[3, 4], 1.0).unwrap();
        assert!(block.forward(&mut tape, &bad, &kv).is_err());
    }

    #[test]
    fn fresh_feedforward_is_identity_and_trains_away_from_it() {
        let mut rng = SeededRng::new(17);
        let ff = FeedForward::new(&mut rng, 4, 8);
        let x = rng.gaussian_tensor(&[3, 4], 1.0).unwrap();
        let mut tape = GradTape::new();
        let y = ff.forward(&mut tape, &x).unwrap();
        assert_eq!(y.data(), x.data());
        // Second-layer weights still receive gradient through the zero init.
        let s = tape.sum_all(&y).unwrap();
        let sq = tape.mul(&s, &s).unwrap();
        let grads = tape.backprop(&sq).unwrap();
        let w2 = tape.param(&ff.lin2.w);
        let g = grads.get(&w2).expect("grad for zero-initialized layer");
        assert!(g.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn parameter_collection_names_every_weight_once() {
        let mut rng = SeededRng::new(18);
        let block = AttentionBlock::new(&mut rng, 4, 4, 8, 2).unwrap();
        let mut out = Vec::new();
        block.collect("blk", &mut out);
        let names: Vec<&str> = out.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["blk.w_q", "blk.w_k", "blk.w_v", "blk.w_o"]);
    }
}
