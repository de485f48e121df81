//! Pre-norm transformer block over `[D×T]` token matrices:
//! `x̂ = MSA(LN(x)) + x`, `out = FFN(LN(x̂)) + x̂`, with masked keys.

use crate::autodiff::Var;
use crate::error::{shape_err, Result};
use crate::params::{ParamId, ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::{Mask, Scalar};

#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub width: usize,
    pub heads: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub ffn_in: ParamId,
    pub ffn_in_bias: ParamId,
    pub ffn_out: ParamId,
    pub ffn_out_bias: ParamId,
}

/// Output of one attention pass, with the per-head `[T_q×T_k]` weights.
pub struct Attention {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, prefix: &str, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(shape_err("transformer", format!("{heads} heads do not divide width {width}")));
        }
        let d = width;
        let std = (1.0 / d as f64).sqrt();
        let hidden = 4 * d;
        let mut lin = |name: &str, rows: usize, cols: usize, std: f64| {
            store.add_randn(format!("{prefix}.{name}"), [rows, cols], std, rng)
        };
        let wq = lin("wq", d, d, std);
        let wk = lin("wk", d, d, std);
        let wv = lin("wv", d, d, std);
        let wo = lin("wo", d, d, std);
        let ffn_in = lin("ffn_in", hidden, d, std);
        let ffn_out = lin("ffn_out", d, hidden, (1.0 / hidden as f64).sqrt());
        Ok(Self {
            width,
            heads,
            wq,
            wk,
            wv,
            wo,
            ln1_gain: store.add_ones(format!("{prefix}.ln1_gain"), [d, 1]),
            ln1_bias: store.add_zeros(format!("{prefix}.ln1_bias"), [d, 1]),
            ln2_gain: store.add_ones(format!("{prefix}.ln2_gain"), [d, 1]),
            ln2_bias: store.add_zeros(format!("{prefix}.ln2_bias"), [d, 1]),
            ffn_in,
            ffn_in_bias: store.add_zeros(format!("{prefix}.ffn_in_bias"), [hidden, 1]),
            ffn_out,
            ffn_out_bias: store.add_zeros(format!("{prefix}.ffn_out_bias"), [d, 1]),
        })
    }

    /// Every parameter of the block.
    pub fn param_ids(&self) -> [ParamId; 12] {
        [
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.ln1_gain,
            self.ln1_bias,
            self.ln2_gain,
            self.ln2_bias,
            self.ffn_in,
            self.ffn_in_bias,
            self.ffn_out,
            self.ffn_out_bias,
        ]
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var, valid: &[bool]) -> Result<Var> {
        Ok(self.forward_with_attention(s, x, valid)?.output)
    }

    /// Block output; `weights` holds the attention maps of its MSA.
    pub fn forward_with_attention<T: Scalar>(&self, s: &mut Session<T>, x: Var, valid: &[bool]) -> Result<Attention> {
        self.check_input(s, x, valid)?;
        let h = self.norm(s, x, self.ln1_gain, self.ln1_bias)?;
        let att = self.msa(s, h, valid)?;
        let mid = s.add(att.output, x)?;
        let h2 = self.norm(s, mid, self.ln2_gain, self.ln2_bias)?;
        let f = self.ffn(s, h2)?;
        Ok(Attention {
            output: s.add(f, mid)?,
            weights: att.weights,
        })
    }

    fn check_input<T: Scalar>(&self, s: &Session<T>, x: Var, valid: &[bool]) -> Result<()> {
        let shape = s.shape(x);
        if shape.len() != 2 || shape[0] != self.width || shape[1] != valid.len() {
            return Err(shape_err(
                "transformer",
                format!("input {shape:?} against width {} and {} tokens", self.width, valid.len()),
            ));
        }
        Ok(())
    }

    fn norm<T: Scalar>(&self, s: &mut Session<T>, x: Var, gain: ParamId, bias: ParamId) -> Result<Var> {
        let n = s.layer_norm(x);
        let g = s.param(gain);
        let b = s.param(bias);
        let scaled = s.mul(n, g)?;
        s.add(scaled, b)
    }

    /// Feed-forward `D → 4D → D` with ReLU.
    pub fn ffn<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w1 = s.param(self.ffn_in);
        let b1 = s.param(self.ffn_in_bias);
        let w2 = s.param(self.ffn_out);
        let b2 = s.param(self.ffn_out_bias);
        let h = s.matmul(w1, x)?;
        let h = s.add(h, b1)?;
        let h = s.relu(h);
        let o = s.matmul(w2, h)?;
        s.add(o, b2)
    }

    /// Multi-head scaled dot-product self-attention. Keys at invalid positions
    /// receive exactly zero weight; there is no positional term, so the map is
    /// permutation-equivariant over tokens.
    pub fn msa<T: Scalar>(&self, s: &mut Session<T>, x: Var, valid: &[bool]) -> Result<Attention> {
        let t = valid.len();
        let dh = self.width / self.heads;
        let key_mask = Mask::new([1, t], valid.to_vec())?;
        let wq = s.param(self.wq);
        let wk = s.param(self.wk);
        let wv = s.param(self.wv);
        let wo = s.param(self.wo);
        let q = s.matmul(wq, x)?;
        let k = s.matmul(wk, x)?;
        let v = s.matmul(wv, x)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outputs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for hd in 0..self.heads {
            let qh = s.slice(q, 0, hd * dh, dh)?;
            let kh = s.slice(k, 0, hd * dh, dh)?;
            let vh = s.slice(v, 0, hd * dh, dh)?;
            let qt = s.transpose(qh)?;
            let scores = s.matmul(qt, kh)?;
            let scores = s.scale(scores, scale);
            let a = s.softmax(scores, 1, Some(&key_mask))?;
            // [T_q×T_k]·[T_k×dh]: zero weights lead each product, so masked
            // keys add nothing.
            let vt = s.transpose(vh)?;
            head_outputs.push(s.matmul(a, vt)?);
            weights.push(a);
        }
        let joined = s.concat(&head_outputs, 1)?;
        let joined = s.transpose(joined)?;
        Ok(Attention {
            output: s.matmul(wo, joined)?,
            weights,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, GradCheckOptions, Tape};
    use crate::tensor::Tensor;

    fn block(seed: u64, d: usize, heads: usize) -> (ParamStore<f64>, TransformerBlock) {
        let mut store = ParamStore::new();
        let b = TransformerBlock::new(&mut store, &mut Rng::new(seed), "blk", d, heads).unwrap();
        (store, b)
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::<f64>::new();
        assert!(TransformerBlock::new(&mut store, &mut Rng::new(0), "b", 6, 4).is_err());
    }

    #[test]
    fn single_token_attention_is_one() {
        let (store, b) = block(1, 8, 4);
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store);
        let x = s.constant(Tensor::randn([8, 1], 1.0, &mut Rng::new(2)));
        let att = b.forward_with_attention(&mut s, x, &[true]).unwrap();
        for w in &att.weights {
            assert_eq!(s.value(*w).data(), &[1.0]);
        }
        assert!(s.value(att.output).all_finite());
    }

    #[test]
    fn zeroed_block_is_identity() {
        let (mut store, b) = block(3, 8, 2);
        for id in b.param_ids() {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(shape)).unwrap();
        }
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store);
        let xt = Tensor::randn([8, 4], 1.0, &mut Rng::new(4));
        let x = s.constant(xt.clone());
        let y = b.forward(&mut s, x, &[true, true, true, false]).unwrap();
        assert!(s.value(y).bit_eq(&xt));
    }

    #[test]
    fn all_masked_input_is_degenerate() {
        let (store, b) = block(5, 8, 4);
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store);
        let x = s.constant(Tensor::ones([8, 2]));
        assert!(matches!(
            b.forward(&mut s, x, &[false, false]),
            Err(crate::error::Error::DegenerateSlice { .. })
        ));
    }

    #[test]
    fn attention_rows_sum_to_one_over_valid_keys() {
        let (store, b) = block(6, 8, 4);
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store);
        let x = s.constant(Tensor::randn([8, 5], 1.0, &mut Rng::new(7)));
        let valid = [true, true, false, true, false];
        let att = b.msa(&mut s, x, &valid).unwrap();
        for w in &att.weights {
            let a = s.value(*w);
            for q in 0..5 {
                let total: f64 = (0..5).filter(|&k| valid[k]).map(|k| a.at(&[q, k])).sum();
                assert!((total - 1.0).abs() < 1e-12);
                assert_eq!(a.at(&[q, 2]), 0.0);
                assert_eq!(a.at(&[q, 4]), 0.0);
            }
        }
    }

    #[test]
    fn msa_is_permutation_equivariant() {
        let (store, b) = block(8, 8, 4);
        let x = Tensor::<f64>::randn([8, 4], 1.0, &mut Rng::new(9));
        let perm = [2usize, 0, 3, 1];
        let xp = Tensor::from_fn([8, 4], |i| x.at(&[i[0], perm[i[1]]]));
        let run = |input: &Tensor<f64>| {
            let mut tape = Tape::new();
            let mut s = Session::new(&mut tape, &store);
            let v = s.constant(input.clone());
            let o = b.msa(&mut s, v, &[true; 4]).unwrap().output;
            s.value(o).clone()
        };
        let y = run(&x);
        let yp = run(&xp);
        for c in 0..8 {
            for t in 0..4 {
                assert!((yp.at(&[c, t]) - y.at(&[c, perm[t]])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_tokens_identical_outputs() {
        let (store, b) = block(10, 8, 4);
        let col = Tensor::<f64>::randn([8, 1], 1.0, &mut Rng::new(11));
        let other = Tensor::<f64>::randn([8, 1], 1.0, &mut Rng::new(12));
        let x = Tensor::concat(&[&col, &other, &col], 1).unwrap();
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store);
        let v = s.constant(x);
        let o = b.msa(&mut s, v, &[true; 3]).unwrap().output;
        let y = s.value(o);
        for c in 0..8 {
            assert_eq!(y.at(&[c, 0]), y.at(&[c, 2]));
        }
    }

    #[test]
    fn pad_content_never_reaches_valid_outputs() {
        let (store, b) = block(13, 8, 4);
        let valid = [true, true, true, false, false];
        let mut rng = Rng::new(14);
        let x = Tensor::<f64>::randn([8, 5], 1.0, &mut rng);
        let noise = Tensor::<f64>::randn([8, 5], 50.0, &mut rng);
        let x2 = Tensor::from_fn([8, 5], |i| if valid[i[1]] { x.at(i) } else { noise.at(i) });
        let run = |input: &Tensor<f64>| {
            let mut tape = Tape::new();
            let mut s = Session::new(&mut tape, &store);
            let v = s.constant(input.clone());
            let o = b.forward(&mut s, v, &valid).unwrap();
            s.value(o).slice(1, 0, 3).unwrap()
        };
        assert!(run(&x).bit_eq(&run(&x2)));
    }

    #[test]
    fn layer_norm_moments_before_gain() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::randn([8, 6], 4.0, &mut Rng::new(15)));
        let y = tape.layer_norm(x);
        let y = tape.value(y);
        let mean = y.mean_axis(0).unwrap();
        assert!(mean.data().iter().all(|m| m.abs() < 1e-6));
        let var = y.mul(y).unwrap().mean_axis(0).unwrap();
        assert!(var.data().iter().all(|v| (v - 1.0).abs() < 1e-5));
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let (store, b) = block(16, 8, 4);
        let x = Tensor::<f64>::randn([8, 4], 1.0, &mut Rng::new(17));
        let mut params: Vec<Tensor<f64>> = store.values().to_vec();
        params.push(x);
        let report = finite_diff_check(
            |tape, leaves| {
                let (p, xv) = leaves.split_at(leaves.len() - 1);
                let mut s = Session::with_leaves(tape, &store, p)?;
                let y = b.forward(&mut s, xv[0], &[true, true, true, false])?;
                let y2 = s.mul(y, y)?;
                Ok(s.sum_all(y2))
            },
            &params,
            &GradCheckOptions::default(),
            &mut Rng::new(0),
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-5, "{:?}", report.worst());
    }
}
