//! The two-frame referring segmentation model: a shared backbone with
//! vision-language guidance after stages 3, 4 and 5, one dynamic-filtering
//! block per fused stage, and the pyramid decoder.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{check_frame, Backbone, STAGES};
use crate::decoder::{Decoder, MaskPrediction};
use crate::error::{shape_err, Error, Result};
use crate::language::{LanguageState, TokenIds, TokenTable, Vocab, DEFAULT_MAX_TOKENS};
use crate::lmdf::{Guidance, Lmdf, LmdfOptions};
use crate::params::{ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::{DType, Scalar, Tensor};
use crate::vlmg::Vlmg;

/// Backbone stages followed by vision-language guidance (0-based).
pub const FUSED_STAGES: [usize; 3] = [2, 3, 4];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Model width `D` shared by the language state and fused stages.
    pub width: usize,
    pub heads: usize,
    pub max_tokens: usize,
    /// Output channels of the five backbone stages.
    pub plan: [usize; STAGES],
    /// Width of the pixel-word affinity projections; the model width if unset.
    pub affinity_width: Option<usize>,
    pub dilations: Vec<usize>,
    pub decoder_width: usize,
    pub seed: u64,
    pub dtype: DType,
    pub guidance: Guidance,
    pub pre_interaction: bool,
    pub bank_per_dilation: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 32,
            heads: 4,
            max_tokens: DEFAULT_MAX_TOKENS,
            plan: [8, 16, 32, 32, 32],
            affinity_width: None,
            dilations: vec![1, 3, 5],
            decoder_width: 32,
            seed: 42,
            dtype: DType::F32,
            guidance: Guidance::Adaptive,
            pre_interaction: true,
            bank_per_dilation: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Input(msg));
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} must be a positive multiple of heads {}", self.width, self.heads));
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be at least 1".into());
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return bad(format!("dilations must be positive and non-empty, got {:?}", self.dilations));
        }
        if self.plan.contains(&0) || self.decoder_width == 0 || self.affinity_width == Some(0) {
            return bad("channel counts must be positive".into());
        }
        Ok(())
    }

    pub fn inner(&self) -> usize {
        self.affinity_width.unwrap_or(self.width)
    }

    fn lmdf_options(&self) -> LmdfOptions {
        LmdfOptions {
            dilations: self.dilations.clone(),
            guidance: self.guidance,
            pre_interaction: self.pre_interaction,
            bank_per_dilation: self.bank_per_dilation,
        }
    }

    /// Number of scalar parameters of a model built from this configuration.
    pub fn param_count(&self, vocab_len: usize) -> Result<usize> {
        self.validate()?;
        let d = self.width;
        let inner = self.inner();
        let block = 4 * d * d + 4 * d + 2 * 4 * d * d + 4 * d + d;
        let tokens = (vocab_len + self.max_tokens) * d;
        let inputs = self.backbone_inputs();
        let backbone: usize = (0..STAGES)
            .map(|i| {
                let (cin, cout) = (inputs[i], self.plan[i]);
                cout * cin * 9 + cout + cout * cout * 9 + cout
            })
            .sum();
        let vlmg: usize = FUSED_STAGES
            .iter()
            .map(|&i| d * self.plan[i] + d + 4 * inner * d + block + d * 2 * d + d)
            .sum();
        let banks = if self.bank_per_dilation { self.dilations.len() } else { 1 };
        let fan_in = d * (1 + self.dilations.len());
        let lmdf = FUSED_STAGES.len() * (6 * inner * d + 2 * block + banks * 9 * d * d + d * fan_in + d);
        let dw = self.decoder_width;
        let dec_inputs = self.decoder_inputs();
        let decoder = dec_inputs.iter().map(|&c| dw * c + dw).sum::<usize>() + 4 * (dw * dw * 9 + dw) + dw + 1;
        Ok(tokens + backbone + vlmg + lmdf + decoder)
    }

    fn backbone_inputs(&self) -> [usize; STAGES] {
        let mut inputs = [3, self.plan[0], self.plan[1], self.plan[2], self.plan[3]];
        for &i in &FUSED_STAGES {
            if i + 1 < STAGES {
                inputs[i + 1] = self.width;
            }
        }
        inputs
    }

    fn decoder_inputs(&self) -> [usize; STAGES] {
        [self.plan[0], self.plan[1], self.width, self.width, self.width]
    }
}

/// Per-frame encoder output: raw stages 1–2 and the guided stages 3–5.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub raw: [Var; 2],
    pub fused: [Var; 3],
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub tokens: TokenTable,
    pub backbone: Backbone,
    pub vlmg: Vec<Vlmg>,
    pub lmdf: Vec<Lmdf>,
    pub decoder: Decoder,
}

impl<T: Scalar> Model<T> {
    /// Builds and initializes every parameter from `config.seed`.
    /// `config.dtype` is set to `T`.
    pub fn new(mut config: ModelConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        config.dtype = T::DTYPE;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(config.seed);
        let (d, inner, heads) = (config.width, config.inner(), config.heads);
        let tokens = TokenTable::new(&mut store, &mut rng, vocab, d, config.max_tokens);
        let backbone = Backbone::new(&mut store, &mut rng, config.plan, config.backbone_inputs());
        let vlmg = FUSED_STAGES
            .iter()
            .map(|&i| Vlmg::new(&mut store, &mut rng, &format!("vlmg{}", i + 1), config.plan[i], d, inner, heads))
            .collect::<Result<Vec<_>>>()?;
        let lmdf = FUSED_STAGES
            .iter()
            .map(|&i| Lmdf::new(&mut store, &mut rng, &format!("lmdf{}", i + 1), d, inner, heads, config.lmdf_options()))
            .collect::<Result<Vec<_>>>()?;
        let decoder = Decoder::new(&mut store, &mut rng, config.decoder_inputs(), config.decoder_width);
        Ok(Self {
            config,
            store,
            tokens,
            backbone,
            vlmg,
            lmdf,
            decoder,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.tokens.vocab
    }

    pub fn encode_query(&self, query: &str) -> Result<TokenIds> {
        self.tokens.encode(query)
    }

    /// Runs the backbone with guidance on one frame, evolving its own copy of
    /// the linguistic state from `l0`.
    pub fn encode_frame(&self, s: &mut Session<T>, frame: Var, l0: &LanguageState) -> Result<Encoded> {
        check_frame(s.shape(frame))?;
        let v1 = self.backbone.stage(s, 0, frame)?;
        let v2 = self.backbone.stage(s, 1, v1)?;
        let mut x = v2;
        let mut lang = l0.clone();
        let mut fused = Vec::with_capacity(3);
        for (k, &i) in FUSED_STAGES.iter().enumerate() {
            let raw = self.backbone.stage(s, i, x)?;
            let out = self.vlmg[k].step(s, raw, &lang)?;
            lang = out.language;
            x = out.visual;
            fused.push(x);
        }
        Ok(Encoded {
            raw: [v1, v2],
            fused: [fused[0], fused[1], fused[2]],
        })
    }

    /// Mask logits `[1×H×W]` for `current`, with `reference` as temporal
    /// context. Passing the same variable twice encodes the frame once.
    pub fn forward(&self, s: &mut Session<T>, reference: Var, current: Var, query: &TokenIds) -> Result<Var> {
        if s.shape(reference) != s.shape(current) {
            return Err(shape_err("forward", format!("reference {:?} vs current {:?}", s.shape(reference), s.shape(current))));
        }
        let l0 = self.tokens.embed(s, query)?;
        let cur = self.encode_frame(s, current, &l0)?;
        let refr = if reference == current { cur.clone() } else { self.encode_frame(s, reference, &l0)? };
        let mut p = Vec::with_capacity(3);
        for k in 0..3 {
            p.push(self.lmdf[k].step(s, refr.fused[k], cur.fused[k], &l0)?.output);
        }
        self.decoder.decode(s, [cur.raw[0], cur.raw[1], p[0], p[1], p[2]])
    }

    /// Forward on concrete frames with a throwaway tape.
    pub fn predict(&self, reference: &Tensor<T>, current: &Tensor<T>, query: &TokenIds) -> Result<MaskPrediction<T>> {
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &self.store);
        let c = s.constant(current.clone());
        let r = if std::ptr::eq(reference, current) { c } else { s.constant(reference.clone()) };
        let logits = self.forward(&mut s, r, c, query)?;
        Ok(MaskPrediction::new(s.value(logits).clone()))
    }

    /// One prediction per frame; frame 0 is its own reference, frame `t`
    /// uses frame `t − 1`.
    pub fn run_clip(&self, frames: &[Tensor<T>], query: &TokenIds) -> Result<Vec<MaskPrediction<T>>> {
        if frames.is_empty() {
            return Err(Error::Input("clip has no frames".into()));
        }
        (0..frames.len())
            .map(|t| {
                let reference = &frames[t.saturating_sub(1)];
                self.predict(reference, &frames[t], query)
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }
}

/// Mean per-pixel binary cross-entropy of mask logits against a 0/1 target.
pub fn loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, target: &Tensor<T>) -> Result<Var> {
    check_binary(target)?;
    if tape.shape(logits) != target.shape() {
        return Err(shape_err("loss", format!("logits {:?} vs target {:?}", tape.shape(logits), target.shape())));
    }
    tape.bce_with_logits(logits, target)
}

pub fn check_binary<T: Scalar>(target: &Tensor<T>) -> Result<()> {
    match target.data().iter().position(|&v| v != T::zero() && v != T::one()) {
        Some(i) => Err(Error::Input(format!("target value {} at offset {i} is not 0 or 1", target.data()[i]))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, GradCheckOptions};

    fn small() -> ModelConfig {
        ModelConfig {
            width: 8,
            heads: 2,
            max_tokens: 3,
            plan: [4, 4, 8, 8, 8],
            decoder_width: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn param_count_matches_store() {
        let vocab = Vocab::default_scene();
        for cfg in [ModelConfig::default(), small(), ModelConfig { bank_per_dilation: true, affinity_width: Some(12), ..small() }] {
            let m = Model::<f32>::new(cfg.clone(), vocab.clone()).unwrap();
            assert_eq!(m.param_count(), cfg.param_count(vocab.len()).unwrap());
        }
    }

    #[test]
    fn default_param_count_snapshot() {
        assert_eq!(ModelConfig::default().param_count(20).unwrap(), 290_825);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::<f32>::new(small(), Vocab::default_scene()).unwrap();
        let b = Model::<f32>::new(small(), Vocab::default_scene()).unwrap();
        assert!(a.store.values().iter().zip(b.store.values()).all(|(x, y)| x.bit_eq(y)));
    }

    #[test]
    fn invalid_configs_rejected() {
        let vocab = Vocab::default_scene();
        for cfg in [
            ModelConfig { dilations: vec![], ..small() },
            ModelConfig { dilations: vec![1, 0], ..small() },
            ModelConfig { heads: 3, ..small() },
            ModelConfig { max_tokens: 0, ..small() },
        ] {
            assert!(Model::<f32>::new(cfg, vocab.clone()).is_err());
        }
    }

    #[test]
    fn loss_examples() {
        let target = Tensor::<f64>::from_fn([1, 4, 4], |i| ((i[1] + i[2]) % 2) as f64);
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros([1, 4, 4]));
        let l = loss(&mut tape, z, &target).unwrap();
        assert!((tape.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let sure = tape.constant(target.map(|t| if t == 1.0 { 20.0 } else { -20.0 }));
        let l = loss(&mut tape, sure, &target).unwrap();
        assert!(tape.value(l).item().unwrap() < 1e-8);
        let bad = target.with_value_at(3, 0.5);
        assert!(matches!(loss(&mut tape, z, &bad), Err(Error::Input(_))));
    }

    #[test]
    fn self_reference_and_buffer_swap() {
        let m = Model::<f32>::new(small(), Vocab::default_scene()).unwrap();
        let frame = Tensor::rand_uniform([3, 64, 64], 0.0, 1.0, &mut Rng::new(1));
        let copy = Tensor::from_vec([3, 64, 64], frame.data().to_vec()).unwrap();
        let q = m.encode_query("the red square").unwrap();
        let a = m.predict(&frame, &frame, &q).unwrap();
        let b = m.predict(&frame, &copy, &q).unwrap();
        let c = m.predict(&copy, &frame, &q).unwrap();
        assert!(a.logits.all_finite());
        assert_eq!(a.logits.shape(), &[1, 64, 64]);
        assert!(a.logits.bit_eq(&b.logits) && b.logits.bit_eq(&c.logits));
    }

    #[test]
    fn clip_semantics() {
        let m = Model::<f32>::new(small(), Vocab::default_scene()).unwrap();
        let q = m.encode_query("the blue circle").unwrap();
        let frame = Tensor::rand_uniform([3, 32, 32], 0.0, 1.0, &mut Rng::new(2));
        assert!(m.run_clip(&[], &q).is_err());
        let one = m.run_clip(std::slice::from_ref(&frame), &q).unwrap();
        assert_eq!(one.len(), 1);
        let three = m.run_clip(&vec![frame.clone(); 3], &q).unwrap();
        assert!(three.iter().all(|p| p.logits.bit_eq(&one[0].logits)));
    }

    #[test]
    fn pad_tokens_do_not_change_output() {
        let cfg = ModelConfig { max_tokens: 6, ..small() };
        let m = Model::<f64>::new(cfg, Vocab::default_scene()).unwrap();
        let frame = Tensor::rand_uniform([3, 32, 32], 0.0, 1.0, &mut Rng::new(3));
        let q = m.encode_query("the red square").unwrap();
        let mut noisy = q.clone();
        noisy.ids[4] = 7;
        noisy.ids[5] = 12;
        let a = m.predict(&frame, &frame, &q).unwrap();
        let b = m.predict(&frame, &frame, &noisy).unwrap();
        assert!(a.logits.bit_eq(&b.logits));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let cfg = ModelConfig { dtype: DType::F64, ..small() };
        let m = Model::<f64>::new(cfg, Vocab::default_scene()).unwrap();
        let mut rng = Rng::new(4);
        let reference = Tensor::rand_uniform([3, 64, 64], 0.0, 1.0, &mut rng);
        let current = Tensor::rand_uniform([3, 64, 64], 0.0, 1.0, &mut rng);
        let target = Tensor::from_fn([1, 64, 64], |i| if i[1] > 20 && i[2] < 30 { 1.0 } else { 0.0 });
        let q = m.encode_query("the red square").unwrap();
        let report = finite_diff_check(
            |tape, leaves| {
                let mut s = Session::with_leaves(tape, &m.store, leaves)?;
                let r = s.constant(reference.clone());
                let c = s.constant(current.clone());
                let logits = m.forward(&mut s, r, c, &q)?;
                loss(&mut s, logits, &target)
            },
            m.store.values(),
            &GradCheckOptions {
                max_coords: Some(2),
                names: m.store.names().to_vec(),
                ..GradCheckOptions::default()
            },
            &mut Rng::new(0),
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-5, "{:?}", report.worst());
    }
}
