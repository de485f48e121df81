//! Language-guided multi-scale dynamic filtering across a reference and a
//! current frame.
//!
//! The language state is modulated first by the reference frame, then by the
//! current frame. The result attends back onto the current frame to give each
//! position its own guidance vector, which a bank of nine `D×D` transforms
//! turns into a per-position 3×3 depthwise kernel. The current frame is
//! filtered at every configured dilation and the results are fused by a 1×1
//! conv.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{shape_err, Error, Result};
use crate::language::LanguageState;
use crate::params::{ParamId, ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::{Mask, Scalar, Tensor};
use crate::transformer::TransformerBlock;
use crate::vlmg::{affinity, flatten_map, vision_to_language};

/// Source of the filter-generating guidance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Guidance {
    /// Per-position guidance attended from the modulated language.
    #[default]
    Adaptive,
    /// Max-pooled language vector multiplied into the current frame.
    MaxPool,
    /// Max-pooled language vector copied to every position: one kernel set.
    Shared,
}

impl Guidance {
    pub fn name(self) -> &'static str {
        match self {
            Guidance::Adaptive => "none",
            Guidance::MaxPool => "maxpool",
            Guidance::Shared => "share",
        }
    }
}

impl fmt::Display for Guidance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Guidance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "adaptive" => Ok(Guidance::Adaptive),
            "maxpool" => Ok(Guidance::MaxPool),
            "share" | "shared" => Ok(Guidance::Shared),
            _ => Err(Error::Input(format!("unknown ablation `{s}` (expected maxpool, share or none)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LmdfOptions {
    pub dilations: Vec<usize>,
    pub guidance: Guidance,
    /// Skip both language modulations and guide with `L_0` directly.
    pub pre_interaction: bool,
    /// One kernel bank per dilation instead of a single shared bank.
    pub bank_per_dilation: bool,
}

impl Default for LmdfOptions {
    fn default() -> Self {
        Self {
            dilations: vec![1, 3, 5],
            guidance: Guidance::Adaptive,
            pre_interaction: true,
            bank_per_dilation: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Lmdf {
    pub width: usize,
    pub options: LmdfOptions,
    pub w_v3: ParamId,
    pub w_l3: ParamId,
    pub w_v4: ParamId,
    pub w_l4: ParamId,
    pub w_v5: ParamId,
    pub w_l5: ParamId,
    pub reference_block: TransformerBlock,
    pub current_block: TransformerBlock,
    /// `[9D×D]` stacks of the offset transforms; one entry, or one per dilation.
    pub banks: Vec<ParamId>,
    pub fuse: ParamId,
    pub fuse_bias: ParamId,
}

/// Intermediates of one filtering step.
pub struct LmdfOutput {
    pub output: Var,
    pub reference_language: LanguageState,
    pub current_language: LanguageState,
    /// `[D×H×W]`.
    pub guidance: Var,
    /// Word weights per position, `[HW×T]`; absent for pooled guidance.
    pub guidance_weights: Option<Var>,
    /// One `[3×3×D×H×W]` kernel tensor per bank.
    pub kernels: Vec<Var>,
    /// Filtered maps, one per dilation.
    pub filtered: Vec<Var>,
}

impl Lmdf {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        prefix: &str,
        width: usize,
        inner: usize,
        heads: usize,
        options: LmdfOptions,
    ) -> Result<Self> {
        if options.dilations.is_empty() || options.dilations.contains(&0) {
            return Err(Error::Input(format!("dilations must be positive and non-empty, got {:?}", options.dilations)));
        }
        let d = width;
        let std = (1.0 / d as f64).sqrt();
        let mut proj = |name: &str, rng: &mut Rng| store.add_randn(format!("{prefix}.{name}"), [inner, d], std, rng);
        let (w_v3, w_l3) = (proj("w_v3", rng), proj("w_l3", rng));
        let (w_v4, w_l4) = (proj("w_v4", rng), proj("w_l4", rng));
        let (w_v5, w_l5) = (proj("w_v5", rng), proj("w_l5", rng));
        let reference_block = TransformerBlock::new(store, rng, &format!("{prefix}.reference_block"), d, heads)?;
        let current_block = TransformerBlock::new(store, rng, &format!("{prefix}.current_block"), d, heads)?;
        let bank_count = if options.bank_per_dilation { options.dilations.len() } else { 1 };
        let bank_std = (1.0 / (9 * d) as f64).sqrt();
        let banks = (0..bank_count)
            .map(|i| store.add_randn(format!("{prefix}.bank{i}"), [9 * d, d], bank_std, rng))
            .collect();
        let fan_in = d * (1 + options.dilations.len());
        let fuse = store.add_randn(format!("{prefix}.fuse"), [d, fan_in, 1, 1], (1.0 / fan_in as f64).sqrt(), rng);
        let fuse_bias = store.add_zeros(format!("{prefix}.fuse_bias"), [d]);
        Ok(Self {
            width,
            options,
            w_v3,
            w_l3,
            w_v4,
            w_l4,
            w_v5,
            w_l5,
            reference_block,
            current_block,
            banks,
            fuse,
            fuse_bias,
        })
    }

    pub fn modulate_with_reference<T: Scalar>(&self, s: &mut Session<T>, reference: Var, l0: &LanguageState) -> Result<LanguageState> {
        let (wv, wl) = (s.param(self.w_v3), s.param(self.w_l3));
        modulate(s, reference, l0, wv, wl, &self.reference_block)
    }

    pub fn modulate_with_current<T: Scalar>(&self, s: &mut Session<T>, current: Var, lr: &LanguageState) -> Result<LanguageState> {
        let (wv, wl) = (s.param(self.w_v4), s.param(self.w_l4));
        modulate(s, current, lr, wv, wl, &self.current_block)
    }

    /// Position-adaptive guidance `[D×H×W]` plus its `[HW×T]` word weights.
    pub fn guidance<T: Scalar>(&self, s: &mut Session<T>, current: Var, lc: &LanguageState) -> Result<(Var, Var)> {
        let (flat, h, w) = flatten_map(s, current)?;
        let (wv, wl) = (s.param(self.w_v5), s.param(self.w_l5));
        let logits = affinity(s, flat, lc.features, wv, wl)?;
        let mask = Mask::new([1, lc.len()], lc.valid.clone())?;
        let weights = s.softmax(logits, 1, Some(&mask))?;
        let lt = s.transpose(lc.features)?;
        let g = s.matmul(weights, lt)?;
        let g = s.transpose(g)?;
        let g = s.reshape(g, [self.width, h, w])?;
        Ok((g, weights))
    }

    /// Pooled guidance for the ablation modes.
    pub fn pooled_guidance<T: Scalar>(&self, s: &mut Session<T>, current: Var, lc: &LanguageState) -> Result<Var> {
        let shape = s.shape(current).to_vec();
        let pooled = s.masked_max(lc.features, &lc.valid)?;
        let pooled = s.reshape(pooled, [self.width, 1, 1])?;
        match self.options.guidance {
            Guidance::MaxPool => s.mul(current, pooled),
            _ => {
                let ones = s.constant(Tensor::ones([1, shape[1], shape[2]]));
                s.mul(pooled, ones)
            }
        }
    }

    /// `K(k,l,c,i,j) = (w_{k,l}·g_{i,j})(c)`, laid out `[3×3×D×H×W]`.
    pub fn kernels<T: Scalar>(&self, s: &mut Session<T>, bank: usize, guidance: Var) -> Result<Var> {
        let (flat, h, w) = flatten_map(s, guidance)?;
        let b = s.param(self.banks[bank]);
        let k = s.matmul(b, flat)?;
        s.reshape(k, [3, 3, self.width, h, w])
    }

    pub fn step<T: Scalar>(&self, s: &mut Session<T>, reference: Var, current: Var, l0: &LanguageState) -> Result<LmdfOutput> {
        if s.shape(reference) != s.shape(current) || s.shape(current).first() != Some(&self.width) {
            return Err(shape_err(
                "lmdf",
                format!("reference {:?} / current {:?} at width {}", s.shape(reference), s.shape(current), self.width),
            ));
        }
        let (lr, lc) = if self.options.pre_interaction {
            let lr = self.modulate_with_reference(s, reference, l0)?;
            let lc = self.modulate_with_current(s, current, &lr)?;
            (lr, lc)
        } else {
            (l0.clone(), l0.clone())
        };
        let (guidance, weights) = match self.options.guidance {
            Guidance::Adaptive => {
                let (g, w) = self.guidance(s, current, &lc)?;
                (g, Some(w))
            }
            _ => (self.pooled_guidance(s, current, &lc)?, None),
        };
        let kernels: Vec<Var> = (0..self.banks.len())
            .map(|b| self.kernels(s, b, guidance))
            .collect::<Result<_>>()?;
        let mut parts = vec![current];
        let mut filtered = Vec::with_capacity(self.options.dilations.len());
        for (i, &d) in self.options.dilations.iter().enumerate() {
            let k = kernels[if kernels.len() == 1 { 0 } else { i }];
            let v = s.dynamic_filter(current, k, d)?;
            filtered.push(v);
            parts.push(v);
        }
        let cat = s.concat(&parts, 0)?;
        let (fw, fb) = (s.param(self.fuse), s.param(self.fuse_bias));
        let output = s.conv2d(cat, fw, Some(fb), 1, 0)?;
        Ok(LmdfOutput {
            output,
            reference_language: lr,
            current_language: lc,
            guidance,
            guidance_weights: weights,
            kernels,
            filtered,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w_v3, self.w_l3, self.w_v4, self.w_l4, self.w_v5, self.w_l5];
        ids.extend(self.reference_block.param_ids());
        ids.extend(self.current_block.param_ids());
        ids.extend(&self.banks);
        ids.extend([self.fuse, self.fuse_bias]);
        ids
    }
}

fn modulate<T: Scalar>(
    s: &mut Session<T>,
    v: Var,
    lang: &LanguageState,
    wv: Var,
    wl: Var,
    block: &TransformerBlock,
) -> Result<LanguageState> {
    let (mapped, _) = vision_to_language(s, v, lang, wv, wl)?;
    let mixed = s.add(mapped, lang.features)?;
    let next = block.forward(s, mixed, &lang.valid)?;
    Ok(lang.with_features(next))
}
