//! Vision-language mutual guidance between one visual stage and the
//! linguistic state.
//!
//! ```text
//! A_vl = softmax_pixels((W_v1·V)ᵀ (W_l1·L))          [HW×T]
//! Ṽ    = V·A_vl                                      [D×T]
//! L'   = Block(Ṽ + L)
//! A_lv = softmax_words((W_v2·V)ᵀ (W_l2·L'))          [HW×T], masked
//! L̃    = L'·A_lvᵀ                                    [D×HW]
//! V̄    = Norm(V) + Norm(Conv1×1(Cat(V, L̃)))
//! ```
//!
//! No intermediate is larger than `HW×T` or `T×T`.

use crate::autodiff::Var;
use crate::error::{shape_err, Result};
use crate::language::LanguageState;
use crate::params::{ParamId, ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::{Mask, Scalar};
use crate::transformer::TransformerBlock;

#[derive(Clone, Debug)]
pub struct Vlmg {
    pub width: usize,
    pub stage_channels: usize,
    pub inner: usize,
    pub stage_proj: ParamId,
    pub stage_proj_bias: ParamId,
    pub w_v1: ParamId,
    pub w_l1: ParamId,
    pub w_v2: ParamId,
    pub w_l2: ParamId,
    pub block: TransformerBlock,
    pub fuse: ParamId,
    pub fuse_bias: ParamId,
}

/// Everything one mutual-guidance step produces, for inspection.
pub struct VlmgOutput {
    /// `V̄`, `[D×H×W]`.
    pub visual: Var,
    pub language: LanguageState,
    /// Stage features after projection to the model width.
    pub projected: Var,
    /// `A_vl`, `[HW×T]`, normalized over pixels.
    pub vision_affinity: Var,
    /// `Ṽ`, `[D×T]`.
    pub vision_in_language: Var,
    /// `A_lv` stored pixel-major, `[HW×T]`, normalized over valid words.
    pub language_affinity: Var,
    /// `L̃`, `[D×H×W]`.
    pub language_in_vision: Var,
}

impl Vlmg {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        prefix: &str,
        stage_channels: usize,
        width: usize,
        inner: usize,
        heads: usize,
    ) -> Result<Self> {
        let d = width;
        let proj_std = (1.0 / d as f64).sqrt();
        Ok(Self {
            width,
            stage_channels,
            inner,
            stage_proj: store.add_randn(format!("{prefix}.stage_proj"), [d, stage_channels, 1, 1], (2.0 / stage_channels as f64).sqrt(), rng),
            // a nonzero bias keeps projected vectors away from the normalization floor
            stage_proj_bias: store.add_randn(format!("{prefix}.stage_proj_bias"), [d], 0.1, rng),
            w_v1: store.add_randn(format!("{prefix}.w_v1"), [inner, d], proj_std, rng),
            w_l1: store.add_randn(format!("{prefix}.w_l1"), [inner, d], proj_std, rng),
            w_v2: store.add_randn(format!("{prefix}.w_v2"), [inner, d], proj_std, rng),
            w_l2: store.add_randn(format!("{prefix}.w_l2"), [inner, d], proj_std, rng),
            block: TransformerBlock::new(store, rng, &format!("{prefix}.block"), d, heads)?,
            fuse: store.add_randn(format!("{prefix}.fuse"), [d, 2 * d, 1, 1], (1.0 / (2 * d) as f64).sqrt(), rng),
            fuse_bias: store.add_zeros(format!("{prefix}.fuse_bias"), [d]),
        })
    }

    /// 1×1 projection of a `[C_stage×H×W]` map to the model width.
    pub fn project<T: Scalar>(&self, s: &mut Session<T>, stage: Var) -> Result<Var> {
        let (w, b) = (s.param(self.stage_proj), s.param(self.stage_proj_bias));
        s.conv2d(stage, w, Some(b), 1, 0)
    }

    /// `Ṽ = V·softmax_pixels((W_v1·V)ᵀ(W_l1·L))`; returns `(Ṽ, A_vl)`.
    /// Padded word columns are computed like the rest and stay flagged invalid.
    pub fn vision_to_language<T: Scalar>(&self, s: &mut Session<T>, v: Var, lang: &LanguageState) -> Result<(Var, Var)> {
        let (wv, wl) = (s.param(self.w_v1), s.param(self.w_l1));
        vision_to_language(s, v, lang, wv, wl)
    }

    pub fn co_embed<T: Scalar>(&self, s: &mut Session<T>, v_tilde: Var, lang: &LanguageState) -> Result<LanguageState> {
        let mixed = s.add(v_tilde, lang.features)?;
        let next = self.block.forward(s, mixed, &lang.valid)?;
        Ok(lang.with_features(next))
    }

    /// `L̃ = L'·A_lv` reshaped to `[D×H×W]`; returns `(L̃, A_lv)` with the
    /// affinity stored pixel-major.
    pub fn language_to_vision<T: Scalar>(&self, s: &mut Session<T>, v: Var, lang: &LanguageState) -> Result<(Var, Var)> {
        let (wv, wl) = (s.param(self.w_v2), s.param(self.w_l2));
        language_to_vision(s, v, lang, wv, wl)
    }

    /// `Norm(V) + Norm(Conv1×1(Cat(V, L̃)))`.
    pub fn inject<T: Scalar>(&self, s: &mut Session<T>, v: Var, l_tilde: Var) -> Result<Var> {
        if s.shape(v) != s.shape(l_tilde) {
            return Err(shape_err("inject", format!("{:?} vs {:?}", s.shape(v), s.shape(l_tilde))));
        }
        let cat = s.concat(&[v, l_tilde], 0)?;
        let (w, b) = (s.param(self.fuse), s.param(self.fuse_bias));
        let fused = s.conv2d(cat, w, Some(b), 1, 0)?;
        let a = s.l2_normalize(v);
        let f = s.l2_normalize(fused);
        s.add(a, f)
    }

    /// Full step on a raw stage map: project → vision-to-language → co-embed →
    /// language-to-vision → inject.
    pub fn step<T: Scalar>(&self, s: &mut Session<T>, stage: Var, lang: &LanguageState) -> Result<VlmgOutput> {
        let projected = self.project(s, stage)?;
        let (v_tilde, a_vl) = self.vision_to_language(s, projected, lang)?;
        let next = self.co_embed(s, v_tilde, lang)?;
        let (l_tilde, a_lv) = self.language_to_vision(s, projected, &next)?;
        let visual = self.inject(s, projected, l_tilde)?;
        Ok(VlmgOutput {
            visual,
            language: next,
            projected,
            vision_affinity: a_vl,
            vision_in_language: v_tilde,
            language_affinity: a_lv,
            language_in_vision: l_tilde,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![
            self.stage_proj,
            self.stage_proj_bias,
            self.w_v1,
            self.w_l1,
            self.w_v2,
            self.w_l2,
            self.fuse,
            self.fuse_bias,
        ];
        ids.extend(self.block.param_ids());
        ids
    }
}

/// `[D×H×W]` → `[D×HW]`.
pub(crate) fn flatten_map<T: Scalar>(s: &mut Session<T>, v: Var) -> Result<(Var, usize, usize)> {
    let shape = s.shape(v).to_vec();
    if shape.len() != 3 {
        return Err(shape_err("feature map", format!("expected [D,H,W], got {shape:?}")));
    }
    let flat = s.reshape(v, [shape[0], shape[1] * shape[2]])?;
    Ok((flat, shape[1], shape[2]))
}

/// Pixel-word affinity `(W_v·V)ᵀ(W_l·L)`, `[HW×T]`.
pub(crate) fn affinity<T: Scalar>(s: &mut Session<T>, v_flat: Var, l: Var, wv: Var, wl: Var) -> Result<Var> {
    let pv = s.matmul(wv, v_flat)?;
    let pl = s.matmul(wl, l)?;
    let pvt = s.transpose(pv)?;
    s.matmul(pvt, pl)
}

/// Maps pixels into word slots: each word column of the result is a convex
/// combination of pixel features.
pub(crate) fn vision_to_language<T: Scalar>(
    s: &mut Session<T>,
    v: Var,
    lang: &LanguageState,
    wv: Var,
    wl: Var,
) -> Result<(Var, Var)> {
    let (flat, _, _) = flatten_map(s, v)?;
    let logits = affinity(s, flat, lang.features, wv, wl)?;
    let a = s.softmax(logits, 0, None)?;
    let mapped = s.matmul(flat, a)?;
    Ok((mapped, a))
}

/// Maps valid words onto pixels: each pixel of the result is a convex
/// combination of valid word features.
pub(crate) fn language_to_vision<T: Scalar>(
    s: &mut Session<T>,
    v: Var,
    lang: &LanguageState,
    wv: Var,
    wl: Var,
) -> Result<(Var, Var)> {
    let (flat, h, w) = flatten_map(s, v)?;
    let logits = affinity(s, flat, lang.features, wv, wl)?;
    let word_mask = Mask::new([1, lang.len()], lang.valid.clone())?;
    let a = s.softmax(logits, 1, Some(&word_mask))?;
    // [HW×T]·[T×D]: masked words lead each product with an exact zero
    let lt = s.transpose(lang.features)?;
    let mapped = s.matmul(a, lt)?;
    let mapped = s.transpose(mapped)?;
    let d = s.shape(mapped)[0];
    let out = s.reshape(mapped, [d, h, w])?;
    Ok((out, a))
}
