//! Self-test suites run by `--mode check`: gradient checks of every op and
//! module, numerical oracles, affinity and memory contracts, and model
//! invariants.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::autodiff::{finite_diff_check, inject_fault, random_projection, GradCheckOptions, GradReport, OpKind, Tape, Var};
use crate::decoder::Decoder;
use crate::error::{Error, Result};
use crate::language::{LanguageState, Vocab};
use crate::lmdf::{Lmdf, LmdfOptions};
use crate::model::{self, Model, ModelConfig};
use crate::params::{ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::{DType, Mask, Tensor};
use crate::trace;
use crate::train::{self, SgdConfig, TrainOptions, TrainState};
use crate::transformer::TransformerBlock;
use crate::vlmg::Vlmg;

pub const GRAD_TOL: f64 = 1e-5;
pub const ORACLE_TOL: f64 = 1e-9;
pub const SUM_TOL: f64 = 1e-6;

/// Half step of the extrapolated central differences used by the gradient
/// suites.
pub const GRAD_STEP: f64 = 1e-3;

/// Gradient-check settings shared by every suite.
pub fn grad_options() -> GradCheckOptions {
    GradCheckOptions {
        step: GRAD_STEP,
        extrapolate: true,
        ..GradCheckOptions::default()
    }
}

/// Module width used by the module-level suites.
pub const DESK_WIDTH: usize = 8;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    /// Largest observed error, compared against `tolerance`.
    pub max_error: f64,
    pub tolerance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gradients: Option<GradReport>,
    pub detail: String,
}

impl SuiteResult {
    fn measured(name: impl Into<String>, max_error: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed: max_error <= tolerance,
            max_error,
            tolerance,
            gradients: None,
            detail: detail.into(),
        }
    }

    fn flag(name: impl Into<String>, ok: bool, detail: impl Into<String>) -> Self {
        Self::measured(name, if ok { 0.0 } else { 1.0 }, 0.0, detail)
    }

    fn gradients(name: impl Into<String>, report: GradReport) -> Self {
        let detail = format!("{} coordinates checked, {} skipped at kinks", report.checked(), report.skipped());
        let mut r = Self::measured(name, report.max_rel_err, GRAD_TOL, detail);
        r.gradients = Some(report);
        r
    }

    fn errored(name: impl Into<String>, err: &Error) -> Self {
        Self {
            name: name.into(),
            passed: false,
            max_error: f64::INFINITY,
            tolerance: 0.0,
            gradients: None,
            detail: format!("error: {err}"),
        }
    }
}

fn settle(name: &str, r: Result<SuiteResult>) -> SuiteResult {
    r.unwrap_or_else(|e| SuiteResult::errored(name, &e))
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub passed: bool,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub injected_fault: Option<String>,
    pub suites: Vec<SuiteResult>,
    pub failures: Vec<String>,
    /// Ops whose backward rules the failing op-level gradient checks point to.
    pub suspect_ops: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub seed: u64,
    pub dtype: DType,
    /// Negates the backward rule of one op for the whole run.
    pub fault: Option<OpKind>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            seed: 42,
            dtype: DType::F64,
            fault: None,
        }
    }
}

/// Runs every suite. Refuses to run in single precision, where central
/// differences cannot resolve the tolerances.
pub fn run(opts: &CheckOptions) -> Result<CheckReport> {
    if opts.dtype != DType::F64 {
        return Err(Error::Input(format!("check needs f64, got {}; rerun with --dtype f64", opts.dtype)));
    }
    let _guard = opts.fault.map(inject_fault);
    let seed = opts.seed;
    let (mut suites, op_sets) = op_suites(seed);
    let suspects = suspect_ops(&suites, &op_sets);
    suites.extend(module_suites(seed));
    suites.push(settle("oracle/dynamic_filter", dynamic_filter_oracle_suite(seed)));
    suites.push(settle("oracle/constant_guidance", constant_guidance_suite(seed)));
    suites.push(settle("contract/affinity", affinity_contract_suite(seed, 100)));
    suites.push(settle("contract/memory", memory_contract_suite(seed)));
    suites.push(settle("invariant/pad_tokens", pad_invariance_suite(seed)));
    suites.push(settle("invariant/clip", clip_suite(seed)));
    suites.push(settle("invariant/determinism", determinism_suite(seed)));
    let failures: Vec<String> = suites.iter().filter(|s| !s.passed).map(|s| s.name.clone()).collect();
    Ok(CheckReport {
        passed: failures.is_empty(),
        seed,
        injected_fault: opts.fault.map(OpKind::name),
        suites,
        failures,
        suspect_ops: suspects.into_iter().map(OpKind::name).collect(),
    })
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// One op applied to seeded leaves.
pub struct OpCase {
    pub op: OpKind,
    pub inputs: Vec<Tensor<f64>>,
    build: Build,
}

impl OpCase {
    fn new(op: OpKind, inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> Self {
        Self {
            op,
            inputs,
            build: Box::new(build),
        }
    }

    /// Scalar probe of the op output. The probe avoids the op under test, so
    /// a broken rule fails its own case first.
    fn loss(&self, tape: &mut Tape<f64>, leaves: &[Var], seed: u64) -> Result<Var> {
        let y = (self.build)(tape, leaves)?;
        let n = tape.value(y).numel();
        if n == 1 {
            return Ok(y);
        }
        if matches!(self.op, OpKind::Reshape | OpKind::Matmul) {
            return random_projection(tape, y, seed);
        }
        let r = tape.constant(Tensor::randn([n, 1], 1.0, &mut Rng::new(seed)));
        let flat = tape.reshape(y, [1, n])?;
        tape.matmul(flat, r)
    }

    /// Ops that carry gradient in this case, probe included.
    pub fn op_set(&self, seed: u64) -> Result<BTreeSet<OpKind>> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = self.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        self.loss(&mut tape, &leaves, seed)?;
        Ok(tape.op_kinds())
    }

    pub fn gradcheck(&self, seed: u64) -> Result<GradReport> {
        let names = (0..self.inputs.len()).map(|i| format!("{}.input{i}", self.op.name())).collect();
        finite_diff_check(
            |tape, leaves| self.loss(tape, leaves, seed),
            &self.inputs,
            &GradCheckOptions {
                names,
                ..grad_options()
            },
            &mut Rng::new(seed),
        )
    }
}

/// Seeded inputs for every differentiable op.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = Rng::new(seed);
    let mut randn = |shape: &[usize]| Tensor::<f64>::randn(shape.to_vec(), 1.0, &mut rng);
    use OpKind as K;
    let away_from_zero = |t: Tensor<f64>| t.map(|v| v + 0.2 * v.signum());
    vec![
        OpCase::new(K::Add, vec![randn(&[3, 4]), randn(&[1, 4])], |t, v| t.add(v[0], v[1])),
        OpCase::new(K::Sub, vec![randn(&[3, 4]), randn(&[3, 1])], |t, v| t.sub(v[0], v[1])),
        OpCase::new(K::Mul, vec![randn(&[3, 4]), randn(&[3, 4])], |t, v| t.mul(v[0], v[1])),
        OpCase::new(K::Scale, vec![randn(&[3, 4])], |t, v| Ok(t.scale(v[0], 1.7))),
        OpCase::new(K::Matmul, vec![randn(&[3, 4]), randn(&[4, 2])], |t, v| t.matmul(v[0], v[1])),
        OpCase::new(K::Transpose, vec![randn(&[3, 4])], |t, v| t.transpose(v[0])),
        OpCase::new(K::Reshape, vec![randn(&[3, 4])], |t, v| t.reshape(v[0], [2, 6])),
        OpCase::new(K::Concat, vec![randn(&[2, 3]), randn(&[4, 3])], |t, v| t.concat(&[v[0], v[1]], 0)),
        OpCase::new(K::Slice, vec![randn(&[4, 5])], |t, v| t.slice(v[0], 1, 1, 3)),
        OpCase::new(K::Softmax, vec![randn(&[3, 4])], |t, v| {
            let mask = Mask::new([1, 4], vec![true, true, false, true])?;
            t.softmax(v[0], 1, Some(&mask))
        }),
        OpCase::new(K::L2Normalize, vec![randn(&[4, 3])], |t, v| Ok(t.l2_normalize(v[0]))),
        OpCase::new(K::LayerNorm, vec![randn(&[5, 3])], |t, v| Ok(t.layer_norm(v[0]))),
        OpCase::new(K::Conv2d, vec![randn(&[2, 6, 6]), randn(&[3, 2, 3, 3]), randn(&[3])], |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), 2, 1)
        }),
        OpCase::new(K::DynamicFilter, vec![randn(&[2, 7, 7]), randn(&[3, 3, 2, 7, 7])], |t, v| {
            t.dynamic_filter(v[0], v[1], 3)
        }),
        OpCase::new(K::Upsample2x, vec![randn(&[2, 3, 3])], |t, v| t.upsample2x(v[0])),
        OpCase::new(K::Sum, vec![randn(&[3, 4])], |t, v| t.sum(v[0], 0)),
        OpCase::new(K::Mean, vec![randn(&[3, 4])], |t, v| t.mean(v[0], 1)),
        OpCase::new(K::SumAll, vec![randn(&[3, 4])], |t, v| Ok(t.sum_all(v[0]))),
        OpCase::new(K::Relu, vec![away_from_zero(randn(&[3, 4]))], |t, v| Ok(t.relu(v[0]))),
        OpCase::new(K::Sigmoid, vec![randn(&[3, 4])], |t, v| Ok(t.sigmoid(v[0]))),
        OpCase::new(K::Embedding, vec![randn(&[5, 3])], |t, v| t.embedding(v[0], &[4, 0, 2, 4])),
        OpCase::new(K::MaskedMax, vec![randn(&[3, 5])], |t, v| t.masked_max(v[0], &[true, false, true, true, false])),
        OpCase::new(K::BceWithLogits, vec![randn(&[1, 3, 4])], |t, v| {
            let target = Tensor::from_fn([1, 3, 4], |i| ((i[1] + i[2]) % 2) as f64);
            t.bce_with_logits(v[0], &target)
        }),
    ]
}

/// One gradient suite per op, with the op sets used to attribute failures.
pub fn op_suites(seed: u64) -> (Vec<SuiteResult>, Vec<BTreeSet<OpKind>>) {
    let mut suites = Vec::new();
    let mut sets = Vec::new();
    for (i, case) in op_cases(seed).iter().enumerate() {
        let name = format!("gradient/op/{}", case.op.name());
        let probe_seed = seed.wrapping_add(i as u64);
        suites.push(settle(&name, case.gradcheck(probe_seed).map(|r| SuiteResult::gradients(&name, r))));
        sets.push(case.op_set(probe_seed).unwrap_or_default());
    }
    (suites, sets)
}

/// Ops present in every failing case and in no passing one.
fn suspect_ops(suites: &[SuiteResult], sets: &[BTreeSet<OpKind>]) -> BTreeSet<OpKind> {
    let mut failing = suites.iter().zip(sets).filter(|(s, _)| !s.passed).map(|(_, o)| o);
    let Some(first) = failing.next() else {
        return BTreeSet::new();
    };
    let common = failing.fold(first.clone(), |acc, o| acc.intersection(o).copied().collect());
    let cleared: BTreeSet<OpKind> = suites
        .iter()
        .zip(sets)
        .filter(|(s, _)| s.passed)
        .flat_map(|(_, o)| o.iter().copied())
        .collect();
    common.difference(&cleared).copied().collect()
}

fn lang(features: Var, valid: &[bool]) -> LanguageState {
    LanguageState {
        ids: vec![2; valid.len()],
        valid: valid.to_vec(),
        features,
    }
}

/// Gradient checks of the transformer block, mutual guidance, dynamic
/// filtering, the decoder, and the loss through the full model.
pub fn module_suites(seed: u64) -> Vec<SuiteResult> {
    vec![
        settle("gradient/transformer_block", transformer_gradients(seed)),
        settle("gradient/vlmg_step", vlmg_gradients(seed)),
        settle("gradient/lmdf_step", lmdf_gradients(seed)),
        settle("gradient/decode", decode_gradients(seed)),
        settle("gradient/loss_forward", model_gradients(seed)),
    ]
}

fn with_inputs(store: &ParamStore<f64>, extra: Vec<Tensor<f64>>) -> (Vec<Tensor<f64>>, Vec<String>) {
    let mut params = store.values().to_vec();
    let mut names = store.names().to_vec();
    names.extend((0..extra.len()).map(|i| format!("input{i}")));
    params.extend(extra);
    (params, names)
}

fn transformer_gradients(seed: u64) -> Result<SuiteResult> {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let block = TransformerBlock::new(&mut store, &mut rng, "block", DESK_WIDTH, 4)?;
    let (params, names) = with_inputs(&store, vec![Tensor::randn([DESK_WIDTH, 3], 1.0, &mut rng)]);
    let np = store.len();
    let report = finite_diff_check(
        |tape, leaves| {
            let mut s = Session::with_leaves(tape, &store, &leaves[..np])?;
            let y = block.forward(&mut s, leaves[np], &[true, true, false])?;
            random_projection(&mut s, y, seed)
        },
        &params,
        &GradCheckOptions {
            names,
            ..grad_options()
        },
        &mut rng,
    )?;
    Ok(SuiteResult::gradients("gradient/transformer_block", report))
}

fn vlmg_gradients(seed: u64) -> Result<SuiteResult> {
    let mut rng = Rng::new(seed.wrapping_add(1));
    let mut store = ParamStore::new();
    let vlmg = Vlmg::new(&mut store, &mut rng, "vlmg", DESK_WIDTH, DESK_WIDTH, DESK_WIDTH, 4)?;
    let extra = vec![
        Tensor::randn([DESK_WIDTH, 4, 4], 1.0, &mut rng),
        Tensor::randn([DESK_WIDTH, 3], 1.0, &mut rng),
    ];
    let (params, names) = with_inputs(&store, extra);
    let np = store.len();
    let report = finite_diff_check(
        |tape, leaves| {
            let mut s = Session::with_leaves(tape, &store, &leaves[..np])?;
            let out = vlmg.step(&mut s, leaves[np], &lang(leaves[np + 1], &[true, true, false]))?;
            let a = random_projection(&mut s, out.visual, seed)?;
            let b = random_projection(&mut s, out.language.features, seed + 1)?;
            s.add(a, b)
        },
        &params,
        &GradCheckOptions {
            names,
            ..grad_options()
        },
        &mut rng,
    )?;
    Ok(SuiteResult::gradients("gradient/vlmg_step", report))
}

fn lmdf_gradients(seed: u64) -> Result<SuiteResult> {
    let mut rng = Rng::new(seed.wrapping_add(2));
    let mut store = ParamStore::new();
    let lmdf = Lmdf::new(&mut store, &mut rng, "lmdf", DESK_WIDTH, DESK_WIDTH, 4, LmdfOptions::default())?;
    let extra = vec![
        Tensor::randn([DESK_WIDTH, 4, 4], 1.0, &mut rng),
        Tensor::randn([DESK_WIDTH, 4, 4], 1.0, &mut rng),
        Tensor::randn([DESK_WIDTH, 3], 1.0, &mut rng),
    ];
    let (params, names) = with_inputs(&store, extra);
    let np = store.len();
    let report = finite_diff_check(
        |tape, leaves| {
            let mut s = Session::with_leaves(tape, &store, &leaves[..np])?;
            let l0 = lang(leaves[np + 2], &[true, true, false]);
            let out = lmdf.step(&mut s, leaves[np], leaves[np + 1], &l0)?;
            random_projection(&mut s, out.output, seed)
        },
        &params,
        &GradCheckOptions {
            names,
            ..grad_options()
        },
        &mut rng,
    )?;
    Ok(SuiteResult::gradients("gradient/lmdf_step", report))
}

fn decode_gradients(seed: u64) -> Result<SuiteResult> {
    const INPUTS: [usize; 5] = [4, 6, DESK_WIDTH, DESK_WIDTH, DESK_WIDTH];
    let mut rng = Rng::new(seed.wrapping_add(3));
    let mut store = ParamStore::new();
    let dec = Decoder::new(&mut store, &mut rng, INPUTS, 4);
    let levels = INPUTS
        .iter()
        .enumerate()
        .map(|(i, &c)| Tensor::randn([c, 64 >> (i + 1), 64 >> (i + 1)], 1.0, &mut rng))
        .collect();
    let (params, names) = with_inputs(&store, levels);
    let np = store.len();
    let report = finite_diff_check(
        |tape, leaves| {
            let mut s = Session::with_leaves(tape, &store, &leaves[..np])?;
            let levels: [Var; 5] = leaves[np..].try_into().map_err(|_| Error::Contract("five levels".into()))?;
            let out = dec.decode(&mut s, levels)?;
            random_projection(&mut s, out, seed)
        },
        &params,
        &GradCheckOptions {
            max_coords: Some(24),
            names,
            ..grad_options()
        },
        &mut rng,
    )?;
    Ok(SuiteResult::gradients("gradient/decode", report))
}

/// Small model used by the model-level suites.
pub fn desk_config() -> ModelConfig {
    ModelConfig {
        width: DESK_WIDTH,
        heads: 2,
        max_tokens: 3,
        plan: [4, 4, 8, 8, 8],
        decoder_width: 4,
        dtype: DType::F64,
        ..ModelConfig::default()
    }
}

fn model_gradients(seed: u64) -> Result<SuiteResult> {
    let m = Model::<f64>::new(ModelConfig { seed, ..desk_config() }, Vocab::default_scene())?;
    let mut rng = Rng::new(seed.wrapping_add(4));
    let reference = Tensor::rand_uniform([3, 64, 64], 0.0, 1.0, &mut rng);
    let current = Tensor::rand_uniform([3, 64, 64], 0.0, 1.0, &mut rng);
    let target = Tensor::from_fn([1, 64, 64], |i| if i[1] > 20 && i[2] < 30 { 1.0 } else { 0.0 });
    let q = m.encode_query("the red square")?;
    let report = finite_diff_check(
        |tape, leaves| {
            let mut s = Session::with_leaves(tape, &m.store, leaves)?;
            let r = s.constant(reference.clone());
            let c = s.constant(current.clone());
            let logits = m.forward(&mut s, r, c, &q)?;
            model::loss(&mut s, logits, &target)
        },
        m.store.values(),
        &GradCheckOptions {
            max_coords: Some(2),
            names: m.store.names().to_vec(),
            ..grad_options()
        },
        &mut rng,
    )?;
    Ok(SuiteResult::gradients("gradient/loss_forward", report))
}

/// Direct evaluation of dilated position-specific filtering:
/// `y[c,i,j] = Σ_{Δ} k[Δ,c,i,j] · x[c, i+dΔy, j+dΔx]`, zero outside the map.
pub fn dynamic_filter_oracle(x: &Tensor<f64>, k: &Tensor<f64>, d: usize) -> Tensor<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    Tensor::from_fn([c, h, w], |o| {
        let mut acc = 0.0;
        for ky in 0..3 {
            for kx in 0..3 {
                let y = o[1] as isize + (ky as isize - 1) * d as isize;
                let xx = o[2] as isize + (kx as isize - 1) * d as isize;
                if y >= 0 && y < h as isize && xx >= 0 && xx < w as isize {
                    acc += k.at(&[ky, kx, o[0], o[1], o[2]]) * x.at(&[o[0], y as usize, xx as usize]);
                }
            }
        }
        acc
    })
}

/// Filtering against the loop oracle on 20 random instances per dilation.
pub fn dynamic_filter_oracle_suite(seed: u64) -> Result<SuiteResult> {
    let mut rng = Rng::new(seed.wrapping_add(5));
    let mut worst: f64 = 0.0;
    for d in [1, 3, 5] {
        for _ in 0..20 {
            let (c, h, w) = (1 + rng.below(4), 1 + rng.below(12), 1 + rng.below(12));
            let x = Tensor::<f64>::randn([c, h, w], 1.0, &mut rng);
            let k = Tensor::<f64>::randn([3, 3, c, h, w], 1.0, &mut rng);
            worst = worst.max(x.dynamic_filter(&k, d)?.max_abs_diff(&dynamic_filter_oracle(&x, &k, d)));
        }
    }
    Ok(SuiteResult::measured("oracle/dynamic_filter", worst, ORACLE_TOL, "60 instances, dilations 1, 3, 5"))
}

/// With guidance constant over positions, generated kernels are shared by
/// every pixel and filtering is a depthwise dilated convolution.
pub fn constant_guidance_suite(seed: u64) -> Result<SuiteResult> {
    const D: usize = DESK_WIDTH;
    let mut rng = Rng::new(seed.wrapping_add(6));
    let mut worst: f64 = 0.0;
    let mut instances = 0;
    for d in [1, 3, 5] {
        for _ in 0..5 {
            let mut store = ParamStore::new();
            let lmdf = Lmdf::new(&mut store, &mut rng, "lmdf", D, D, 4, LmdfOptions::default())?;
            let (h, w) = (2 + rng.below(8), 2 + rng.below(8));
            let xt = Tensor::<f64>::randn([D, h, w], 1.0, &mut rng);
            let gv = Tensor::<f64>::randn([D, 1], 1.0, &mut rng);
            let gt = Tensor::from_fn([D, h, w], |i| gv.at(&[i[0], 0]));
            let mut tape = Tape::new();
            let mut s = Session::new(&mut tape, &store);
            let x = s.constant(xt.clone());
            let g = s.constant(gt);
            let k = lmdf.kernels(&mut s, 0, g)?;
            let y = s.dynamic_filter(x, k, d)?;
            let taps = store.get(lmdf.banks[0]).matmul(&gv)?;
            let span = 2 * d + 1;
            let weight = Tensor::from_fn([D, D, span, span], |i| {
                if i[0] == i[1] && i[2] % d == 0 && i[3] % d == 0 {
                    taps.data()[((i[2] / d) * 3 + i[3] / d) * D + i[0]]
                } else {
                    0.0
                }
            });
            let reference = xt.conv2d(&weight, None, 1, d)?;
            worst = worst.max(s.value(y).max_abs_diff(&reference));
            instances += 1;
        }
    }
    Ok(SuiteResult::measured(
        "oracle/constant_guidance",
        worst,
        ORACLE_TOL,
        format!("{instances} instances against dilated depthwise convolution"),
    ))
}

/// Largest violation of: affinity slices summing to one over valid entries,
/// masked weights being exactly zero, and mapped features lying in the
/// channel-wise hull of their sources.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct AffinityViolations {
    pub slice_sum: f64,
    pub masked_weight: f64,
    pub hull: f64,
}

/// Per-row `|Σ_valid a − 1|` and the largest masked entry of a `[rows×T]`
/// weight matrix normalized along its last axis.
fn row_contract(a: &Tensor<f64>, valid: &[bool], v: &mut AffinityViolations) {
    let t = a.shape()[1];
    for row in a.data().chunks(t) {
        let mut sum = 0.0;
        for (w, &ok) in row.iter().zip(valid) {
            if ok {
                sum += w;
            } else {
                v.masked_weight = v.masked_weight.max(w.abs());
            }
        }
        v.slice_sum = v.slice_sum.max((sum - 1.0).abs());
    }
}

/// How far each column of `mapped` `[D×N]` strays outside the channel-wise
/// range of the selected columns of `source` `[D×M]`.
fn hull_excess(mapped: &Tensor<f64>, source: &Tensor<f64>, use_col: &[bool]) -> f64 {
    let d = source.shape()[0];
    let (m, n) = (source.shape()[1], mapped.numel() / d);
    let mut worst: f64 = 0.0;
    for c in 0..d {
        let cols = (0..m).filter(|&j| use_col[j]).map(|j| source.data()[c * m + j]);
        let (lo, hi) = cols.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
        for &x in &mapped.data()[c * n..(c + 1) * n] {
            worst = worst.max(lo - x).max(x - hi);
        }
    }
    worst
}

pub fn affinity_violations(seed: u64, instances: usize) -> Result<AffinityViolations> {
    const D: usize = DESK_WIDTH;
    let mut v = AffinityViolations::default();
    for i in 0..instances {
        let mut rng = Rng::new(seed).fork(i as u64 + 1);
        let mut store = ParamStore::new();
        let vlmg = Vlmg::new(&mut store, &mut rng, "vlmg", 6, D, D, 4)?;
        let lmdf = Lmdf::new(&mut store, &mut rng, "lmdf", D, D, 4, LmdfOptions::default())?;
        let (h, w, t) = (1 + rng.below(5), 1 + rng.below(5), 1 + rng.below(6));
        let k = 1 + rng.below(t);
        let valid: Vec<bool> = (0..t).map(|j| j < k).collect();
        let stage = Tensor::randn([6, h, w], 1.0, &mut rng);
        let words = Tensor::randn([D, t], 1.0, &mut rng);
        let reference = Tensor::randn([D, h, w], 1.0, &mut rng);

        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store);
        let x = s.constant(stage);
        let l0 = lang(s.constant(words), &valid);
        let out = vlmg.step(&mut s, x, &l0)?;
        let r = s.constant(reference);
        let dyn_out = lmdf.step(&mut s, r, out.visual, &l0)?;

        // pixel-normalized: every column sums to one over all pixels
        let a_vl = s.value(out.vision_affinity).transpose2d()?;
        row_contract(&a_vl, &vec![true; h * w], &mut v);
        row_contract(s.value(out.language_affinity), &valid, &mut v);
        if let Some(gw) = dyn_out.guidance_weights {
            row_contract(s.value(gw), &valid, &mut v);
        }
        let projected = s.value(out.projected).reshape([D, h * w])?;
        v.hull = v.hull.max(hull_excess(s.value(out.vision_in_language), &projected, &vec![true; h * w]));
        v.hull = v.hull.max(hull_excess(s.value(out.language_in_vision), s.value(out.language.features), &valid));
        v.hull = v.hull.max(hull_excess(s.value(dyn_out.guidance), s.value(dyn_out.current_language.features), &valid));
    }
    Ok(v)
}

pub fn affinity_contract_suite(seed: u64, instances: usize) -> Result<SuiteResult> {
    let v = affinity_violations(seed, instances)?;
    let ok = v.slice_sum <= SUM_TOL && v.masked_weight == 0.0 && v.hull <= ORACLE_TOL;
    let mut r = SuiteResult::measured(
        "contract/affinity",
        v.slice_sum,
        SUM_TOL,
        format!(
            "{instances} instances; slice sums off by ≤ {:.2e}, largest masked weight {:e}, hull excess {:.2e}",
            v.slice_sum, v.masked_weight, v.hull
        ),
    );
    r.passed = ok;
    Ok(r)
}

/// Tensors allocated by one instrumented mutual-guidance step.
#[derive(Clone, Debug, Serialize)]
pub struct MemoryProfile {
    pub pixels: usize,
    pub words: usize,
    pub allocations: usize,
    /// Largest rank-2 tensor, in entries.
    pub largest_matrix: usize,
    pub largest_matrix_shape: Vec<usize>,
    /// Largest tensor of any rank.
    pub largest_any: usize,
    /// `max(HW·T, T²)`.
    pub bound: usize,
}

/// Forward and backward of one step at `h×w` pixels and `t` words.
pub fn vlmg_memory_profile(seed: u64, width: usize, stage_channels: usize, h: usize, w: usize, t: usize) -> Result<MemoryProfile> {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::<f64>::new();
    let vlmg = Vlmg::new(&mut store, &mut rng, "vlmg", stage_channels, width, width, 4)?;
    let stage = Tensor::randn([stage_channels, h, w], 1.0, &mut rng);
    let words = Tensor::randn([width, t], 1.0, &mut rng);
    let (result, log) = trace::capture(|| -> Result<()> {
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store);
        let x = s.leaf(stage.clone());
        let l = s.leaf(words.clone());
        let out = vlmg.step(&mut s, x, &lang(l, &vec![true; t]))?;
        let a = s.sum_all(out.visual);
        let b = s.sum_all(out.language.features);
        let loss = s.add(a, b)?;
        s.backward(loss)?;
        Ok(())
    });
    result?;
    let matrix = log
        .iter()
        .filter(|s| s.len() == 2)
        .max_by_key(|s| s.iter().product::<usize>())
        .cloned()
        .unwrap_or_default();
    Ok(MemoryProfile {
        pixels: h * w,
        words: t,
        allocations: log.len(),
        largest_matrix: matrix.iter().product(),
        largest_matrix_shape: matrix,
        largest_any: log.iter().map(|s| s.iter().product::<usize>()).max().unwrap_or(0),
        bound: (h * w * t).max(t * t),
    })
}

pub fn memory_contract_suite(seed: u64) -> Result<SuiteResult> {
    let p = vlmg_memory_profile(seed, DESK_WIDTH, 32, 8, 8, 20)?;
    let full = p.pixels * p.pixels;
    let mut r = SuiteResult::measured(
        "contract/memory",
        p.largest_matrix as f64,
        p.bound as f64,
        format!(
            "{} allocations at HW={} T={}; largest matrix {:?}, largest tensor {} entries, HW×HW would be {full}",
            p.allocations, p.pixels, p.words, p.largest_matrix_shape, p.largest_any
        ),
    );
    r.passed = p.largest_matrix <= p.bound && p.largest_any < full;
    Ok(r)
}

fn desk_model(seed: u64) -> Result<Model<f64>> {
    Model::new(
        ModelConfig {
            max_tokens: 8,
            seed,
            ..desk_config()
        },
        Vocab::default_scene(),
    )
}

/// Changing the ids under padding leaves the logits bit-identical.
pub fn pad_invariance_suite(seed: u64) -> Result<SuiteResult> {
    let m = desk_model(seed)?;
    let mut rng = Rng::new(seed.wrapping_add(7));
    let frame = Tensor::rand_uniform([3, 32, 32], 0.0, 1.0, &mut rng);
    let prev = Tensor::rand_uniform([3, 32, 32], 0.0, 1.0, &mut rng);
    let q = m.encode_query("the red square")?;
    let mut noisy = q.clone();
    for (i, id) in noisy.ids.iter_mut().enumerate() {
        if !q.valid[i] {
            *id = 2 + rng.below(m.vocab().len() - 2);
        }
    }
    let a = m.predict(&prev, &frame, &q)?;
    let b = m.predict(&prev, &frame, &noisy)?;
    Ok(SuiteResult::flag(
        "invariant/pad_tokens",
        a.logits.bit_eq(&b.logits),
        "pad ids replaced by random words",
    ))
}

/// One-frame clips self-reference; clips of identical frames give identical
/// masks.
pub fn clip_suite(seed: u64) -> Result<SuiteResult> {
    let m = desk_model(seed)?;
    let frame = Tensor::rand_uniform([3, 32, 32], 0.0, 1.0, &mut Rng::new(seed.wrapping_add(8)));
    let q = m.encode_query("the blue circle")?;
    let single = m.run_clip(std::slice::from_ref(&frame), &q)?;
    let direct = m.predict(&frame, &frame, &q)?;
    let clip = m.run_clip(&[frame.clone(), frame.clone(), frame.clone()], &q)?;
    let ok = single.len() == 1
        && single[0].logits.bit_eq(&direct.logits)
        && clip.len() == 3
        && clip.iter().all(|p| p.logits.bit_eq(&clip[0].logits))
        && m.run_clip(&[], &q).is_err();
    Ok(SuiteResult::flag("invariant/clip", ok, "1-frame and 3 identical frames"))
}

/// Same seed and data give bit-identical parameters and losses over ten steps.
pub fn determinism_suite(seed: u64) -> Result<SuiteResult> {
    let spec = crate::synth::SceneSpec {
        height: 32,
        width: 32,
        ..crate::synth::single_shape_scene()
    };
    let spec = crate::synth::SceneSpec {
        shapes: vec![crate::synth::ShapeSpec {
            size: 10,
            start: [4, 8],
            velocity: [2, 0],
            ..spec.shapes[0].clone()
        }],
        ..spec
    };
    let run = || -> Result<(Vec<f64>, Vec<Tensor<f64>>)> {
        let mut m = desk_model(seed)?;
        let samples = crate::synth::generate(&spec)?;
        let pairs = train::frame_pairs(&m, &samples)?;
        let mut st = TrainState::new(&m.store, SgdConfig::default());
        let opts = TrainOptions {
            steps: 10,
            eval_every: 0,
            seed,
            ..TrainOptions::default()
        };
        let trace = train::train(&mut m, &mut st, &pairs, &opts, |_| {})?;
        Ok((trace.iter().map(|e| e.loss).collect(), m.store.values().to_vec()))
    };
    let (la, pa) = run()?;
    let (lb, pb) = run()?;
    let same_loss = la.iter().zip(&lb).all(|(a, b)| a.to_bits() == b.to_bits());
    let same_params = pa.iter().zip(&pb).all(|(a, b)| a.bit_eq(b));
    Ok(SuiteResult::flag(
        "invariant/determinism",
        same_loss && same_params,
        "two 10-step runs from one seed",
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_differentiable_op_has_a_case() {
        let covered: BTreeSet<OpKind> = op_cases(0).iter().map(|c| c.op).collect();
        let all: BTreeSet<OpKind> = OpKind::ALL.into_iter().filter(|k| *k != OpKind::Leaf).collect();
        assert_eq!(covered, all);
    }

    #[test]
    fn op_suites_pass() {
        let (suites, _) = op_suites(3);
        for s in &suites {
            assert!(s.passed, "{} {} {}", s.name, s.max_error, s.detail);
        }
    }

    #[test]
    fn each_fault_is_attributed_to_its_op() {
        for op in OpKind::ALL.into_iter().filter(|k| *k != OpKind::Leaf) {
            let _g = inject_fault(op);
            let (suites, sets) = op_suites(1);
            let suspects = suspect_ops(&suites, &sets);
            assert_eq!(suspects, BTreeSet::from([op]), "{op:?}");
        }
    }

    #[test]
    fn single_precision_is_refused() {
        let opts = CheckOptions {
            dtype: DType::F32,
            ..CheckOptions::default()
        };
        assert!(matches!(run(&opts), Err(Error::Input(_))));
    }

    #[test]
    fn oracle_suites_pass() {
        for s in [dynamic_filter_oracle_suite(1).unwrap(), constant_guidance_suite(1).unwrap()] {
            assert!(s.passed, "{} {}", s.name, s.max_error);
        }
    }

    #[test]
    fn contracts_hold() {
        let s = affinity_contract_suite(2, 20).unwrap();
        assert!(s.passed, "{}", s.detail);
        let m = memory_contract_suite(2).unwrap();
        assert!(m.passed, "{}", m.detail);
    }

    #[test]
    fn hull_excess_detects_escape() {
        let src = Tensor::from_vec([1, 2], vec![0.0, 1.0]).unwrap();
        assert_eq!(hull_excess(&Tensor::from_vec([1, 1], vec![0.5]).unwrap(), &src, &[true, true]), 0.0);
        assert_eq!(hull_excess(&Tensor::from_vec([1, 1], vec![0.5]).unwrap(), &src, &[true, false]), 0.5);
    }
}
