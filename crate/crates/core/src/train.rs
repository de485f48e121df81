//! Momentum SGD and the desk trainer over (reference, current) frame pairs.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::language::TokenIds;
use crate::metrics::{self, BinaryMask, MetricReport, SampleEval};
use crate::model::{self, Model};
use crate::params::{ParamStore, Session};
use crate::rng::Rng;
use crate::synth::{self, ReferringSample, SceneSpec};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainState<T: Scalar> {
    pub sgd: SgdConfig,
    /// One buffer per parameter, shaped like it.
    pub velocity: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(store: &ParamStore<T>, sgd: SgdConfig) -> Self {
        Self {
            sgd,
            velocity: store.values().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            step: 0,
        }
    }

    /// `v ← m·v + g + wd·p`, `p ← p − lr·v`.
    pub fn sgd_step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != store.len() || self.velocity.len() != store.len() {
            return Err(Error::Contract(format!(
                "{} gradients and {} buffers for {} parameters",
                grads.len(),
                self.velocity.len(),
                store.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            let p = &store.values()[i];
            if g.shape() != p.shape() {
                return Err(Error::DimMismatch {
                    op: "sgd_step",
                    lhs: g.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::Training {
                    what: "gradient",
                    name: store.names()[i].clone(),
                    step: self.step,
                });
            }
        }
        let (lr, m, wd) = (T::lit(self.sgd.lr), T::lit(self.sgd.momentum), T::lit(self.sgd.weight_decay));
        let mut updated = Vec::with_capacity(store.len());
        for ((p, g), v) in store.values().iter().zip(grads).zip(&mut self.velocity) {
            let vel: Vec<T> = v
                .data()
                .iter()
                .zip(g.data())
                .zip(p.data())
                .map(|((&v, &g), &p)| m * v + g + wd * p)
                .collect();
            let next: Vec<T> = p.data().iter().zip(&vel).map(|(&p, &v)| p - lr * v).collect();
            *v = Tensor::from_vec(p.shape().to_vec(), vel)?;
            updated.push(Tensor::from_vec(p.shape().to_vec(), next)?);
        }
        store.replace_all(updated)?;
        self.step += 1;
        Ok(())
    }
}

/// One supervised frame pair.
#[derive(Clone, Debug)]
pub struct Example<T: Scalar> {
    pub reference: Tensor<T>,
    pub current: Tensor<T>,
    pub target: Tensor<T>,
    pub query: TokenIds,
    /// Frame 0 of a clip is its own reference.
    pub self_reference: bool,
}

/// Every frame of every sample as a pair with its predecessor.
pub fn frame_pairs<T: Scalar>(model: &Model<T>, samples: &[ReferringSample<T>]) -> Result<Vec<Example<T>>> {
    let mut out = Vec::new();
    for s in samples {
        let query = model.encode_query(&s.query)?;
        for t in 0..s.frames.len() {
            out.push(Example {
                reference: s.frames[t.saturating_sub(1)].clone(),
                current: s.frames[t].clone(),
                target: s.target_tensor(t),
                query: query.clone(),
                self_reference: t == 0,
            });
        }
    }
    Ok(out)
}

/// Loss value and per-parameter gradients for one pair.
pub fn loss_and_grads<T: Scalar>(model: &Model<T>, ex: &Example<T>) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let mut s = Session::new(&mut tape, &model.store);
    let cur = s.constant(ex.current.clone());
    let refr = if ex.self_reference { cur } else { s.constant(ex.reference.clone()) };
    let logits = model.forward(&mut s, refr, cur, &ex.query)?;
    let loss = model::loss(&mut s, logits, &ex.target)?;
    let value = s.value(loss).item()?.to_f64().unwrap_or(f64::NAN);
    let grads = s.backward(loss)?;
    Ok((value, s.param_grads(&grads)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub steps: usize,
    pub sgd: SgdConfig,
    /// Pairs whose gradients are averaged into each update.
    pub accumulate: usize,
    /// Evaluate mean IoU every this many steps and after the last one; 0
    /// evaluates only at the end.
    pub eval_every: usize,
    /// Seeds the pair order.
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 300,
            sgd: SgdConfig::default(),
            accumulate: 1,
            eval_every: 10,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// Updates applied so far.
    pub step: usize,
    /// Mean loss of the pairs used by this update.
    pub loss: f64,
    pub mean_iou: Option<f64>,
}

/// Cycles through pairs in a fresh shuffled order each epoch.
#[derive(Clone, Debug)]
pub struct PairSampler {
    n: usize,
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl PairSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            order: Vec::new(),
            pos: 0,
            rng: Rng::new(seed),
        }
    }

    pub fn next_index(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order = (0..self.n).collect();
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Mean IoU of the thresholded predictions over `pairs`.
pub fn pair_mean_iou<T: Scalar>(model: &Model<T>, pairs: &[Example<T>]) -> Result<f64> {
    let mut total = 0.0;
    for ex in pairs {
        let pred = if ex.self_reference {
            model.predict(&ex.current, &ex.current, &ex.query)?
        } else {
            model.predict(&ex.reference, &ex.current, &ex.query)?
        };
        let (h, w) = (pred.height(), pred.width());
        let p = BinaryMask::new(h, w, pred.mask_bits())?;
        total += metrics::iou(&p, &BinaryMask::from_tensor(&ex.target)?)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Trains on `pairs` for `opts.steps` updates, reporting each trace entry to
/// `on_entry` as it is produced.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    state: &mut TrainState<T>,
    pairs: &[Example<T>],
    opts: &TrainOptions,
    mut on_entry: impl FnMut(&TraceEntry),
) -> Result<Vec<TraceEntry>> {
    if pairs.is_empty() {
        return Err(Error::Input("no training pairs".into()));
    }
    if opts.accumulate == 0 {
        return Err(Error::Input("accumulate must be at least 1".into()));
    }
    state.sgd = opts.sgd;
    let mut sampler = PairSampler::new(pairs.len(), opts.seed);
    let mut trace = Vec::with_capacity(opts.steps);
    for step in 1..=opts.steps {
        let mut sum: Option<Vec<Tensor<T>>> = None;
        let mut loss = 0.0;
        for _ in 0..opts.accumulate {
            let (l, g) = loss_and_grads(model, &pairs[sampler.next_index()])?;
            if !l.is_finite() {
                return Err(Error::Training {
                    what: "loss",
                    name: "loss".into(),
                    step: step as u64,
                });
            }
            loss += l;
            sum = Some(match sum {
                None => g,
                Some(acc) => acc.iter().zip(&g).map(|(a, b)| a.add(b)).collect::<Result<_>>()?,
            });
        }
        let mut grads = sum.expect("at least one pair");
        if opts.accumulate > 1 {
            let k = T::lit(1.0 / opts.accumulate as f64);
            grads = grads.iter().map(|g| g.scale(k)).collect();
        }
        state.sgd_step(&mut model.store, &grads)?;
        let due = step == opts.steps || (opts.eval_every > 0 && step % opts.eval_every == 0);
        let entry = TraceEntry {
            step,
            loss: loss / opts.accumulate as f64,
            mean_iou: if due { Some(pair_mean_iou(model, pairs)?) } else { None },
        };
        on_entry(&entry);
        trace.push(entry);
    }
    Ok(trace)
}

/// Clip-sequential masks for `query`, one per frame.
pub fn clip_masks<T: Scalar>(model: &Model<T>, frames: &[Tensor<T>], query: &str) -> Result<Vec<BinaryMask>> {
    model
        .run_clip(frames, &model.encode_query(query)?)?
        .iter()
        .map(|p| BinaryMask::new(p.height(), p.width(), p.mask_bits()))
        .collect()
}

/// Clip-sequential predictions for every sample, scored per frame.
pub fn evaluate<T: Scalar>(model: &Model<T>, samples: &[ReferringSample<T>]) -> Result<(MetricReport, Vec<SampleEval>)> {
    let mut evals = Vec::new();
    for s in samples {
        for (pm, gt) in clip_masks(model, &s.frames, &s.query)?.iter().zip(&s.masks) {
            evals.push(SampleEval::new(pm, gt, None)?);
        }
    }
    Ok((metrics::aggregate(&evals)?, evals))
}

/// A model trained from its initialization on one synthetic scene.
pub struct OverfitRun<T: Scalar> {
    pub model: Model<T>,
    pub samples: Vec<ReferringSample<T>>,
    pub trace: Vec<TraceEntry>,
}

impl<T: Scalar> OverfitRun<T> {
    /// Mean IoU over all training pairs after the last step.
    pub fn final_mean_iou(&self) -> f64 {
        self.trace.last().and_then(|e| e.mean_iou).unwrap_or(f64::NAN)
    }
}

pub fn overfit<T: Scalar>(
    model: Model<T>,
    scene: &SceneSpec,
    opts: &TrainOptions,
    on_entry: impl FnMut(&TraceEntry),
) -> Result<OverfitRun<T>> {
    let mut model = model;
    let samples = synth::generate::<T>(scene)?;
    let pairs = frame_pairs(&model, &samples)?;
    let mut state = TrainState::new(&model.store, opts.sgd);
    let trace = train(&mut model, &mut state, &pairs, opts, on_entry)?;
    Ok(OverfitRun { model, samples, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::language::Vocab;
    use crate::model::ModelConfig;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("a", Tensor::from_vec([2], vec![1.0, -2.0]).unwrap());
        s.add("b", Tensor::from_vec([1], vec![0.5]).unwrap());
        s
    }

    fn grads() -> Vec<Tensor<f64>> {
        vec![
            Tensor::from_vec([2], vec![0.25, 4.0]).unwrap(),
            Tensor::from_vec([1], vec![-1.0]).unwrap(),
        ]
    }

    #[test]
    fn zero_lr_freezes_parameters() {
        let mut s = store();
        let before = s.values().to_vec();
        let mut st = TrainState::new(&s, SgdConfig { lr: 0.0, ..SgdConfig::default() });
        st.sgd_step(&mut s, &grads()).unwrap();
        assert!(s.values().iter().zip(&before).all(|(a, b)| a.bit_eq(b)));
        assert_eq!(st.step, 1);
    }

    #[test]
    fn plain_gradient_descent_without_momentum_or_decay() {
        let mut s = store();
        let sgd = SgdConfig {
            lr: 0.5,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let mut st = TrainState::new(&s, sgd);
        st.sgd_step(&mut s, &grads()).unwrap();
        assert_eq!(s.values()[0].data(), &[1.0 - 0.125, -2.0 - 2.0]);
        assert_eq!(s.values()[1].data(), &[1.0]);
    }

    #[test]
    fn momentum_and_decay_follow_the_update_rule() {
        let mut s = store();
        let sgd = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.01,
        };
        let mut st = TrainState::new(&s, sgd);
        let (mut p, mut v) = (1.0f64, 0.0f64);
        for _ in 0..3 {
            st.sgd_step(&mut s, &grads()).unwrap();
            v = 0.9 * v + 0.25 + 0.01 * p;
            p -= 0.1 * v;
        }
        assert_eq!(s.values()[0].data()[0], p);
        assert_eq!(st.velocity[0].data()[0], v);
    }

    #[test]
    fn defaults() {
        let d = SgdConfig::default();
        assert_eq!((d.lr, d.momentum, d.weight_decay), (1e-3, 0.9, 5e-4));
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut s = store();
        let mut st = TrainState::new(&s, SgdConfig::default());
        let mut g = grads();
        g[1] = Tensor::from_vec([1], vec![f64::NAN]).unwrap();
        match st.sgd_step(&mut s, &g) {
            Err(Error::Training { name, .. }) => assert_eq!(name, "b"),
            other => panic!("{other:?}"),
        }
        assert!(st.sgd_step(&mut s, &grads()[..1]).is_err());
    }

    #[test]
    fn sampler_visits_every_pair_each_epoch() {
        let mut s = PairSampler::new(5, 1);
        for _ in 0..3 {
            let mut seen: Vec<usize> = (0..5).map(|_| s.next_index()).collect();
            seen.sort();
            assert_eq!(seen, [0, 1, 2, 3, 4]);
        }
    }

    fn tiny() -> (Model<f32>, Vec<Example<f32>>) {
        let cfg = ModelConfig {
            width: 8,
            heads: 2,
            max_tokens: 8,
            plan: [4, 4, 8, 8, 8],
            decoder_width: 4,
            ..ModelConfig::default()
        };
        let m = Model::new(cfg, Vocab::default_scene()).unwrap();
        let mut spec = synth::single_shape_scene();
        spec.frames = 2;
        let samples = synth::generate(&spec).unwrap();
        let pairs = frame_pairs(&m, &samples).unwrap();
        (m, pairs)
    }

    #[test]
    fn loss_trace_is_deterministic() {
        let run = || {
            let (mut m, pairs) = tiny();
            let mut st = TrainState::new(&m.store, SgdConfig::default());
            let opts = TrainOptions {
                steps: 10,
                eval_every: 0,
                ..TrainOptions::default()
            };
            let trace = train(&mut m, &mut st, &pairs, &opts, |_| {}).unwrap();
            (trace, m.store.values().to_vec())
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert!(pa.iter().zip(&pb).all(|(x, y)| x.bit_eq(y)));
        assert_eq!(a.iter().filter(|e| e.mean_iou.is_some()).count(), 1);
    }

    #[test]
    fn frozen_training_keeps_loss_constant() {
        let (mut m, pairs) = tiny();
        let mut st = TrainState::new(&m.store, SgdConfig::default());
        let opts = TrainOptions {
            steps: 4,
            eval_every: 0,
            sgd: SgdConfig { lr: 0.0, ..SgdConfig::default() },
            accumulate: 2,
            seed: 0,
        };
        let trace = train(&mut m, &mut st, &pairs, &opts, |_| {}).unwrap();
        // each step averages both pairs in some order
        let first = trace[0].loss;
        assert!(trace.iter().all(|e| (e.loss - first).abs() < 1e-6));
    }

    #[test]
    fn training_lowers_loss() {
        let (mut m, pairs) = tiny();
        let mut st = TrainState::new(&m.store, SgdConfig { lr: 0.01, ..SgdConfig::default() });
        let opts = TrainOptions {
            steps: 30,
            eval_every: 0,
            sgd: SgdConfig { lr: 0.01, ..SgdConfig::default() },
            ..TrainOptions::default()
        };
        let trace = train(&mut m, &mut st, &pairs, &opts, |_| {}).unwrap();
        assert!(trace.last().unwrap().loss < trace[0].loss);
    }

    #[test]
    fn evaluation_scores_every_frame() {
        let (m, _) = tiny();
        let samples = synth::generate::<f32>(&synth::two_square_scene()).unwrap();
        let (report, evals) = evaluate(&m, &samples).unwrap();
        assert_eq!(evals.len(), 6);
        assert!((0.0..=1.0).contains(&report.mean_iou));
    }
}
