//! Top-down feature pyramid decoder producing a single-channel mask logit map
//! at frame resolution.

use crate::autodiff::Var;
use crate::error::{shape_err, Result};
use crate::params::{ParamId, ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

pub const LEVELS: usize = 5;

#[derive(Clone, Debug)]
pub struct Decoder {
    pub width: usize,
    /// 1×1 projections of levels 1..5 to the decoder width.
    pub laterals: Vec<(ParamId, ParamId)>,
    /// 3×3 smoothing after each merge, for levels 4 down to 1.
    pub smooth: Vec<(ParamId, ParamId)>,
    pub head: (ParamId, ParamId),
}

impl Decoder {
    /// `inputs` are the channel counts of levels 1..5 (finest first).
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, inputs: [usize; LEVELS], width: usize) -> Self {
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let laterals = inputs
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let w = store.add_randn(format!("decoder.lateral{}", i + 1), [width, c, 1, 1], (1.0 / c as f64).sqrt(), rng);
                let b = store.add_zeros(format!("decoder.lateral{}_bias", i + 1), [width]);
                (w, b)
            })
            .collect();
        let smooth = (1..LEVELS)
            .rev()
            .map(|level| {
                let w = store.add_randn(format!("decoder.smooth{level}"), [width, width, 3, 3], he(9 * width), rng);
                let b = store.add_zeros(format!("decoder.smooth{level}_bias"), [width]);
                (w, b)
            })
            .collect();
        let head = (
            store.add_randn("decoder.head", [1, width, 1, 1], (1.0 / width as f64).sqrt(), rng),
            store.add_zeros("decoder.head_bias", [1]),
        );
        Self {
            width,
            laterals,
            smooth,
            head,
        }
    }

    /// Logits `[1×H×W]` from levels 1..5, whose spatial sizes are `H/2..H/32`.
    pub fn decode<T: Scalar>(&self, s: &mut Session<T>, levels: [Var; LEVELS]) -> Result<Var> {
        for i in 0..LEVELS - 1 {
            let (fine, coarse) = (s.shape(levels[i]).to_vec(), s.shape(levels[i + 1]).to_vec());
            if fine.len() != 3 || coarse.len() != 3 || fine[1] != 2 * coarse[1] || fine[2] != 2 * coarse[2] {
                return Err(shape_err(
                    "decode",
                    format!("level {} {:?} is not twice level {} {:?}", i + 1, fine, i + 2, coarse),
                ));
            }
        }
        let mut top = self.lateral(s, LEVELS - 1, levels[LEVELS - 1])?;
        for (k, level) in (0..LEVELS - 1).rev().enumerate() {
            let up = s.upsample2x(top)?;
            let lat = self.lateral(s, level, levels[level])?;
            let merged = s.add(up, lat)?;
            let (w, b) = (s.param(self.smooth[k].0), s.param(self.smooth[k].1));
            top = s.conv2d(merged, w, Some(b), 1, 1)?;
        }
        let (w, b) = (s.param(self.head.0), s.param(self.head.1));
        let logits = s.conv2d(top, w, Some(b), 1, 0)?;
        s.upsample2x(logits)
    }

    fn lateral<T: Scalar>(&self, s: &mut Session<T>, level: usize, x: Var) -> Result<Var> {
        let (w, b) = (s.param(self.laterals[level].0), s.param(self.laterals[level].1));
        s.conv2d(x, w, Some(b), 1, 0)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for &(w, b) in self.laterals.iter().chain(&self.smooth) {
            ids.extend([w, b]);
        }
        ids.extend([self.head.0, self.head.1]);
        ids
    }
}

/// Per-pixel logits of one frame with their derived probabilities and mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPrediction<T: Scalar> {
    /// `[1×H×W]`.
    pub logits: Tensor<T>,
}

impl<T: Scalar> MaskPrediction<T> {
    pub fn new(logits: Tensor<T>) -> Self {
        Self { logits }
    }

    pub fn probabilities(&self) -> Tensor<T> {
        self.logits.sigmoid()
    }

    /// `prob ≥ 0.5`, as 0/1.
    pub fn mask(&self) -> Tensor<T> {
        let half = T::lit(0.5);
        self.probabilities().map(|p| if p >= half { T::one() } else { T::zero() })
    }

    pub fn mask_bits(&self) -> Vec<bool> {
        let half = T::lit(0.5);
        self.probabilities().data().iter().map(|&p| p >= half).collect()
    }

    pub fn height(&self) -> usize {
        self.logits.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.logits.shape()[2]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, random_projection, GradCheckOptions, Tape};

    const INPUTS: [usize; 5] = [4, 6, 8, 8, 8];

    fn pyramid(size: usize, rng: &mut Rng) -> Vec<Tensor<f64>> {
        INPUTS
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let s = size >> (i + 1);
                Tensor::randn([c, s, s], 1.0, rng)
            })
            .collect()
    }

    fn decode(store: &ParamStore<f64>, dec: &Decoder, levels: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, store);
        let vars: Vec<Var> = levels.iter().map(|l| s.constant(l.clone())).collect();
        let out = dec.decode(&mut s, vars.try_into().unwrap())?;
        Ok(s.value(out).clone())
    }

    #[test]
    fn output_matches_frame_resolution() {
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, &mut Rng::new(1), INPUTS, 8);
        let mut rng = Rng::new(2);
        for (h, w) in [(64, 64), (32, 96)] {
            let levels: Vec<Tensor<f64>> = INPUTS
                .iter()
                .enumerate()
                .map(|(i, &c)| Tensor::randn([c, h >> (i + 1), w >> (i + 1)], 1.0, &mut rng))
                .collect();
            assert_eq!(decode(&store, &dec, &levels).unwrap().shape(), &[1, h, w]);
        }
    }

    #[test]
    fn zero_inputs_give_even_odds() {
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, &mut Rng::new(3), INPUTS, 8);
        let levels: Vec<Tensor<f64>> = pyramid(64, &mut Rng::new(4)).iter().map(|l| Tensor::zeros(l.shape().to_vec())).collect();
        let logits = decode(&store, &dec, &levels).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let pred = MaskPrediction::new(logits);
        assert!(pred.probabilities().data().iter().all(|&p| p == 0.5));
        assert!(pred.mask_bits().iter().all(|&b| b));
    }

    #[test]
    fn mismatched_pyramid_rejected() {
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, &mut Rng::new(5), INPUTS, 8);
        let mut levels = pyramid(64, &mut Rng::new(6));
        levels[2] = Tensor::zeros([8, 7, 8]);
        assert!(decode(&store, &dec, &levels).is_err());
    }

    #[test]
    fn probabilities_follow_logit_order() {
        let logits = Tensor::<f64>::from_vec([1, 1, 5], vec![-3.0, -0.5, 0.0, 0.1, 4.0]).unwrap();
        let pred = MaskPrediction::new(logits);
        let p = pred.probabilities();
        assert!(p.data().windows(2).all(|w| w[0] < w[1]));
        assert!(p.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert_eq!(pred.mask().data(), &[0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn decode_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, &mut Rng::new(7), INPUTS, 4);
        let mut params: Vec<Tensor<f64>> = store.values().to_vec();
        let np = params.len();
        params.extend(pyramid(32, &mut Rng::new(8)));
        let report = finite_diff_check(
            |tape, leaves| {
                let mut s = Session::with_leaves(tape, &store, &leaves[..np])?;
                let out = dec.decode(&mut s, leaves[np..].try_into().unwrap())?;
                random_projection(&mut s, out, 9)
            },
            &params,
            &GradCheckOptions {
                max_coords: Some(24),
                ..GradCheckOptions::default()
            },
            &mut Rng::new(0),
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-5, "{:?}", report.worst());
    }
}
