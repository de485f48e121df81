//! Five-stage convolutional feature extractor. Each stage halves the spatial
//! size: stride-2 3×3 conv → ReLU → 3×3 conv → ReLU.

use crate::autodiff::Var;
use crate::error::{shape_err, Result};
use crate::params::{ParamId, ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

pub const STAGES: usize = 5;

/// Initial value of every conv bias; keeps dead windows off the ReLU kink.
pub const BIAS_INIT: f64 = 0.01;

/// Total downsampling of the last stage.
pub const STRIDE: usize = 1 << STAGES;

#[derive(Clone, Debug)]
pub struct Stage {
    pub in_channels: usize,
    pub out_channels: usize,
    pub down_w: ParamId,
    pub down_b: ParamId,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub stages: Vec<Stage>,
}

/// Per-stage feature maps `V_1..V_5` of one frame.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

impl Backbone {
    /// Backbone whose stage `i` consumes `inputs[i]` channels and produces
    /// `plan[i]`. A plain pyramid uses `inputs = [3, plan[0], .., plan[3]]`;
    /// fused stages feed a different width onward.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, plan: [usize; STAGES], inputs: [usize; STAGES]) -> Self {
        let stages = (0..STAGES)
            .map(|i| {
                let (cin, cout) = (inputs[i], plan[i]);
                let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
                let bias = |n: usize| Tensor::full([n], T::lit(BIAS_INIT));
                let p = format!("backbone.stage{}", i + 1);
                Stage {
                    in_channels: cin,
                    out_channels: cout,
                    down_w: store.add_randn(format!("{p}.down_w"), [cout, cin, 3, 3], he(cin * 9), rng),
                    down_b: store.add(format!("{p}.down_b"), bias(cout)),
                    conv_w: store.add_randn(format!("{p}.conv_w"), [cout, cout, 3, 3], he(cout * 9), rng),
                    conv_b: store.add(format!("{p}.conv_b"), bias(cout)),
                }
            })
            .collect();
        Self { stages }
    }

    pub fn plain<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, plan: [usize; STAGES]) -> Self {
        let inputs = [3, plan[0], plan[1], plan[2], plan[3]];
        Self::new(store, rng, plan, inputs)
    }

    /// Applies stage `index` (0-based) to `x`.
    pub fn stage<T: Scalar>(&self, s: &mut Session<T>, index: usize, x: Var) -> Result<Var> {
        let st = &self.stages[index];
        let (dw, db, cw, cb) = (s.param(st.down_w), s.param(st.down_b), s.param(st.conv_w), s.param(st.conv_b));
        let h = s.conv2d(x, dw, Some(db), 2, 1)?;
        let h = s.relu(h);
        let h = s.conv2d(h, cw, Some(cb), 1, 1)?;
        Ok(s.relu(h))
    }

    pub fn extract<T: Scalar>(&self, s: &mut Session<T>, frame: Var) -> Result<FeaturePyramid> {
        check_frame(s.shape(frame))?;
        let mut levels = Vec::with_capacity(STAGES);
        let mut x = frame;
        for i in 0..STAGES {
            x = self.stage(s, i, x)?;
            levels.push(x);
        }
        Ok(FeaturePyramid { levels })
    }
}

/// A frame is `[3×H×W]` with both extents divisible by 32.
pub fn check_frame(shape: &[usize]) -> Result<()> {
    if shape.len() != 3 || shape[0] != 3 {
        return Err(shape_err("frame", format!("expected [3,H,W], got {shape:?}")));
    }
    if !shape[1].is_multiple_of(STRIDE) || !shape[2].is_multiple_of(STRIDE) {
        return Err(shape_err(
            "frame",
            format!("{}×{} is not divisible by {STRIDE}", shape[1], shape[2]),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn zero_biases(store: &mut ParamStore<f32>, bb: &Backbone) {
        for st in &bb.stages {
            for id in [st.down_b, st.conv_b] {
                let n = store.get(id).numel();
                store.set(id, Tensor::zeros([n])).unwrap();
            }
        }
    }

    const PLAN: [usize; 5] = [8, 16, 32, 32, 32];

    fn pyramid(store: &ParamStore<f32>, bb: &Backbone, frame: &Tensor<f32>) -> Vec<Tensor<f32>> {
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, store);
        let f = s.constant(frame.clone());
        let p = bb.extract(&mut s, f).unwrap();
        p.levels.iter().map(|&v| s.value(v).clone()).collect()
    }

    #[test]
    fn spatial_sizes_halve() {
        let mut store = ParamStore::new();
        let bb = Backbone::plain(&mut store, &mut Rng::new(1), PLAN);
        let frame = Tensor::rand_uniform([3, 64, 64], 0.0, 1.0, &mut Rng::new(2));
        let levels = pyramid(&store, &bb, &frame);
        let sizes: Vec<usize> = levels.iter().map(|l| l.shape()[1]).collect();
        assert_eq!(sizes, vec![32, 16, 8, 4, 2]);
        for (l, c) in levels.iter().zip(PLAN) {
            assert_eq!(l.shape()[0], c);
            assert!(l.all_finite());
        }
    }

    #[test]
    fn zero_image_gives_zero_pyramid() {
        let mut store = ParamStore::new();
        let bb = Backbone::plain(&mut store, &mut Rng::new(3), PLAN);
        zero_biases(&mut store, &bb);
        let levels = pyramid(&store, &bb, &Tensor::zeros([3, 64, 64]));
        assert!(levels.iter().all(|l| l.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn identical_frames_identical_pyramids() {
        let mut store = ParamStore::new();
        let bb = Backbone::plain(&mut store, &mut Rng::new(4), PLAN);
        let frame = Tensor::rand_uniform([3, 64, 64], 0.0, 1.0, &mut Rng::new(5));
        let copy = Tensor::from_vec([3, 64, 64], frame.data().to_vec()).unwrap();
        let a = pyramid(&store, &bb, &frame);
        let b = pyramid(&store, &bb, &copy);
        assert!(a.iter().zip(&b).all(|(x, y)| x.bit_eq(y)));
    }

    #[test]
    fn indivisible_frame_rejected() {
        let mut store = ParamStore::<f32>::new();
        let bb = Backbone::plain(&mut store, &mut Rng::new(6), PLAN);
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store);
        let f = s.constant(Tensor::zeros([3, 48, 64]));
        assert!(bb.extract(&mut s, f).is_err());
    }

    #[test]
    fn shift_by_32_moves_last_stage_by_one_cell() {
        let mut store = ParamStore::<f32>::new();
        let bb = Backbone::plain(&mut store, &mut Rng::new(7), PLAN);
        zero_biases(&mut store, &bb);
        // zero biases keep empty regions at zero, so padding matches the
        // infinite-plane extension and the whole map shifts
        let content = Tensor::<f32>::rand_uniform([3, 48, 48], 0.0, 1.0, &mut Rng::new(8));
        let place = |dx: usize| {
            Tensor::from_fn([3, 192, 192], |i| {
                let (y, x) = (i[1] as isize - 64, i[2] as isize - 48 - dx as isize);
                if (0..48).contains(&y) && (0..48).contains(&x) {
                    content.at(&[i[0], y as usize, x as usize])
                } else {
                    0.0
                }
            })
        };
        let a = pyramid(&store, &bb, &place(0));
        let b = pyramid(&store, &bb, &place(32));
        let (va, vb) = (&a[4], &b[4]);
        let (c, h, w) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w - 1 {
                    assert_eq!(va.at(&[ch, y, x]), vb.at(&[ch, y, x + 1]));
                }
            }
        }
        assert!(va.data().iter().any(|&v| v != 0.0));
    }
}
