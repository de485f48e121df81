//! Moving colored shapes on a black canvas, with templated referring
//! expressions and exact masks.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Circle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    White,
}

impl Color {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Cyan => [0.0, 1.0, 1.0],
            Color::Magenta => [1.0, 0.0, 1.0],
            Color::White => [1.0, 1.0, 1.0],
        }
    }
}

fn snake<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|j| j.as_str().map(str::to_owned))
        .unwrap_or_default()
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&snake(self))
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&snake(self))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&snake(self))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub color: Color,
    /// Side of the square, or diameter of the circle.
    pub size: usize,
    /// `[dx, dy]` per frame.
    #[serde(default)]
    pub velocity: [i64; 2],
    /// Top-left corner `[x, y]` of the bounding box in frame 0.
    pub start: [i64; 2],
}

impl ShapeSpec {
    /// Top-left corner in frame `t`.
    pub fn origin(&self, t: usize) -> [i64; 2] {
        let t = t as i64;
        [self.start[0] + t * self.velocity[0], self.start[1] + t * self.velocity[1]]
    }

    pub fn covers(&self, t: usize, y: usize, x: usize) -> bool {
        let [ox, oy] = self.origin(t);
        let (x, y, s) = (x as i64, y as i64, self.size as i64);
        match self.kind {
            ShapeKind::Square => (ox..ox + s).contains(&x) && (oy..oy + s).contains(&y),
            ShapeKind::Circle => {
                // pixel centers inside the inscribed disc, in doubled coordinates
                let (cx, cy) = (2 * ox + s, 2 * oy + s);
                let (dx, dy) = (2 * x + 1 - cx, 2 * y + 1 - cy);
                dx * dx + dy * dy <= s * s
            }
        }
    }

    /// Side of the canvas holding the frame-0 bounding-box center.
    pub fn side(&self, canvas_width: usize) -> Side {
        if 2 * self.start[0] + self.size as i64 <= canvas_width as i64 {
            Side::Left
        } else {
            Side::Right
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub shapes: Vec<ShapeSpec>,
    /// Seeds the pixel noise.
    #[serde(default)]
    pub seed: u64,
    /// Standard deviation of Gaussian pixel noise, clamped into `[0, 1]`.
    #[serde(default)]
    pub noise: f64,
}

impl SceneSpec {
    pub fn parse(json: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(json)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.frames == 0 {
            return Err(Error::Scene("canvas and frame count must be positive".into()));
        }
        if self.shapes.is_empty() {
            return Err(Error::Scene("a scene needs at least one shape".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Scene(format!("noise {} is not a valid deviation", self.noise)));
        }
        for (i, sh) in self.shapes.iter().enumerate() {
            if sh.size == 0 {
                return Err(Error::Scene(format!("shape {i} has zero size")));
            }
            for t in 0..self.frames {
                let [x, y] = sh.origin(t);
                let s = sh.size as i64;
                if x < 0 || y < 0 || x + s > self.width as i64 || y + s > self.height as i64 {
                    return Err(Error::Scene(format!("shape {i} leaves the canvas in frame {t}")));
                }
            }
        }
        for (i, a) in self.shapes.iter().enumerate() {
            for b in &self.shapes[..i] {
                if a.color == b.color && a.kind == b.kind && a.side(self.width) == b.side(self.width) {
                    return Err(Error::Scene(format!("ambiguous query `{}`", self.query(i))));
                }
            }
        }
        Ok(())
    }

    /// The expression naming shape `index`.
    pub fn query(&self, index: usize) -> String {
        let s = &self.shapes[index];
        format!("the {} {} on the {}", s.color, s.kind, s.side(self.width))
    }

    /// Exact raster of shape `index` in frame `t`.
    pub fn mask(&self, index: usize, t: usize) -> BinaryMask {
        let sh = &self.shapes[index];
        BinaryMask::from_fn(self.height, self.width, |y, x| sh.covers(t, y, x))
    }

    /// `[3×H×W]` frame `t`; later shapes are painted over earlier ones.
    pub fn render<T: Scalar>(&self, t: usize, rng: &mut Rng) -> Tensor<T> {
        let (h, w) = (self.height, self.width);
        let mut px = vec![0.0f64; 3 * h * w];
        for sh in &self.shapes {
            let rgb = sh.color.rgb();
            for y in 0..h {
                for x in 0..w {
                    if sh.covers(t, y, x) {
                        for c in 0..3 {
                            px[(c * h + y) * w + x] = rgb[c];
                        }
                    }
                }
            }
        }
        if self.noise > 0.0 {
            for v in &mut px {
                *v = (*v + self.noise * rng.normal()).clamp(0.0, 1.0);
            }
        }
        Tensor::from_vec([3, h, w], px.into_iter().map(T::lit).collect()).expect("frame shape")
    }

    /// Every frame; noise draws follow frame order from `seed`.
    pub fn render_clip<T: Scalar>(&self) -> Vec<Tensor<T>> {
        let mut rng = Rng::new(self.seed);
        (0..self.frames).map(|t| self.render(t, &mut rng)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferringSample<T: Scalar> {
    pub frames: Vec<Tensor<T>>,
    pub query: String,
    pub masks: Vec<BinaryMask>,
    pub target: usize,
}

impl<T: Scalar> ReferringSample<T> {
    pub fn words(&self) -> Vec<&str> {
        self.query.split_whitespace().collect()
    }

    /// Mask of frame `t` as a `[1×H×W]` 0/1 tensor.
    pub fn target_tensor(&self, t: usize) -> Tensor<T> {
        self.masks[t].to_tensor()
    }
}

/// One sample per shape, all sharing the rendered frames.
pub fn generate<T: Scalar>(spec: &SceneSpec) -> Result<Vec<ReferringSample<T>>> {
    spec.validate()?;
    let frames = spec.render_clip::<T>();
    Ok((0..spec.shapes.len())
        .map(|i| ReferringSample {
            frames: frames.clone(),
            query: spec.query(i),
            masks: (0..spec.frames).map(|t| spec.mask(i, t)).collect(),
            target: i,
        })
        .collect())
}

/// One shape on a 64×64 canvas.
pub fn single_shape_scene() -> SceneSpec {
    SceneSpec {
        height: 64,
        width: 64,
        frames: 3,
        shapes: vec![ShapeSpec {
            kind: ShapeKind::Square,
            color: Color::Red,
            size: 24,
            velocity: [4, 0],
            start: [8, 20],
        }],
        seed: 0,
        noise: 0.0,
    }
}

/// Two red squares, one per side, 64×64. Only the side word tells the
/// queries apart.
pub fn two_square_scene() -> SceneSpec {
    let square = |color, x| ShapeSpec {
        kind: ShapeKind::Square,
        color,
        size: 16,
        velocity: [0, 2],
        start: [x, 20],
    };
    SceneSpec {
        height: 64,
        width: 64,
        frames: 3,
        shapes: vec![square(Color::Red, 6), square(Color::Red, 42)],
        seed: 0,
        noise: 0.0,
    }
}
