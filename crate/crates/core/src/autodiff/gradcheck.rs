use serde::Serialize;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub step: f64,
    /// Combine the differences at `h` and `h/2` as `(4·D(h/2) − D(h)) / 3`,
    /// cancelling the `h²` truncation term so a larger, less noise-prone
    /// step can be used.
    pub extrapolate: bool,
    /// Coordinates checked per parameter; larger tensors are subsampled with
    /// the seeded selector. `None` checks every coordinate.
    pub max_coords: Option<usize>,
    /// Parameter names for the report; defaults to `p0`, `p1`, ...
    pub names: Vec<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            extrapolate: false,
            max_coords: None,
            names: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamGradReport {
    pub name: String,
    pub max_rel_err: f64,
    pub argmax: Vec<usize>,
    pub analytic: f64,
    pub numeric: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates whose probes landed on a different smooth piece than the
    /// base point (a ReLU sign flip, a new max winner, a norm floor) and so
    /// have no central difference to compare against.
    pub skipped: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub params: Vec<ParamGradReport>,
}

impl GradReport {
    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.params.iter().map(|p| p.skipped).sum()
    }

    pub fn worst(&self) -> Option<&ParamGradReport> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of `f` against central differences
/// `(f(p+h) − f(p−h)) / 2h`, coordinate by coordinate.
///
/// A coordinate whose probes change any branch taken by a non-smooth op is
/// counted in `skipped` rather than compared.
///
/// `f` receives a fresh tape and one leaf per entry of `params` and must
/// return a one-element loss; it has to be deterministic.
pub fn finite_diff_check<F>(
    f: F,
    params: &[Tensor<f64>],
    opts: &GradCheckOptions,
    rng: &mut Rng,
) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let loss = f(&mut tape, &leaves)?;
        Ok((tape, leaves, loss))
    };

    let (tape, leaves, loss) = eval(params)?;
    let grads = tape.backward(loss)?;
    let base = tape.branch_fingerprint();
    drop(tape);

    let h = opts.step;
    let mut reports = Vec::with_capacity(params.len());
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.get(leaves[pi]);
        let coords = match opts.max_coords {
            Some(k) => rng.choose_indices(p.numel(), k),
            None => (0..p.numel()).collect(),
        };
        let mut worst = ParamGradReport {
            name: opts.names.get(pi).cloned().unwrap_or_else(|| format!("p{pi}")),
            max_rel_err: 0.0,
            argmax: Vec::new(),
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
            skipped: 0,
        };
        let mut values = params.to_vec();
        for &c in &coords {
            let x = p.data()[c];
            let probe = |values: &mut Vec<Tensor<f64>>, v: f64| -> Result<(f64, u64)> {
                values[pi] = p.with_value_at(c, v);
                let (tape, _, loss) = eval(values)?;
                let out = tape.value(loss).item()?;
                if !out.is_finite() {
                    return Err(Error::Evaluation {
                        param: pi,
                        coordinate: unravel(c, p.shape()),
                    });
                }
                Ok((out, tape.branch_fingerprint()))
            };
            let steps: &[f64] = if opts.extrapolate { &[h, h / 2.0] } else { &[h] };
            let mut diffs = Vec::with_capacity(2);
            let mut straddles = false;
            for &step in steps {
                let (plus, fp_plus) = probe(&mut values, x + step)?;
                let (minus, fp_minus) = probe(&mut values, x - step)?;
                straddles |= fp_plus != base || fp_minus != base;
                diffs.push((plus - minus) / (2.0 * step));
            }
            values[pi] = p.clone();
            if straddles {
                worst.skipped += 1;
                continue;
            }
            worst.checked += 1;
            let numeric = match diffs[..] {
                [coarse, fine] => (4.0 * fine - coarse) / 3.0,
                _ => diffs[0],
            };
            let a = analytic.data()[c];
            let err = rel_error(a, numeric);
            if err >= worst.max_rel_err || worst.argmax.is_empty() {
                worst.max_rel_err = err;
                worst.argmax = unravel(c, p.shape());
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        reports.push(worst);
    }
    Ok(GradReport {
        max_rel_err: reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max),
        params: reports,
    })
}

/// `Σ x ⊙ R` for a fixed standard-normal `R` drawn from `seed`: a scalar
/// probe of `x` whose magnitude stays small next to `Σ x²`, which keeps the
/// rounding error of central differences low.
pub fn random_projection(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let r = Tensor::randn(tape.shape(x).to_vec(), 1.0, &mut Rng::new(seed));
    let r = tape.constant(r);
    let y = tape.mul(x, r)?;
    Ok(tape.sum_all(y))
}

fn unravel(mut offset: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for ax in (0..shape.len()).rev() {
        idx[ax] = offset % shape[ax];
        offset /= shape[ax];
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn extrapolation_cancels_cubic_truncation() {
        // D(h) of Σx³ is 3x² + h² per coordinate; the combination removes h²
        let x = Tensor::<f64>::from_vec([3], vec![0.5, -1.0, 2.0]).unwrap();
        let cube = |t: &mut Tape<f64>, v: &[Var]| {
            let sq = t.mul(v[0], v[0])?;
            let c = t.mul(sq, v[0])?;
            Ok(t.sum_all(c))
        };
        let opts = |extrapolate| GradCheckOptions {
            step: 1e-2,
            extrapolate,
            ..GradCheckOptions::default()
        };
        let plain = finite_diff_check(cube, std::slice::from_ref(&x), &opts(false), &mut Rng::new(0)).unwrap();
        let rich = finite_diff_check(cube, &[x], &opts(true), &mut Rng::new(0)).unwrap();
        assert!(plain.max_rel_err > 1e-5, "{plain:?}");
        assert!(rich.max_rel_err < 1e-10, "{rich:?}");
    }

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::<f64>::randn([3, 4], 1.0, &mut Rng::new(1));
        let report = finite_diff_check(
            |t, v| Ok(t.sum_all(v[0])),
            &[x],
            &GradCheckOptions::default(),
            &mut Rng::new(0),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-10, "{report:?}");
    }

    #[test]
    fn softmax_sum_of_squares() {
        let x = Tensor::<f64>::randn([5], 1.0, &mut Rng::new(2));
        let report = finite_diff_check(
            |t, v| {
                let s = t.softmax(v[0], 0, None)?;
                let sq = t.mul(s, s)?;
                Ok(t.sum_all(sq))
            },
            &[x],
            &GradCheckOptions::default(),
            &mut Rng::new(0),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "{report:?}");
    }

    #[test]
    fn nan_reports_coordinate() {
        let x = Tensor::<f64>::from_vec([2], vec![1.0, 0.0]).unwrap();
        let err = finite_diff_check(
            |t, v| {
                // 0 · ∞ at the perturbed point
                let big = t.constant(Tensor::full([2], f64::MAX));
                let y = t.mul(v[0], big)?;
                let y = t.scale(y, 10.0);
                let s = t.sub(y, y)?;
                Ok(t.sum_all(s))
            },
            &[x],
            &GradCheckOptions::default(),
            &mut Rng::new(0),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Evaluation { param: 0, .. }), "{err}");
    }

    #[test]
    fn coordinates_straddling_a_kink_are_skipped() {
        let x = Tensor::<f64>::from_vec([3], vec![1e-7, 0.5, -0.5]).unwrap();
        let report = finite_diff_check(
            |t, v| {
                let r = t.relu(v[0]);
                Ok(t.sum_all(r))
            },
            &[x],
            &GradCheckOptions::default(),
            &mut Rng::new(0),
        )
        .unwrap();
        assert_eq!((report.checked(), report.skipped()), (2, 1));
        assert!(report.max_rel_err < 1e-10, "{report:?}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert!((rel_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
        assert!((rel_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
