//! Exponent fitting: minimize the summed weight reconstruction error over
//! the power exponent `a`, either with a one-dimensional Nelder-Mead simplex
//! or by exhaustive grid evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::quant::{
    check_exponent, tensor_error, BitWidth, Granularity, Norm, QuantScheme, MAX_EXPONENT,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    Global,
    PerLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    NelderMead,
    Grid,
}

/// Fitted exponent: one for the whole model or one per weighted layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Exponent {
    Global(f64),
    PerLayer(Vec<f64>),
}

impl Exponent {
    /// Exponent used for weighted layer `layer`.
    pub fn for_layer(&self, layer: usize) -> f64 {
        match self {
            Exponent::Global(a) => *a,
            Exponent::PerLayer(v) => v[layer],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub mode: FitMode,
    pub solver: Solver,
    pub a_star: Exponent,
    pub epsilon_at_a_star: f64,
    pub epsilon_at_uniform: f64,
    /// Every `(a, ε)` evaluation, in order. Per-layer fits concatenate the
    /// traces of each layer.
    pub trace: Vec<(f64, f64)>,
}

/// Settings shared by both solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub bits: BitWidth,
    pub granularity: Granularity,
    pub norm: Norm,
    pub solver: Solver,
    pub nelder_mead: NelderMead,
    pub grid: GridSpec,
}

impl FitConfig {
    pub fn new(bits: BitWidth) -> Self {
        Self {
            bits,
            granularity: Granularity::per_channel(),
            norm: Norm::L2,
            solver: Solver::NelderMead,
            nelder_mead: NelderMead::default(),
            grid: GridSpec::default(),
        }
    }
}

/// Summed reconstruction error of all weighted layers at exponent `a`.
pub fn objective(model: &Model, a: f64, bits: BitWidth, gran: Granularity, p: Norm) -> Result<f64> {
    check_exponent(a)?;
    model
        .weights()
        .map(|w| tensor_error(w, QuantScheme::Power { a }, bits, gran, p))
        .sum()
}

/// One-dimensional Nelder-Mead with the standard reflection (1), expansion
/// (2), contraction (0.5) and shrink (0.5) coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMead {
    pub init_lo: f64,
    pub init_hi: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Candidate points are clamped into this interval when set.
    pub bounds: Option<(f64, f64)>,
}

impl Default for NelderMead {
    fn default() -> Self {
        Self {
            init_lo: 0.2,
            init_hi: 1.0,
            tol: 1e-4,
            max_iter: 200,
            bounds: None,
        }
    }
}

const REFLECT: f64 = 1.0;
const EXPAND: f64 = 2.0;
const CONTRACT: f64 = 0.5;
const SHRINK: f64 = 0.5;

impl NelderMead {
    /// Minimizes `f`, returning `(argmin, min)`.
    pub fn minimize<F>(&self, mut f: F) -> Result<(f64, f64)>
    where
        F: FnMut(f64) -> Result<f64>,
    {
        if !(self.init_lo < self.init_hi) {
            return Err(Error::validation(
                "init",
                format!(
                    "need init_lo < init_hi, got [{}, {}]",
                    self.init_lo, self.init_hi
                ),
            ));
        }
        let clamp = |x: f64| match self.bounds {
            Some((lo, hi)) => x.clamp(lo, hi),
            None => x,
        };
        let mut eval = |x: f64| -> Result<f64> {
            let v = f(x)?;
            if !v.is_finite() {
                return Err(Error::Solver { point: x, value: v });
            }
            Ok(v)
        };

        let (x0, x1) = (clamp(self.init_lo), clamp(self.init_hi));
        let (f0, f1) = (eval(x0)?, eval(x1)?);
        // (best, worst), ties keep the smaller point as best
        let (mut best, mut worst) = if f1 < f0 || (f1 == f0 && x1 < x0) {
            ((x1, f1), (x0, f0))
        } else {
            ((x0, f0), (x1, f1))
        };

        for _ in 0..self.max_iter {
            if (worst.0 - best.0).abs() < self.tol {
                break;
            }
            let centroid = best.0;
            let xr = clamp(centroid + REFLECT * (centroid - worst.0));
            let fr = eval(xr)?;
            if fr < best.1 {
                let xe = clamp(centroid + EXPAND * (xr - centroid));
                let fe = eval(xe)?;
                let accepted = if fe < fr { (xe, fe) } else { (xr, fr) };
                worst = best;
                best = accepted;
                continue;
            }
            // with a two-point simplex the best vertex is also the second worst
            let contracted = if fr < worst.1 {
                let xc = clamp(centroid + CONTRACT * (xr - centroid));
                let fc = eval(xc)?;
                (fc <= fr).then_some((xc, fc))
            } else {
                let xc = clamp(centroid + CONTRACT * (worst.0 - centroid));
                let fc = eval(xc)?;
                (fc < worst.1).then_some((xc, fc))
            };
            match contracted {
                Some(point) => {
                    if point.1 < best.1 {
                        worst = best;
                        best = point;
                    } else {
                        worst = point;
                    }
                }
                None => {
                    let xs = clamp(best.0 + SHRINK * (worst.0 - best.0));
                    let fs = eval(xs)?;
                    if fs < best.1 {
                        worst = best;
                        best = (xs, fs);
                    } else {
                        worst = (xs, fs);
                    }
                }
            }
        }
        Ok(best)
    }
}

/// Convenience wrapper around [`NelderMead::minimize`] for infallible `f`.
pub fn nelder_mead_1d<F>(
    f: F,
    init_lo: f64,
    init_hi: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(f64, f64)>
where
    F: Fn(f64) -> f64,
{
    NelderMead {
        init_lo,
        init_hi,
        tol,
        max_iter,
        bounds: None,
    }
    .minimize(|x| Ok(f(x)))
}

/// Evenly spaced evaluation grid `lo, lo + step, …` up to `hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            lo: 0.05,
            hi: 2.0,
            step: 0.005,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi) || !(self.step > 0.0) {
            return Err(Error::validation(
                "grid",
                format!("need lo < hi and step > 0, got {self:?}"),
            ));
        }
        Ok(())
    }

    /// `floor((hi - lo) / step) + 1`, tolerant of representation error in
    /// the quotient.
    pub fn len(&self) -> usize {
        ((self.hi - self.lo) / self.step + 1e-9).floor() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn points(&self) -> impl Iterator<Item = f64> + '_ {
        // snap to 12 decimals so grid points are the shortest decimal values
        (0..self.len()).map(move |i| {
            let x = self.lo + i as f64 * self.step;
            (x * 1e12).round() / 1e12
        })
    }
}

/// Result of an exhaustive grid evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct GridScan {
    pub a_min: f64,
    pub f_min: f64,
    pub curve: Vec<(f64, f64)>,
}

/// Evaluates `f` on every grid point; ties go to the smallest `a`.
pub fn grid_scan<F>(mut f: F, grid: GridSpec) -> Result<GridScan>
where
    F: FnMut(f64) -> Result<f64>,
{
    grid.validate()?;
    let mut curve = Vec::with_capacity(grid.len());
    for a in grid.points() {
        curve.push((a, f(a)?));
    }
    let (a_min, f_min) = curve
        .iter()
        .copied()
        .fold((f64::NAN, f64::INFINITY), |acc, (a, v)| {
            if v < acc.1 {
                (a, v)
            } else {
                acc
            }
        });
    let (a_min, f_min) = if a_min.is_nan() {
        curve[0]
    } else {
        (a_min, f_min)
    };
    Ok(GridScan {
        a_min,
        f_min,
        curve,
    })
}

/// Runs `config.solver` on `f` and keeps the better of its result and
/// `a = 1`, so the fitted error never exceeds the uniform error.
fn solve<F>(mut f: F, config: &FitConfig, trace: &mut Vec<(f64, f64)>) -> Result<(f64, f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let mut traced = |a: f64| -> Result<f64> {
        let v = f(a)?;
        trace.push((a, v));
        Ok(v)
    };
    let (a_solver, e_solver) = match config.solver {
        Solver::NelderMead => {
            let nm = NelderMead {
                bounds: Some(config.nelder_mead.bounds.unwrap_or((0.01, MAX_EXPONENT))),
                ..config.nelder_mead
            };
            nm.minimize(&mut traced)?
        }
        Solver::Grid => {
            let scan = grid_scan(&mut traced, config.grid)?;
            (scan.a_min, scan.f_min)
        }
    };
    let e_uniform = traced(1.0)?;
    if e_uniform < e_solver {
        Ok((1.0, e_uniform, e_uniform))
    } else {
        Ok((a_solver, e_solver, e_uniform))
    }
}

/// Fits one exponent shared by every weighted layer.
pub fn fit_exponent(model: &Model, config: &FitConfig) -> Result<FitReport> {
    let mut trace = Vec::new();
    let (a, eps, eps_uniform) = solve(
        |a| objective(model, a, config.bits, config.granularity, config.norm),
        config,
        &mut trace,
    )?;
    Ok(FitReport {
        mode: FitMode::Global,
        solver: config.solver,
        a_star: Exponent::Global(a),
        epsilon_at_a_star: eps,
        epsilon_at_uniform: eps_uniform,
        trace,
    })
}

/// Fits an independent exponent for each weighted layer.
///
/// Each layer also considers the global optimum as a candidate, so the
/// summed per-layer error never exceeds the global-fit error.
pub fn fit_per_layer(model: &Model, config: &FitConfig) -> Result<FitReport> {
    let global = fit_exponent(model, config)?;
    let a_global = global.a_star.for_layer(0);
    if model.weighted_count() == 1 {
        return Ok(FitReport {
            mode: FitMode::PerLayer,
            a_star: Exponent::PerLayer(vec![a_global]),
            ..global
        });
    }
    let mut trace = Vec::new();
    let mut exponents = Vec::with_capacity(model.weighted_count());
    let (mut eps, mut eps_uniform) = (0.0, 0.0);
    for w in model.weights() {
        let err = |a: f64| -> Result<f64> {
            check_exponent(a)?;
            tensor_error(
                w,
                QuantScheme::Power { a },
                config.bits,
                config.granularity,
                config.norm,
            )
        };
        let (a, e, e_uniform) = solve(err, config, &mut trace)?;
        let e_global = err(a_global)?;
        trace.push((a_global, e_global));
        if e_global < e {
            exponents.push(a_global);
            eps += e_global;
        } else {
            exponents.push(a);
            eps += e;
        }
        eps_uniform += e_uniform;
    }
    Ok(FitReport {
        mode: FitMode::PerLayer,
        solver: config.solver,
        a_star: Exponent::PerLayer(exponents),
        epsilon_at_a_star: eps,
        epsilon_at_uniform: eps_uniform,
        trace,
    })
}

/// Fits according to `mode`.
pub fn fit(model: &Model, mode: FitMode, config: &FitConfig) -> Result<FitReport> {
    match mode {
        FitMode::Global => fit_exponent(model, config),
        FitMode::PerLayer => fit_per_layer(model, config),
    }
}

/// Local minima of a sampled curve, treating differences below `plateau`
/// as flat. Used to check empirically that the error curve is unimodal.
pub fn local_minima(curve: &[(f64, f64)], plateau: f64) -> Vec<f64> {
    // collapse plateaus into single samples first
    let mut runs: Vec<(f64, f64)> = Vec::new();
    for &(a, v) in curve {
        match runs.last() {
            Some(&(_, last)) if (v - last).abs() <= plateau => {}
            _ => runs.push((a, v)),
        }
    }
    (0..runs.len())
        .filter(|&i| {
            let left = i == 0 || runs[i - 1].1 > runs[i].1;
            let right = i + 1 == runs.len() || runs[i + 1].1 > runs[i].1;
            left && right
        })
        .map(|i| runs[i].0)
        .collect()
}
