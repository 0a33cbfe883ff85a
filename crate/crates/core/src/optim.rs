//! Derivative-free local minimizers.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadOptions {
    /// Per-coordinate offset of the initial simplex vertices.
    pub initial_step: Vec<f64>,
    /// Stop once every vertex is within this distance of the best one...
    pub x_tol: f64,
    /// ...and the objective spread across the simplex is below this.
    pub f_tol: f64,
    pub max_evals: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub evaluations: usize,
    pub converged: bool,
    /// Best objective each time it improved, starting with the initial point.
    pub trace: Vec<f64>,
}

/// Standard Nelder–Mead (reflection 1, expansion 2, contraction ½, shrink ½).
/// Non-finite objective values are treated as `+∞`. The returned point is
/// never worse than `x0`.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    opts: &NelderMeadOptions,
) -> Result<NelderMeadResult> {
    let n = x0.len();
    if n == 0 || opts.initial_step.len() != n {
        return Err(Error::invalid(
            "simplex step must match the parameter count",
        ));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInit);
    }
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let f0 = eval(x0, &mut evals);
    if !f0.is_finite() {
        return Err(Error::InvalidInit);
    }
    let mut simplex: Vec<(Vec<f64>, f64)> = vec![(x0.to_vec(), f0)];
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += opts.initial_step[i];
        let v = eval(&x, &mut evals);
        simplex.push((x, v));
    }
    let mut trace = vec![f0];
    let mut converged = false;
    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        if best < *trace.last().expect("seeded with f0") {
            trace.push(best);
        }
        let diameter = simplex[1..]
            .iter()
            .map(|(x, _)| {
                x.iter()
                    .zip(&simplex[0].0)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max);
        let spread = simplex[n].1 - best;
        if diameter < opts.x_tol && spread < opts.f_tol {
            converged = true;
            break;
        }
        if evals >= opts.max_evals {
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|(x, _)| x[j]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64, worst: &[f64]| -> Vec<f64> {
            centroid
                .iter()
                .zip(worst)
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };
        let worst = simplex[n].0.clone();
        let fw = simplex[n].1;
        let second = simplex[n - 1].1;
        let xr = along(1.0, &worst);
        let fr = eval(&xr, &mut evals);
        if fr < best {
            let xe = along(2.0, &worst);
            let fe = eval(&xe, &mut evals);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < second {
            simplex[n] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < fw {
            let xc = along(0.5, &worst);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        } else {
            let xc = along(-0.5, &worst);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        };
        if fc < fw.min(fr) {
            simplex[n] = (xc, fc);
            continue;
        }
        let x_best = simplex[0].0.clone();
        for vertex in simplex.iter_mut().skip(1) {
            let x: Vec<f64> = vertex
                .0
                .iter()
                .zip(&x_best)
                .map(|(v, b)| b + 0.5 * (v - b))
                .collect();
            let v = eval(&x, &mut evals);
            *vertex = (x, v);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, fx) = simplex.swap_remove(0);
    Ok(NelderMeadResult {
        x,
        f: fx,
        evaluations: evals,
        converged,
        trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarMinimum {
    pub x: f64,
    pub f: f64,
    pub evaluations: usize,
}

/// Golden-section search on `[lower, upper]`, stopping when the bracket is
/// narrower than `tol` or after `max_iter` reductions. Returns the best point
/// evaluated.
pub fn golden_section<F: FnMut(f64) -> Result<f64>>(
    mut f: F,
    lower: f64,
    upper: f64,
    tol: f64,
    max_iter: usize,
) -> Result<ScalarMinimum> {
    if !(lower < upper) || !lower.is_finite() || !upper.is_finite() {
        return Err(Error::invalid(
            "golden-section bracket must satisfy lower < upper",
        ));
    }
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lower, upper);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    let mut evals = 2;
    let mut best = if fd < fc { (d, fd) } else { (c, fc) };
    for _ in 0..max_iter {
        if b - a < tol {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c)?;
            evals += 1;
            if fc < best.1 {
                best = (c, fc);
            }
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d)?;
            evals += 1;
            if fd < best.1 {
                best = (d, fd);
            }
        }
    }
    Ok(ScalarMinimum {
        x: best.0,
        f: best.1,
        evaluations: evals,
    })
}
