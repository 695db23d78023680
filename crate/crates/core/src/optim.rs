//! Small general-purpose minimizers: BFGS, Nelder-Mead and Brent.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: DVector<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Converged when `|grad|_inf < grad_tol * (1 + |f|)`.
    pub grad_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            grad_tol: 1e-8,
        }
    }
}

/// Quasi-Newton minimization with an Armijo backtracking line search.
///
/// `fg` returns the value and gradient, or `None` when the point is not
/// admissible (treated as +inf by the line search).
pub fn bfgs<F>(mut fg: F, x0: &DVector<f64>, opts: &BfgsOptions) -> Minimum
where
    F: FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    let n = x0.len();
    let mut evaluations = 1;
    let Some((mut f, mut g)) = fg(x0) else {
        return Minimum {
            x: x0.clone(),
            value: f64::INFINITY,
            iterations: 0,
            evaluations,
            converged: false,
        };
    };
    let mut x = x0.clone();
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut scaled = false;
    for iter in 0..opts.max_iter {
        if g.amax() < opts.grad_tol * (1.0 + f.abs()) {
            return Minimum {
                x,
                value: f,
                iterations: iter,
                evaluations,
                converged: true,
            };
        }
        let mut dir = -(&h * &g);
        let mut slope = g.dot(&dir);
        if !(slope < 0.0) {
            h = DMatrix::identity(n, n);
            dir = -g.clone();
            slope = g.dot(&dir);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial = &x + &dir * step;
            evaluations += 1;
            if let Some((ft, gt)) = fg(&trial) {
                if ft.is_finite() && ft <= f + 1e-4 * step * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gn)) = accepted else {
            return Minimum {
                x,
                value: f,
                iterations: iter,
                evaluations,
                converged: false,
            };
        };
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if !scaled {
                h = DMatrix::identity(n, n) * (sy / y.dot(&y));
                scaled = true;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            h += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        let stalled = (f - fnew).abs() <= 1e-15 * (1.0 + f.abs()) && s.amax() <= 1e-14 * (1.0 + x.amax());
        x = xn;
        f = fnew;
        g = gn;
        if stalled {
            let converged = g.amax() < opts.grad_tol * (1.0 + f.abs()) * 1e3;
            return Minimum {
                x,
                value: f,
                iterations: iter + 1,
                evaluations,
                converged,
            };
        }
    }
    let converged = g.amax() < opts.grad_tol * (1.0 + f.abs());
    Minimum {
        x,
        value: f,
        iterations: opts.max_iter,
        evaluations,
        converged,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadOptions {
    /// Initial simplex edge per coordinate.
    pub step: Vec<f64>,
    pub max_evals: usize,
    /// Stop when the spread of simplex values is below `f_tol * (1 + |f_best|)`
    /// and every vertex is within `x_tol` of the best one.
    pub f_tol: f64,
    pub x_tol: f64,
    /// Optional box; points are projected onto it.
    pub bounds: Option<Vec<(f64, f64)>>,
}

impl NelderMeadOptions {
    pub fn new(step: Vec<f64>) -> Self {
        Self {
            step,
            max_evals: 2000,
            f_tol: 1e-12,
            x_tol: 1e-8,
            bounds: None,
        }
    }
}

fn project(x: &mut DVector<f64>, bounds: &Option<Vec<(f64, f64)>>) {
    if let Some(b) = bounds {
        for (i, (lo, hi)) in b.iter().enumerate() {
            x[i] = x[i].clamp(*lo, *hi);
        }
    }
}

/// Derivative-free simplex minimization.
pub fn nelder_mead<F>(mut f: F, x0: &DVector<f64>, opts: &NelderMeadOptions) -> Minimum
where
    F: FnMut(&DVector<f64>) -> f64,
{
    let n = x0.len();
    let mut evals = 0;
    let mut eval = |x: &DVector<f64>, evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut simplex: Vec<DVector<f64>> = Vec::with_capacity(n + 1);
    let mut start = x0.clone();
    project(&mut start, &opts.bounds);
    simplex.push(start.clone());
    for i in 0..n {
        let mut v = start.clone();
        v[i] += opts.step[i];
        project(&mut v, &opts.bounds);
        if v == start {
            v[i] -= opts.step[i];
            project(&mut v, &opts.bounds);
        }
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| eval(v, &mut evals)).collect();
    let mut iterations = 0;
    let mut converged = false;
    while evals < opts.max_evals {
        iterations += 1;
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();
        let best = values[0];
        let spread = values[n] - best;
        let size = simplex
            .iter()
            .skip(1)
            .map(|v| (v - &simplex[0]).amax())
            .fold(0.0_f64, f64::max);
        if spread <= opts.f_tol * (1.0 + best.abs()) && size <= opts.x_tol {
            converged = true;
            break;
        }
        let mut centroid = DVector::zeros(n);
        for v in simplex.iter().take(n) {
            centroid += v;
        }
        centroid /= n as f64;
        let worst = simplex[n].clone();
        let mut reflected = &centroid + (&centroid - &worst);
        project(&mut reflected, &opts.bounds);
        let fr = eval(&reflected, &mut evals);
        if fr < values[0] {
            let mut expanded = &centroid + (&centroid - &worst) * 2.0;
            project(&mut expanded, &opts.bounds);
            let fe = eval(&expanded, &mut evals);
            if fe < fr {
                simplex[n] = expanded;
                values[n] = fe;
            } else {
                simplex[n] = reflected;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = reflected;
            values[n] = fr;
        } else {
            let (mut contracted, outside) = if fr < values[n] {
                (&centroid + (&reflected - &centroid) * 0.5, true)
            } else {
                (&centroid + (&worst - &centroid) * 0.5, false)
            };
            project(&mut contracted, &opts.bounds);
            let fc = eval(&contracted, &mut evals);
            if (outside && fc <= fr) || (!outside && fc < values[n]) {
                simplex[n] = contracted;
                values[n] = fc;
            } else {
                let best = simplex[0].clone();
                for i in 1..=n {
                    let mut v = &best + (&simplex[i] - &best) * 0.5;
                    project(&mut v, &opts.bounds);
                    values[i] = eval(&v, &mut evals);
                    simplex[i] = v;
                }
            }
        }
    }
    let (bi, _) = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .unwrap_or((0, &f64::INFINITY));
    Minimum {
        x: simplex[bi].clone(),
        value: values[bi],
        iterations,
        evaluations: evals,
        converged,
    }
}

/// Brent's method (golden-section steps with parabolic interpolation) on
/// `[a, b]`. Returns `(x, f(x), evaluations)`.
pub fn brent<F>(mut f: F, a: f64, b: f64, x_tol: f64, max_iter: usize) -> (f64, f64, usize)
where
    F: FnMut(f64) -> f64,
{
    const CGOLD: f64 = 0.381_966_011_250_105_1;
    let (mut a, mut b) = (a.min(b), a.max(b));
    let mut x = a + CGOLD * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x);
    let mut evals = 1;
    let (mut fw, mut fv) = (fx, fx);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    for _ in 0..max_iter {
        let xm = 0.5 * (a + b);
        let tol1 = x_tol * x.abs() + 1e-12;
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let etemp = e;
            e = d;
            if !(p.abs() >= (0.5 * q * etemp).abs() || p <= q * (a - x) || p >= q * (b - x)) {
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if xm >= x { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { a - x } else { b - x };
            d = CGOLD * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else if d >= 0.0 {
            x + tol1
        } else {
            x - tol1
        };
        let fu = f(u);
        evals += 1;
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, fx, evals)
}

/// Vertex of the parabola through three points, if it is a minimum.
pub fn parabola_vertex(p: [(f64, f64); 3]) -> Option<f64> {
    let [(x0, y0), (x1, y1), (x2, y2)] = p;
    let denom = (x0 - x1) * (x0 - x2) * (x1 - x2);
    if denom == 0.0 {
        return None;
    }
    let a = (x2 * (y1 - y0) + x1 * (y0 - y2) + x0 * (y2 - y1)) / denom;
    let b = (x2 * x2 * (y0 - y1) + x1 * x1 * (y2 - y0) + x0 * x0 * (y1 - y2)) / denom;
    if a > 0.0 {
        Some(-b / (2.0 * a))
    } else {
        None
    }
}
