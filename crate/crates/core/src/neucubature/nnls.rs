//! Lawson–Hanson active-set nonnegative least squares on the normal
//! equations. Problems here are small (a few hundred columns) and the
//! columns are normalized, so the squared conditioning is harmless.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// `min ‖Ax − b‖` subject to `x ≥ 0`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if a.nrows() != b.len() {
        return Err(Error::Dimension {
            expected: a.nrows(),
            got: b.len(),
            context: "nnls right-hand side",
        });
    }
    let g = a.transpose() * a;
    let c = a.transpose() * b;
    nnls_gram(&g, &c, None)
}

fn solve_subset(g: &DMatrix<f64>, c: &DVector<f64>, set: &[usize]) -> Result<DVector<f64>> {
    let k = set.len();
    let gs = DMatrix::from_fn(k, k, |i, j| g[(set[i], set[j])]);
    let cs = DVector::from_fn(k, |i, _| c[set[i]]);
    if let Some(ch) = gs.clone().cholesky() {
        return Ok(ch.solve(&cs));
    }
    gs.lu()
        .solve(&cs)
        .ok_or_else(|| Error::Nnls("singular passive-set system".into()))
}

/// Solves the problem given `G = AᵀA` and `c = Aᵀb`. `start`, if given,
/// must be feasible; its support seeds the passive set.
pub fn nnls_gram(g: &DMatrix<f64>, c: &DVector<f64>, start: Option<&DVector<f64>>) -> Result<DVector<f64>> {
    let n = c.len();
    if g.shape() != (n, n) {
        return Err(Error::Dimension {
            expected: n,
            got: g.nrows(),
            context: "nnls gram matrix",
        });
    }
    if g.iter().chain(c.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("nnls input"));
    }
    let mut x = match start {
        Some(s) if s.len() == n && s.iter().all(|&v| v >= 0.0) => s.clone(),
        Some(_) => return Err(Error::Nnls("infeasible starting point".into())),
        None => DVector::zeros(n),
    };
    let mut passive: Vec<bool> = x.iter().map(|&v| v > 0.0).collect();
    let scale = g.diagonal().amax().max(c.amax()).max(f64::MIN_POSITIVE);
    let tol = 1e-12 * scale * (n.max(1) as f64);
    let max_outer = 3 * n + 10;
    for _ in 0..max_outer {
        let w = c - g * &x;
        let pick = (0..n)
            .filter(|&i| !passive[i] && w[i] > tol)
            .max_by(|&a, &b| w[a].total_cmp(&w[b]));
        let Some(j) = pick else {
            return Ok(x);
        };
        passive[j] = true;
        // inner loop: restore feasibility along the segment toward z
        loop {
            let set: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
            let zs = solve_subset(g, c, &set)?;
            if zs.iter().all(|&v| v > 0.0) {
                x.fill(0.0);
                for (k, &i) in set.iter().enumerate() {
                    x[i] = zs[k];
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            for (k, &i) in set.iter().enumerate() {
                if zs[k] <= 0.0 {
                    let d = x[i] - zs[k];
                    if d > 0.0 {
                        alpha = alpha.min(x[i] / d);
                    } else {
                        alpha = 0.0;
                    }
                }
            }
            let alpha = alpha.clamp(0.0, 1.0);
            let mut z = DVector::zeros(n);
            for (k, &i) in set.iter().enumerate() {
                z[i] = zs[k];
            }
            x = &x + (z - &x) * alpha;
            for (k, &i) in set.iter().enumerate() {
                if x[i] <= 1e-14 * scale.sqrt() || (zs[k] <= 0.0 && x[i] <= 0.0) {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
            // the newly added index can leave again; guard against stalling
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    Err(Error::Nnls(format!(
        "no convergence after {max_outer} outer iterations"
    )))
}
