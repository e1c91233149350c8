//! Complex-step contractions of a decoder network.
//!
//! Every query perturbs the input along fresh imaginary directions and reads
//! one imaginary component of the output. The queries are generic over the
//! base scalar: when `q` already carries `k` imaginary directions, new
//! perturbations use directions `k+1, k+2, …` and the result keeps the
//! original `k`, so a residual evaluated in complex arithmetic can call
//! these operators unchanged. Total order is capped at 3.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::densenet::DenseNet;
use crate::error::{Error, Result};
use crate::mcx::{max_order, MultiComplex, Scalar, MAX_ORDER};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffConfig {
    /// Complex-step size, relative to the coordinate scale.
    pub eps: f64,
}

impl Default for DiffConfig {
    fn default() -> Self {
        Self { eps: 1e-10 }
    }
}

impl DiffConfig {
    pub fn new(eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::InvalidParameter(format!("eps must be positive, got {eps}")));
        }
        Ok(Self { eps })
    }
}

/// Decoder output and its derivative contractions at one configuration.
#[derive(Clone, Debug)]
pub struct DecoderJet {
    pub value: DVector<f64>,
    pub jac: DMatrix<f64>,
    /// `(ℋ·v)v`
    pub hvv: DVector<f64>,
    /// `ℋ·v`, one column per reduced coordinate.
    pub hv: DMatrix<f64>,
    /// `(𝕊·v)·v`
    pub svv: DMatrix<f64>,
}

/// Column-major list of columns.
pub type Columns<S> = Vec<Vec<S>>;

pub fn columns_to_matrix(cols: &[Vec<f64>]) -> DMatrix<f64> {
    let nrows = cols.first().map_or(0, Vec::len);
    DMatrix::from_fn(nrows, cols.len(), |i, j| cols[j][i])
}

/// Adds `Σ coeffs[m]·i_{base+m+1}` to a base-order value.
fn perturb(x: MultiComplex, base: usize, coeffs: &[MultiComplex]) -> Result<MultiComplex> {
    let mut z = x;
    for (m, c) in coeffs.iter().enumerate() {
        if c.max_abs() != 0.0 {
            z += *c * MultiComplex::unit(base + m + 1)?;
        }
    }
    Ok(z.with_order(base + coeffs.len())?)
}

/// The coefficient of `i_{base+1} ⋯ i_{base+m}` in `z`, as an order-`base`
/// number, divided by `scale`.
fn extract(z: &MultiComplex, base: usize, m: usize, scale: f64) -> Result<MultiComplex> {
    let hi = ((1usize << m) - 1) << base;
    let parts: Vec<f64> = (0..1usize << base)
        .map(|b| {
            if (b | hi) < z.len() {
                z.part(b | hi) / scale
            } else {
                0.0
            }
        })
        .collect();
    MultiComplex::new(base, &parts)
}

fn check_finite<S: Scalar>(v: &[S], what: &'static str) -> Result<()> {
    if v.iter().all(Scalar::is_finite) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Derivative queries against one decoder, counting network passes.
pub struct Differ<'a> {
    net: &'a DenseNet,
    cfg: DiffConfig,
    passes: AtomicUsize,
}

impl<'a> Differ<'a> {
    pub fn new(net: &'a DenseNet, cfg: DiffConfig) -> Self {
        Self {
            net,
            cfg,
            passes: AtomicUsize::new(0),
        }
    }

    pub fn net(&self) -> &DenseNet {
        self.net
    }

    pub fn config(&self) -> DiffConfig {
        self.cfg
    }

    /// Network passes issued so far (a forward+backward pair counts once).
    pub fn passes(&self) -> usize {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn reset_passes(&self) {
        self.passes.store(0, Ordering::Relaxed);
    }

    fn n_q(&self) -> usize {
        self.net.input_dim()
    }

    fn check<S>(&self, q: &[S], v: Option<&[S]>) -> Result<()> {
        let n = self.n_q();
        if q.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: q.len(),
                context: "reduced coordinates",
            });
        }
        if let Some(v) = v {
            if v.len() != n {
                return Err(Error::Dimension {
                    expected: n,
                    got: v.len(),
                    context: "direction",
                });
            }
        }
        Ok(())
    }

    /// Runs one batch of perturbed passes. `coeffs(j, k)` gives the new-direction
    /// coefficients for input `k` in pass `j`; returns the extracted top
    /// component of every output of every pass.
    fn batch<S, F>(&self, q: &[S], passes: usize, m: usize, coeffs: F) -> Result<Vec<Vec<S>>>
    where
        S: Scalar,
        F: Fn(usize, usize) -> Vec<MultiComplex> + Sync,
    {
        let base = max_order(q);
        if base + m > MAX_ORDER {
            return Err(Error::OrderOutOfRange(base + m));
        }
        let scale = self.cfg.eps.powi(m as i32);
        let inputs: Vec<Vec<MultiComplex>> = (0..passes)
            .map(|j| {
                q.iter()
                    .enumerate()
                    .map(|(k, &x)| perturb(x.to_mc().with_order(base)?, base, &coeffs(j, k)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        self.passes.fetch_add(passes, Ordering::Relaxed);
        let outs = self.net.forward_mc_batch(&inputs)?;
        let res: Vec<Vec<S>> = outs
            .iter()
            .map(|y| {
                y.iter()
                    .map(|z| extract(z, base, m, scale).map(S::from_mc))
                    .collect::<Result<Vec<S>>>()
            })
            .collect::<Result<_>>()?;
        for r in &res {
            check_finite(r, "decoder derivative")?;
        }
        Ok(res)
    }

    fn scaled(&self, v: impl Scalar) -> MultiComplex {
        v.to_mc().scale(self.cfg.eps)
    }

    /// `D(q)` in the scalar type of `q`.
    pub fn value<S: Scalar>(&self, q: &[S]) -> Result<Vec<S>> {
        self.check(q, None)?;
        Ok(self.batch(q, 1, 0, |_, _| Vec::new())?.remove(0))
    }

    /// `J·v` from one order-1 pass.
    pub fn jvp<S: Scalar>(&self, q: &[S], v: &[S]) -> Result<Vec<S>> {
        self.check(q, Some(v))?;
        Ok(self.batch(q, 1, 1, |_, k| vec![self.scaled(v[k])])?.remove(0))
    }

    /// `J` as columns, with `D(q)` read from the same passes.
    pub fn jacobian_with_value<S: Scalar>(&self, q: &[S]) -> Result<(Vec<S>, Columns<S>)> {
        self.check(q, None)?;
        let n = self.n_q();
        if n == 0 {
            return Ok((self.value(q)?, Vec::new()));
        }
        let eps = self.cfg.eps;
        let base = max_order(q);
        if base + 1 > MAX_ORDER {
            return Err(Error::OrderOutOfRange(base + 1));
        }
        let inputs: Vec<Vec<MultiComplex>> = (0..n)
            .map(|j| {
                q.iter()
                    .enumerate()
                    .map(|(k, &x)| {
                        let c = if k == j { eps } else { 0.0 };
                        perturb(x.to_mc().with_order(base)?, base, &[MultiComplex::real(c)])
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        self.passes.fetch_add(n, Ordering::Relaxed);
        let outs = self.net.forward_mc_batch(&inputs)?;
        let value: Vec<S> = outs[0]
            .iter()
            .map(|z| extract(z, base, 0, 1.0).map(S::from_mc))
            .collect::<Result<_>>()?;
        let cols: Columns<S> = outs
            .iter()
            .map(|y| {
                y.iter()
                    .map(|z| extract(z, base, 1, eps).map(S::from_mc))
                    .collect::<Result<Vec<S>>>()
            })
            .collect::<Result<_>>()?;
        check_finite(&value, "decoder value")?;
        for c in &cols {
            check_finite(c, "decoder Jacobian")?;
        }
        Ok((value, cols))
    }

    pub fn jacobian<S: Scalar>(&self, q: &[S]) -> Result<Columns<S>> {
        Ok(self.jacobian_with_value(q)?.1)
    }

    /// `(ℋ·v)v` from one order-2 pass.
    pub fn hvv<S: Scalar>(&self, q: &[S], v: &[S]) -> Result<Vec<S>> {
        self.check(q, Some(v))?;
        Ok(self
            .batch(q, 1, 2, |_, k| {
                let c = self.scaled(v[k]);
                vec![c, c]
            })?
            .remove(0))
    }

    /// `ℋ·v` as columns: column `j` is `(ℋ·eⱼ)v`.
    pub fn hv<S: Scalar>(&self, q: &[S], v: &[S]) -> Result<Columns<S>> {
        self.check(q, Some(v))?;
        let eps = self.cfg.eps;
        self.batch(q, self.n_q(), 2, |j, k| {
            let e = MultiComplex::real(if j == k { eps } else { 0.0 });
            vec![e, self.scaled(v[k])]
        })
    }

    /// `(𝕊·v)·v` as columns: column `j` is `((𝕊·eⱼ)·v)·v`.
    pub fn svv<S: Scalar>(&self, q: &[S], v: &[S]) -> Result<Columns<S>> {
        self.check(q, Some(v))?;
        let eps = self.cfg.eps;
        self.batch(q, self.n_q(), 3, |j, k| {
            let e = MultiComplex::real(if j == k { eps } else { 0.0 });
            let c = self.scaled(v[k]);
            vec![e, c, c]
        })
    }

    /// `Jᵀa` from one forward and one backward pass in the scalar type of `q`.
    pub fn vjp<S: Scalar>(&self, q: &[S], a: &[S]) -> Result<Vec<S>> {
        self.check(q, None)?;
        self.passes.fetch_add(1, Ordering::Relaxed);
        let tape = self.net.forward_tape(q)?;
        Ok(self.net.backward(&tape, a, false)?.input)
    }

    /// `ℋᵀa` as columns: pass `j` runs forward and backward with `q`
    /// perturbed along `eⱼ`, and reads the perturbed input cotangent.
    pub fn vhp<S: Scalar>(&self, q: &[S], a: &[S]) -> Result<Columns<S>> {
        self.check(q, None)?;
        let n = self.n_q();
        let eps = self.cfg.eps;
        let base = max_order(q).max(max_order(a));
        if base + 1 > MAX_ORDER {
            return Err(Error::OrderOutOfRange(base + 1));
        }
        let am: Vec<MultiComplex> = a.iter().map(|x| x.to_mc().with_order(base)).collect::<Result<_>>()?;
        self.passes.fetch_add(n, Ordering::Relaxed);
        let cols = par::map_range(n, |j| -> Result<Vec<S>> {
            let x: Vec<MultiComplex> = q
                .iter()
                .enumerate()
                .map(|(k, &v)| {
                    let c = if k == j { eps } else { 0.0 };
                    perturb(v.to_mc().with_order(base)?, base, &[MultiComplex::real(c)])
                })
                .collect::<Result<_>>()?;
            let tape = self.net.forward_tape(&x)?;
            let g = self.net.backward(&tape, &am, false)?;
            let col: Vec<S> = g
                .input
                .iter()
                .map(|z| extract(z, base, 1, eps).map(S::from_mc))
                .collect::<Result<_>>()?;
            check_finite(&col, "vector-Hessian product")?;
            Ok(col)
        });
        cols.into_iter().collect()
    }

    /// All right contractions at `q` with direction `v`, in real arithmetic.
    pub fn jet(&self, q: &[f64], v: &[f64]) -> Result<DecoderJet> {
        let (value, jac) = self.jacobian_with_value(q)?;
        Ok(DecoderJet {
            value: DVector::from_vec(value),
            jac: columns_to_matrix(&jac),
            hvv: DVector::from_vec(self.hvv(q, v)?),
            hv: columns_to_matrix(&self.hv(q, v)?),
            svv: columns_to_matrix(&self.svv(q, v)?),
        })
    }
}

/// Mixed directional derivative `∂ᵐf/∂d₁⋯∂dₘ` of a scalar function at `x`
/// for up to three directions, from one multicomplex evaluation.
pub fn directional_derivative<F>(f: F, x: &[f64], dirs: &[&[f64]], eps: f64) -> Result<f64>
where
    F: Fn(&[MultiComplex]) -> MultiComplex,
{
    let m = dirs.len();
    if m > MAX_ORDER {
        return Err(Error::OrderOutOfRange(m));
    }
    for d in dirs {
        if d.len() != x.len() {
            return Err(Error::Dimension {
                expected: x.len(),
                got: d.len(),
                context: "direction",
            });
        }
    }
    let input: Vec<MultiComplex> = x
        .iter()
        .enumerate()
        .map(|(k, &xk)| {
            let coeffs: Vec<MultiComplex> = dirs.iter().map(|d| MultiComplex::real(eps * d[k])).collect();
            perturb(MultiComplex::real(xk), 0, &coeffs)
        })
        .collect::<Result<_>>()?;
    let y = f(&input);
    let d = extract(&y, 0, m, eps.powi(m as i32))?.re();
    if d.is_finite() {
        Ok(d)
    } else {
        Err(Error::NonFinite("directional derivative"))
    }
}
