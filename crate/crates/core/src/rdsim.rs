//! Implicit Euler on the reduced coordinates `r = (p, q)`.
//!
//! With `h` the step, `c = 1 + αh` (mass damping), `w = c(r − r̄) − h ṙ̄`
//! and `δ = q − q̄`, the residual is `Φ(r) = J̃ᵀ a` where
//!
//! ```text
//! a = P [ M J̃ w + f_fict + h² (f_int(u) − f_ext) ],   f_fict = M (ℋ·δ) δ
//! ```
//!
//! and `P` zeroes fixed DOFs. Its Jacobian is
//!
//! ```text
//! ℋ̃ᵀa + J̃ᵀ P M [cU, cJ + (𝕊·δ)δ + ℋ·((2+c)δ − h q̇̄)] + h² J̃ᵀ P K J̃
//! ```
//!
//! where `ℋ̃ᵀa` only fills the q-block. With `α = 0` the bracket is
//! `[U, J + ΔJ]`. Without the fictitious force the `𝕊` term and the `2δ`
//! part of the `ℋ` direction disappear.

use std::io::Write;
use std::path::Path;

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::daereduce::{ReducedModel, ReducedState};
use crate::diffops::{columns_to_matrix, Differ};
use crate::elastic::{CsrMatrix, ElasticModel};
use crate::error::{Error, Result};
use crate::mcx::{MultiComplex, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Integration {
    #[default]
    ExactSum,
    Cubature,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub dt: f64,
    /// Absolute bound on `‖Φ‖` (kg·m, the residual carries a factor `h²`).
    pub newton_tol: f64,
    pub max_iters: usize,
    pub drop_fict: bool,
    pub integration: Integration,
    pub line_search: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.01,
            newton_tol: 1e-10,
            max_iters: 30,
            drop_fict: false,
            integration: Integration::ExactSum,
            line_search: true,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParameter("dt must be positive".into()));
        }
        if !(self.newton_tol > 0.0) {
            return Err(Error::InvalidParameter("newton_tol must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be positive".into()));
        }
        Ok(())
    }
}

/// How internal forces are integrated over the mesh.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum Quadrature {
    #[default]
    Exact,
    Weighted {
        elements: Vec<usize>,
        weights: Vec<f64>,
    },
}

/// Source of element weights for cubature integration. Weights are queried
/// once per step at the previous state and held during the Newton solve.
pub trait CubatureRule: Sync {
    fn quadrature(&self, r: &[f64]) -> Result<Quadrature>;
}

/// Outcome of one reduced step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub state: ReducedState,
    pub iterations: usize,
    pub residual: f64,
    /// `‖Φ‖` at each Newton iterate, starting from the initial guess.
    pub history: Vec<f64>,
}

/// The reduced integrator bound to one reduced model and one elastic model.
pub struct Simulator<'a> {
    pub rm: &'a ReducedModel,
    pub model: &'a ElasticModel,
    pub cfg: SimConfig,
    /// `P M` as a diagonal: zero on fixed DOFs.
    mass: Vec<f64>,
    free: Vec<f64>,
}

impl<'a> Simulator<'a> {
    pub fn new(rm: &'a ReducedModel, model: &'a ElasticModel, cfg: SimConfig) -> Result<Self> {
        cfg.validate()?;
        if rm.dofs() != model.dofs() {
            return Err(Error::Dimension {
                expected: model.dofs(),
                got: rm.dofs(),
                context: "reduced model size",
            });
        }
        let free: Vec<f64> = model.free_mask().iter().map(|&f| if f { 1.0 } else { 0.0 }).collect();
        let mass = model.mass.iter().zip(&free).map(|(m, f)| m * f).collect();
        Ok(Self {
            rm,
            model,
            cfg,
            mass,
            free,
        })
    }

    fn damping(&self) -> f64 {
        1.0 + self.model.material.rayleigh_alpha * self.cfg.dt
    }

    fn check_state(&self, s: &ReducedState) -> Result<()> {
        if s.r.len() != self.rm.dim() || s.rdot.len() != self.rm.dim() {
            return Err(Error::Dimension {
                expected: self.rm.dim(),
                got: s.r.len(),
                context: "reduced state",
            });
        }
        if !s.is_finite() {
            return Err(Error::NonFinite("reduced state"));
        }
        Ok(())
    }

    fn check_ext(&self, f_ext: &[f64]) -> Result<()> {
        if f_ext.len() != self.model.dofs() {
            return Err(Error::Dimension {
                expected: self.model.dofs(),
                got: f_ext.len(),
                context: "external force",
            });
        }
        Ok(())
    }

    fn internal<S: Scalar>(&self, u: &[S], quad: &Quadrature) -> Result<Vec<S>> {
        match quad {
            Quadrature::Exact => self.model.internal_force(u),
            Quadrature::Weighted { elements, weights } => self.model.weighted_internal_force(u, elements, weights),
        }
    }

    fn stiffness(&self, u: &[f64], quad: &Quadrature) -> Result<CsrMatrix> {
        match quad {
            Quadrature::Exact => self.model.stiffness(u),
            Quadrature::Weighted { elements, weights } => self.model.weighted_stiffness(u, elements, weights),
        }
    }

    /// `f_fict = M (ℋ·(q − q̄))(q − q̄)`, fixed DOFs zeroed.
    pub fn fictitious_force<S: Scalar>(&self, q: &[S], q_bar: &[f64]) -> Result<Vec<S>> {
        self.fict_with(&self.rm.differ(), q, q_bar)
    }

    fn fict_with<S: Scalar>(&self, differ: &Differ, q: &[S], q_bar: &[f64]) -> Result<Vec<S>> {
        let delta: Vec<S> = q.iter().zip(q_bar).map(|(&a, &b)| a - S::from_real(b)).collect();
        let h = differ.hvv(q, &delta)?;
        Ok(h.into_iter().zip(&self.mass).map(|(x, &m)| x.scale(m)).collect())
    }

    /// `w = c(r − r̄) − h ṙ̄`
    fn w<S: Scalar>(&self, r: &[S], prev: &ReducedState) -> Vec<S> {
        let c = self.damping();
        let h = self.cfg.dt;
        r.iter()
            .zip(&prev.r)
            .zip(&prev.rdot)
            .map(|((&x, &xb), &vb)| (x - S::from_real(xb)).scale(c) - S::from_real(h * vb))
            .collect()
    }

    fn left_contract<S: Scalar>(&self, differ: &Differ, q: &[S], a: &[S]) -> Result<Vec<S>> {
        let mut out = self.rm.basis_transpose_apply(a);
        out.extend(differ.vjp(q, a)?);
        Ok(out)
    }

    /// The reduced residual `Φ(r)`, in the scalar type of `r`.
    pub fn residual<S: Scalar>(
        &self,
        r: &[S],
        prev: &ReducedState,
        f_ext: &[f64],
        quad: &Quadrature,
    ) -> Result<Vec<S>> {
        self.check_state(prev)?;
        self.check_ext(f_ext)?;
        let (p, q) = self.rm.split(r)?;
        let n_p = self.rm.n_p();
        let w = self.w(r, prev);
        let differ = self.rm.differ();
        let d = differ.value(q)?;
        let jw = differ.jvp(q, &w[n_p..])?;
        let u: Vec<S> = self.rm.basis_apply(p).into_iter().zip(d).map(|(a, b)| a + b).collect();
        let jtw: Vec<S> = self
            .rm
            .basis_apply(&w[..n_p])
            .into_iter()
            .zip(jw)
            .map(|(a, b)| a + b)
            .collect();
        let fict = if self.cfg.drop_fict {
            None
        } else {
            Some(self.fict_with(&differ, q, &prev.r[n_p..])?)
        };
        let fint = self.internal(&u, quad)?;
        let a = self.force_vector(&jtw, fict.as_deref(), &fint, f_ext);
        self.left_contract(&differ, q, &a)
    }

    fn force_vector<S: Scalar>(&self, jtw: &[S], fict: Option<&[S]>, fint: &[S], f_ext: &[f64]) -> Vec<S> {
        let h2 = self.cfg.dt * self.cfg.dt;
        (0..jtw.len())
            .map(|i| {
                let mut a = jtw[i].scale(self.mass[i]) + (fint[i] - S::from_real(f_ext[i])).scale(h2 * self.free[i]);
                if let Some(f) = fict {
                    a += f[i];
                }
                a
            })
            .collect()
    }

    /// `ΔJ = (𝕊·δ)δ + ℋ·(3δ − h q̇̄)` as an `N × n_q` matrix.
    pub fn delta_j(&self, q: &[f64], q_bar: &[f64], qdot_bar: &[f64]) -> Result<DMatrix<f64>> {
        let h = self.cfg.dt;
        let delta: Vec<f64> = q.iter().zip(q_bar).map(|(a, b)| a - b).collect();
        let dir: Vec<f64> = delta.iter().zip(qdot_bar).map(|(d, v)| 3.0 * d - h * v).collect();
        let differ = self.rm.differ();
        let s = columns_to_matrix(&differ.svv(q, &delta)?);
        let hv = columns_to_matrix(&differ.hv(q, &dir)?);
        Ok(s + hv)
    }

    /// Residual and analytic Jacobian at `r`.
    pub fn system_jacobian(
        &self,
        r: &[f64],
        prev: &ReducedState,
        f_ext: &[f64],
        quad: &Quadrature,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.assemble(&self.rm.differ(), r, prev, f_ext, quad)
    }

    fn assemble(
        &self,
        differ: &Differ,
        r: &[f64],
        prev: &ReducedState,
        f_ext: &[f64],
        quad: &Quadrature,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.check_state(prev)?;
        self.check_ext(f_ext)?;
        let (p, q) = self.rm.split(r)?;
        let (n, n_p, n_q) = (self.rm.dofs(), self.rm.n_p(), self.rm.n_q());
        let c = self.damping();
        let h = self.cfg.dt;
        let (d, jcols) = differ.jacobian_with_value(q)?;
        let jac = columns_to_matrix(&jcols);
        let w = self.w(r, prev);
        let wq = DVector::from_column_slice(&w[n_p..]);
        let jw = &jac * &wq;
        let up = self.rm.basis_apply(p);
        let u: Vec<f64> = (0..n).map(|i| up[i] + d[i]).collect();
        let uw = self.rm.basis_apply(&w[..n_p]);
        let jtw: Vec<f64> = (0..n).map(|i| uw[i] + jw[i]).collect();
        let q_bar = &prev.r[n_p..];
        let delta: Vec<f64> = q.iter().zip(q_bar).map(|(a, b)| a - b).collect();
        let fict = if self.cfg.drop_fict {
            None
        } else {
            Some(self.fict_with(differ, q, q_bar)?)
        };
        let fint = self.internal(&u, quad)?;
        let a = self.force_vector(&jtw, fict.as_deref(), &fint, f_ext);
        let phi = DVector::from_vec(self.left_contract(differ, q, &a)?);

        // Direction of the ℋ contraction and the optional 𝕊 term.
        let hdir: Vec<f64> = (0..n_q)
            .map(|k| {
                if self.cfg.drop_fict {
                    wq[k]
                } else {
                    wq[k] + 2.0 * delta[k]
                }
            })
            .collect();
        let mut bq = jac.clone() * c + columns_to_matrix(&differ.hv(q, &hdir)?);
        if !self.cfg.drop_fict {
            bq += columns_to_matrix(&differ.svv(q, &delta)?);
        }
        let vhp = columns_to_matrix(&differ.vhp(q, &a)?);

        let mut jt = DMatrix::zeros(n, n_p + n_q);
        jt.columns_mut(0, n_p).copy_from(&self.rm.basis);
        jt.columns_mut(n_p, n_q).copy_from(&jac);
        let mut b = DMatrix::zeros(n, n_p + n_q);
        b.columns_mut(0, n_p).copy_from(&(&self.rm.basis * c));
        b.columns_mut(n_p, n_q).copy_from(&bq);
        for i in 0..n {
            b.row_mut(i).scale_mut(self.mass[i]);
        }
        let k = self.stiffness(&u, quad)?;
        let mut kj = DMatrix::zeros(n, n_p + n_q);
        for col in 0..n_p + n_q {
            let x: Vec<f64> = jt.column(col).iter().copied().collect();
            let y = k.mul_vec(&x);
            for i in 0..n {
                kj[(i, col)] = y[i] * self.free[i];
            }
        }
        let mut out = jt.transpose() * (b + kj * (h * h));
        let mut qblock = out.view_mut((n_p, n_p), (n_q, n_q));
        qblock += vhp;
        Ok((phi, out))
    }

    /// Jacobian by complex-step differentiation of [`Simulator::residual`],
    /// one column per generalized coordinate.
    pub fn jacobian_oracle(
        &self,
        r: &[f64],
        prev: &ReducedState,
        f_ext: &[f64],
        quad: &Quadrature,
    ) -> Result<DMatrix<f64>> {
        let m = self.rm.dim();
        let eps = 1e-20;
        let mut out = DMatrix::zeros(m, m);
        for j in 0..m {
            let rc: Vec<MultiComplex> = r
                .iter()
                .enumerate()
                .map(|(k, &x)| MultiComplex::new(1, &[x, if k == j { eps } else { 0.0 }]))
                .collect::<Result<_>>()?;
            let phi = self.residual(&rc, prev, f_ext, quad)?;
            for i in 0..m {
                out[(i, j)] = phi[i].part(1) / eps;
            }
        }
        Ok(out)
    }

    fn solve(&self, jac: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        let symmetric_path = self.rm.decoder.is_linear() && matches!(self.cfg.integration, Integration::ExactSum);
        if symmetric_path {
            if let Some(ch) = jac.clone().cholesky() {
                return Ok(ch.solve(rhs));
            }
        }
        jac.clone().lu().solve(rhs).ok_or(Error::Singular)
    }

    /// One implicit Euler step from `prev`.
    pub fn step(&self, prev: &ReducedState, f_ext: &[f64], rule: Option<&dyn CubatureRule>) -> Result<StepOutcome> {
        self.check_state(prev)?;
        let quad = match (self.cfg.integration, rule) {
            (Integration::ExactSum, _) => Quadrature::Exact,
            (Integration::Cubature, Some(rule)) => rule.quadrature(&prev.r)?,
            (Integration::Cubature, None) => {
                return Err(Error::InvalidParameter(
                    "cubature integration needs a cubature rule".into(),
                ))
            }
        };
        self.step_with(prev, f_ext, &quad)
    }

    /// One step with an explicit quadrature.
    pub fn step_with(&self, prev: &ReducedState, f_ext: &[f64], quad: &Quadrature) -> Result<StepOutcome> {
        let mut r = prev.r.clone();
        let mut history = Vec::new();
        for it in 0..self.cfg.max_iters {
            let (phi, jac) = self.system_jacobian(&r, prev, f_ext, quad)?;
            let norm = phi.norm();
            history.push(norm);
            if !norm.is_finite() {
                break;
            }
            if norm <= self.cfg.newton_tol {
                return Ok(self.finish(r, prev, it, norm, history));
            }
            let delta = self.solve(&jac, &(-phi))?;
            let mut t = 1.0;
            let mut halvings = 0;
            loop {
                let trial: Vec<f64> = r.iter().zip(delta.iter()).map(|(a, b)| a + t * b).collect();
                if !self.cfg.line_search {
                    r = trial;
                    break;
                }
                let tn = DVector::from_vec(self.residual(&trial, prev, f_ext, quad)?).norm();
                if tn < norm || halvings == 10 {
                    r = trial;
                    break;
                }
                t *= 0.5;
                halvings += 1;
            }
            debug!("reduced newton {it}: |Φ| = {norm:.3e}, step {t}");
        }
        let last = DVector::from_vec(self.residual(&r, prev, f_ext, quad)?).norm();
        if last <= self.cfg.newton_tol {
            history.push(last);
            return Ok(self.finish(r, prev, self.cfg.max_iters, last, history));
        }
        Err(Error::NewtonDiverged {
            iters: self.cfg.max_iters,
            residual: last,
        })
    }

    fn finish(
        &self,
        r: Vec<f64>,
        prev: &ReducedState,
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    ) -> StepOutcome {
        let dt = self.cfg.dt;
        let rdot = r.iter().zip(&prev.r).map(|(a, b)| (a - b) / dt).collect();
        StepOutcome {
            state: ReducedState { r, rdot, dt },
            iterations,
            residual,
            history,
        }
    }

    /// `‖Φ‖` including the fictitious force, whatever `drop_fict` says.
    pub fn full_residual_norm(&self, r: &[f64], prev: &ReducedState, f_ext: &[f64], quad: &Quadrature) -> Result<f64> {
        let full = Simulator {
            cfg: SimConfig {
                drop_fict: false,
                ..self.cfg
            },
            rm: self.rm,
            model: self.model,
            mass: self.mass.clone(),
            free: self.free.clone(),
        };
        Ok(DVector::from_vec(full.residual(r, prev, f_ext, quad)?).norm())
    }
}

/// Classic linear model reduction `u = B r` with the same implicit Euler
/// discretization and fixed-DOF handling.
pub struct LinearReduction<'a> {
    pub basis: DMatrix<f64>,
    pub model: &'a ElasticModel,
    pub dt: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl LinearReduction<'_> {
    pub fn step(&self, prev: &ReducedState, f_ext: &[f64]) -> Result<ReducedState> {
        let b = &self.basis;
        let (n, m) = b.shape();
        let h = self.dt;
        let c = 1.0 + self.model.material.rayleigh_alpha * h;
        let free: Vec<f64> = self
            .model
            .free_mask()
            .iter()
            .map(|&f| if f { 1.0 } else { 0.0 })
            .collect();
        let pm = DMatrix::from_fn(n, m, |i, j| self.model.mass[i] * free[i] * b[(i, j)]);
        let mr = b.transpose() * &pm;
        let rbar = DVector::from_column_slice(&prev.r);
        let vbar = DVector::from_column_slice(&prev.rdot);
        let fe = DVector::from_iterator(n, f_ext.iter().zip(&free).map(|(f, p)| f * p));
        let mut r = rbar.clone();
        for _ in 0..self.max_iters {
            let u = b * &r;
            let fint = DVector::from_vec(self.model.internal_force(u.as_slice())?);
            let fint = fint.component_mul(&DVector::from_column_slice(&free));
            let phi = &mr * ((&r - &rbar) * c - &vbar * h) + b.transpose() * (fint - &fe) * (h * h);
            if phi.norm() <= self.tol {
                let rdot = (&r - &rbar) / h;
                return Ok(ReducedState {
                    r: r.iter().copied().collect(),
                    rdot: rdot.iter().copied().collect(),
                    dt: h,
                });
            }
            let k = self.model.stiffness(u.as_slice())?;
            let mut kb = DMatrix::zeros(n, m);
            for j in 0..m {
                let y = k.mul_vec(&b.column(j).iter().copied().collect::<Vec<_>>());
                for i in 0..n {
                    kb[(i, j)] = y[i] * free[i];
                }
            }
            let jac = &mr * c + b.transpose() * kb * (h * h);
            let step = jac.lu().solve(&(-phi)).ok_or(Error::Singular)?;
            r += step;
        }
        Err(Error::NewtonDiverged {
            iters: self.max_iters,
            residual: f64::NAN,
        })
    }
}

/// One exported simulation frame.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FrameRecord {
    pub t: f64,
    pub r: Vec<f64>,
    pub residual: f64,
    pub newton_iters: usize,
}

/// Appends a frame as one JSON line.
pub fn write_frame_record(out: &mut impl Write, rec: &FrameRecord) -> Result<()> {
    serde_json::to_writer(&mut *out, rec)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn write_frame_obj(path: &Path, model: &ElasticModel, u: &[f64]) -> Result<()> {
    std::fs::write(path, model.surface_obj(u)?)?;
    Ok(())
}
