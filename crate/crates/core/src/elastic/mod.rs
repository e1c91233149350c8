//! Linear-tetrahedron StVK elasticity with lumped mass, Rayleigh damping,
//! and a fullspace implicit Euler integrator.

mod mesh;
mod sparse;

pub use mesh::{TetMesh, Vec3};
pub use sparse::{dense_solve, pcg, CgReport, CsrMatrix};

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcx::Scalar;
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Material {
    /// Young's modulus (Pa).
    pub young: f64,
    pub poisson: f64,
    /// kg/m³
    pub density: f64,
    /// Mass-proportional damping (1/s).
    pub rayleigh_alpha: f64,
    /// Stiffness-proportional damping (s).
    pub rayleigh_beta: f64,
}

impl Default for Material {
    fn default() -> Self {
        Self {
            young: 1e5,
            poisson: 0.4,
            density: 1000.0,
            rayleigh_alpha: 0.0,
            rayleigh_beta: 0.0,
        }
    }
}

impl Material {
    pub fn validate(&self) -> Result<()> {
        let ok = self.young > 0.0
            && (0.0..0.5).contains(&self.poisson)
            && self.density > 0.0
            && self.rayleigh_alpha >= 0.0
            && self.rayleigh_beta >= 0.0
            && [
                self.young,
                self.poisson,
                self.density,
                self.rayleigh_alpha,
                self.rayleigh_beta,
            ]
            .iter()
            .all(|x| x.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid material {self:?}")))
        }
    }

    /// Lamé parameters `(μ, λ)`.
    pub fn lame(&self) -> (f64, f64) {
        let (e, nu) = (self.young, self.poisson);
        (e / (2.0 * (1.0 + nu)), e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu)))
    }
}

type M3<S> = [[S; 3]; 3];

/// Per-tet rest data: inverse reference edge matrix and volume.
#[derive(Clone, Copy, Debug)]
struct RestTet {
    bm: M3<f64>,
    volume: f64,
}

fn inv3(m: &M3<f64>) -> M3<f64> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let c = |a: usize, b: usize, c: usize, d: usize| m[a][b] * m[c][d] - m[a][d] * m[c][b];
    let inv = [
        [c(1, 1, 2, 2), -c(0, 1, 2, 2), c(0, 1, 1, 2)],
        [-c(1, 0, 2, 2), c(0, 0, 2, 2), -c(0, 0, 1, 2)],
        [c(1, 0, 2, 1), -c(0, 0, 2, 1), c(0, 0, 1, 1)],
    ];
    inv.map(|row| row.map(|v| v / det))
}

/// Fixed-step Newton settings for the fullspace integrator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NewtonConfig {
    pub max_iters: usize,
    /// Convergence when the free-DOF residual force falls below
    /// `rel_tol · scale + abs_tol`, with `scale` the magnitude of the
    /// inertial, internal and external forces.
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub cg_tol: f64,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            max_iters: 30,
            rel_tol: 1e-10,
            abs_tol: 1e-12,
            cg_tol: 1e-12,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub iterations: usize,
    /// Final residual force norm on free DOFs (N).
    pub residual: f64,
}

#[derive(Clone, Debug)]
pub struct ElasticModel {
    pub mesh: TetMesh,
    pub material: Material,
    /// Lumped diagonal mass per DOF (kg).
    pub mass: Vec<f64>,
    rest: Vec<RestTet>,
    fixed: Vec<bool>,
    pattern: CsrMatrix,
}

impl ElasticModel {
    pub fn new(mesh: TetMesh, material: Material) -> Result<Self> {
        material.validate()?;
        let nv = mesh.num_vertices();
        let mut mass = vec![0.0; 3 * nv];
        let mut rest = Vec::with_capacity(mesh.tets.len());
        for (e, t) in mesh.tets.iter().enumerate() {
            let x0 = mesh.vertices[t[0]];
            let mut dm = [[0.0; 3]; 3];
            for c in 0..3 {
                let xc = mesh.vertices[t[c + 1]];
                for r in 0..3 {
                    dm[r][c] = xc[r] - x0[r];
                }
            }
            let volume = mesh.tet_volume(e);
            rest.push(RestTet { bm: inv3(&dm), volume });
            let m = material.density * volume / 4.0;
            for &v in t {
                for d in 0..3 {
                    mass[3 * v + d] += m;
                }
            }
        }
        if mass.iter().any(|&m| !(m > 0.0)) {
            return Err(Error::Mesh("mesh has vertices without tetrahedra".into()));
        }
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); 3 * nv];
        for t in &mesh.tets {
            for &a in t {
                for &b in t {
                    for da in 0..3 {
                        rows[3 * a + da].extend((0..3).map(|db| 3 * b + db));
                    }
                }
            }
        }
        Ok(Self {
            mesh,
            material,
            mass,
            rest,
            fixed: vec![false; 3 * nv],
            pattern: CsrMatrix::from_pattern(rows),
        })
    }

    pub fn dofs(&self) -> usize {
        self.mass.len()
    }

    pub fn num_elements(&self) -> usize {
        self.rest.len()
    }

    pub fn fix_vertices(&mut self, vertices: &[usize]) -> Result<()> {
        for &v in vertices {
            if v >= self.mesh.num_vertices() {
                return Err(Error::InvalidParameter(format!("fixed vertex {v} out of range")));
            }
            for d in 0..3 {
                self.fixed[3 * v + d] = true;
            }
        }
        Ok(())
    }

    pub fn clear_fixed(&mut self) {
        self.fixed.fill(false);
    }

    /// Per-DOF flag, true for Dirichlet-constrained entries.
    pub fn fixed_dofs(&self) -> &[bool] {
        &self.fixed
    }

    pub fn free_mask(&self) -> Vec<bool> {
        self.fixed.iter().map(|f| !f).collect()
    }

    pub fn fixed_vertices(&self) -> Vec<usize> {
        (0..self.mesh.num_vertices()).filter(|&v| self.fixed[3 * v]).collect()
    }

    /// External force from a uniform acceleration field.
    pub fn gravity(&self, g: Vec3) -> Vec<f64> {
        self.mass.iter().enumerate().map(|(i, &m)| m * g[i % 3]).collect()
    }

    fn check_len<S>(&self, u: &[S]) -> Result<()> {
        if u.len() != self.dofs() {
            return Err(Error::Dimension {
                expected: self.dofs(),
                got: u.len(),
                context: "displacement",
            });
        }
        Ok(())
    }

    fn deformation<S: Scalar>(&self, e: usize, u: &[S]) -> M3<S> {
        let t = self.mesh.tets[e];
        let bm = &self.rest[e].bm;
        let mut du = [[S::zero(); 3]; 3];
        for c in 0..3 {
            for r in 0..3 {
                du[r][c] = u[3 * t[c + 1] + r] - u[3 * t[0] + r];
            }
        }
        let mut f = [[S::zero(); 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                let mut acc = S::from_real(if r == c { 1.0 } else { 0.0 });
                for k in 0..3 {
                    acc += du[r][k].scale(bm[k][c]);
                }
                f[r][c] = acc;
            }
        }
        f
    }

    /// Green strain and the second Piola–Kirchhoff stress.
    fn strain_stress<S: Scalar>(&self, f: &M3<S>) -> (M3<S>, M3<S>) {
        let (mu, lambda) = self.material.lame();
        let mut e = [[S::zero(); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = S::from_real(if i == j { -1.0 } else { 0.0 });
                for k in 0..3 {
                    acc += f[k][i] * f[k][j];
                }
                e[i][j] = acc.scale(0.5);
            }
        }
        let tr = e[0][0] + e[1][1] + e[2][2];
        let mut s = [[S::zero(); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                s[i][j] = e[i][j].scale(2.0 * mu);
            }
            s[i][i] += tr.scale(lambda);
        }
        (e, s)
    }

    /// Strain energy of element `e` (J).
    pub fn element_energy<S: Scalar>(&self, e: usize, u: &[S]) -> S {
        let (mu, lambda) = self.material.lame();
        let f = self.deformation(e, u);
        let (strain, _) = self.strain_stress(&f);
        let mut nrm = S::zero();
        for row in &strain {
            for &x in row {
                nrm += x * x;
            }
        }
        let tr = strain[0][0] + strain[1][1] + strain[2][2];
        (nrm.scale(mu) + (tr * tr).scale(0.5 * lambda)).scale(self.rest[e].volume)
    }

    /// Total StVK strain energy (J).
    pub fn stvk_energy<S: Scalar>(&self, u: &[S]) -> Result<S> {
        self.check_len(u)?;
        let parts = par::map_range(self.num_elements(), |e| self.element_energy(e, u));
        let mut total = S::zero();
        for p in parts {
            total += p;
        }
        Ok(total)
    }

    /// Internal force `∂Ψ/∂u` contribution of element `e`, per local vertex.
    pub fn element_force<S: Scalar>(&self, e: usize, u: &[S]) -> [[S; 3]; 4] {
        let f = self.deformation(e, u);
        let (_, s) = self.strain_stress(&f);
        let RestTet { bm, volume } = self.rest[e];
        let mut p = [[S::zero(); 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                let mut acc = S::zero();
                for k in 0..3 {
                    acc += f[r][k] * s[k][c];
                }
                p[r][c] = acc;
            }
        }
        let mut out = [[S::zero(); 3]; 4];
        for c in 0..3 {
            for r in 0..3 {
                let mut acc = S::zero();
                for k in 0..3 {
                    acc += p[r][k].scale(bm[c][k]);
                }
                let h = acc.scale(volume);
                out[c + 1][r] = h;
                out[0][r] -= h;
            }
        }
        out
    }

    /// Scatters element force blocks into a fullspace vector.
    pub fn scatter<S: Scalar>(&self, e: usize, block: &[[S; 3]; 4], out: &mut [S]) {
        for (a, &v) in self.mesh.tets[e].iter().enumerate() {
            for d in 0..3 {
                out[3 * v + d] += block[a][d];
            }
        }
    }

    /// Fullspace internal force `f_int(u)` (N).
    pub fn internal_force<S: Scalar>(&self, u: &[S]) -> Result<Vec<S>> {
        self.check_len(u)?;
        let blocks = par::map_range(self.num_elements(), |e| self.element_force(e, u));
        let mut out = vec![S::zero(); self.dofs()];
        for (e, b) in blocks.iter().enumerate() {
            self.scatter(e, b, &mut out);
        }
        Ok(out)
    }

    /// 12×12 element stiffness, row-major over (local vertex, axis).
    pub fn element_stiffness(&self, e: usize, u: &[f64]) -> [[f64; 12]; 12] {
        let (mu, lambda) = self.material.lame();
        let f = self.deformation(e, u);
        let (_, s) = self.strain_stress(&f);
        let RestTet { bm, volume } = self.rest[e];
        let mut k = [[0.0; 12]; 12];
        for a in 0..4 {
            for d in 0..3 {
                // dF for a unit displacement of local vertex a along axis d
                let mut df = [[0.0; 3]; 3];
                for c in 0..3 {
                    df[d][c] = if a == 0 {
                        -(bm[0][c] + bm[1][c] + bm[2][c])
                    } else {
                        bm[a - 1][c]
                    };
                }
                let mut de = [[0.0; 3]; 3];
                for i in 0..3 {
                    for j in 0..3 {
                        let mut acc = 0.0;
                        for m in 0..3 {
                            acc += df[m][i] * f[m][j] + f[m][i] * df[m][j];
                        }
                        de[i][j] = 0.5 * acc;
                    }
                }
                let tr = de[0][0] + de[1][1] + de[2][2];
                let mut ds = [[0.0; 3]; 3];
                for i in 0..3 {
                    for j in 0..3 {
                        ds[i][j] = 2.0 * mu * de[i][j];
                    }
                    ds[i][i] += lambda * tr;
                }
                let mut dp = [[0.0; 3]; 3];
                for r in 0..3 {
                    for c in 0..3 {
                        let mut acc = 0.0;
                        for m in 0..3 {
                            acc += df[r][m] * s[m][c] + f[r][m] * ds[m][c];
                        }
                        dp[r][c] = acc;
                    }
                }
                let col = 3 * a + d;
                for c in 0..3 {
                    for r in 0..3 {
                        let mut acc = 0.0;
                        for m in 0..3 {
                            acc += dp[r][m] * bm[c][m];
                        }
                        let h = acc * volume;
                        k[3 * (c + 1) + r][col] = h;
                        k[r][col] -= h;
                    }
                }
            }
        }
        k
    }

    /// Tangent stiffness `∂f_int/∂u` (N/m), sparse and symmetric.
    pub fn stiffness(&self, u: &[f64]) -> Result<CsrMatrix> {
        self.check_len(u)?;
        let blocks = par::map_range(self.num_elements(), |e| self.element_stiffness(e, u));
        let mut k = self.pattern.clone();
        for (e, b) in blocks.iter().enumerate() {
            self.scatter_stiffness(e, b, 1.0, &mut k);
        }
        Ok(k)
    }

    fn check_rule(&self, elements: &[usize], weights: &[f64]) -> Result<()> {
        if elements.len() != weights.len() {
            return Err(Error::Dimension {
                expected: elements.len(),
                got: weights.len(),
                context: "element weights",
            });
        }
        if let Some(&e) = elements.iter().find(|&&e| e >= self.num_elements()) {
            return Err(Error::InvalidParameter(format!("element {e} out of range")));
        }
        Ok(())
    }

    /// `Σ wₑ fₑ(u)` over a subset of elements.
    pub fn weighted_internal_force<S: Scalar>(&self, u: &[S], elements: &[usize], weights: &[f64]) -> Result<Vec<S>> {
        self.check_len(u)?;
        self.check_rule(elements, weights)?;
        let blocks = par::map(elements, |&e| self.element_force(e, u));
        let mut out = vec![S::zero(); self.dofs()];
        for ((&e, b), &w) in elements.iter().zip(&blocks).zip(weights) {
            let scaled = b.map(|row| row.map(|x| x.scale(w)));
            self.scatter(e, &scaled, &mut out);
        }
        Ok(out)
    }

    /// `Σ wₑ Kₑ(u)` over a subset of elements.
    pub fn weighted_stiffness(&self, u: &[f64], elements: &[usize], weights: &[f64]) -> Result<CsrMatrix> {
        self.check_len(u)?;
        self.check_rule(elements, weights)?;
        let blocks = par::map(elements, |&e| self.element_stiffness(e, u));
        let mut k = self.pattern.clone();
        for ((&e, b), &w) in elements.iter().zip(&blocks).zip(weights) {
            self.scatter_stiffness(e, b, w, &mut k);
        }
        Ok(k)
    }

    fn scatter_stiffness(&self, e: usize, b: &[[f64; 12]; 12], w: f64, k: &mut CsrMatrix) {
        let t = self.mesh.tets[e];
        for a in 0..4 {
            for b2 in 0..4 {
                for da in 0..3 {
                    for db in 0..3 {
                        k.add(3 * t[a] + da, 3 * t[b2] + db, w * b[3 * a + da][3 * b2 + db]);
                    }
                }
            }
        }
    }

    /// Surface mesh of the deformed shape as Wavefront OBJ text.
    pub fn surface_obj(&self, u: &[f64]) -> Result<String> {
        use std::fmt::Write as _;
        self.check_len(u)?;
        let mut s = String::new();
        for (i, x) in self.mesh.vertices.iter().enumerate() {
            let _ = writeln!(
                s,
                "v {} {} {}",
                x[0] + u[3 * i],
                x[1] + u[3 * i + 1],
                x[2] + u[3 * i + 2]
            );
        }
        for f in &self.mesh.surface {
            let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        Ok(s)
    }

    pub fn kinetic_energy(&self, v: &[f64]) -> f64 {
        0.5 * self.mass.iter().zip(v).map(|(m, x)| m * x * x).sum::<f64>()
    }

    /// Count of elements with inverted deformation.
    pub fn inverted_elements(&self, u: &[f64]) -> usize {
        (0..self.num_elements())
            .filter(|&e| {
                let f = self.deformation(e, u);
                let det = f[0][0] * (f[1][1] * f[2][2] - f[1][2] * f[2][1])
                    - f[0][1] * (f[1][0] * f[2][2] - f[1][2] * f[2][0])
                    + f[0][2] * (f[1][0] * f[2][1] - f[1][1] * f[2][0]);
                det <= 0.0
            })
            .count()
    }

    /// One implicit Euler step: solves
    /// `M(v′ − v)/dt + (αM + βK(u))v′ + f_int(u′) = f_ext`, `u′ = u + dt·v′`
    /// by Newton's method on the free DOFs. The damping stiffness is taken
    /// at the start of the step.
    pub fn fullspace_step(
        &self,
        u: &[f64],
        v: &[f64],
        f_ext: &[f64],
        dt: f64,
        cfg: &NewtonConfig,
    ) -> Result<StepResult> {
        self.check_len(u)?;
        self.check_len(v)?;
        self.check_len(f_ext)?;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("time step must be positive, got {dt}")));
        }
        let n = self.dofs();
        let free = self.free_mask();
        let Material {
            rayleigh_alpha: alpha,
            rayleigh_beta: beta,
            ..
        } = self.material;
        let k0 = if beta > 0.0 { Some(self.stiffness(u)?) } else { None };
        let mask = |x: &mut [f64]| {
            for (xi, &f) in x.iter_mut().zip(&free) {
                if !f {
                    *xi = 0.0;
                }
            }
        };
        let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();

        let residual = |x: &[f64]| -> Result<(Vec<f64>, f64)> {
            let vn: Vec<f64> = (0..n).map(|i| (x[i] - u[i]) / dt).collect();
            let fint = self.internal_force(x)?;
            let damp_k = match &k0 {
                Some(k) => k.mul_vec(&vn),
                None => vec![0.0; n],
            };
            let mut scale = 0.0;
            let mut g = vec![0.0; n];
            for i in 0..n {
                let inertia = self.mass[i] * (vn[i] - v[i]) / dt;
                g[i] = inertia + alpha * self.mass[i] * vn[i] + beta * damp_k[i] + fint[i] - f_ext[i];
                if free[i] {
                    scale += inertia * inertia + fint[i] * fint[i] + f_ext[i] * f_ext[i];
                }
            }
            mask(&mut g);
            Ok((g, scale.sqrt()))
        };

        let mut x: Vec<f64> = (0..n).map(|i| if free[i] { u[i] + dt * v[i] } else { u[i] }).collect();
        let (mut g, mut scale) = residual(&x)?;
        let mut gn = norm(&g);
        for it in 0..cfg.max_iters {
            if gn <= cfg.rel_tol * scale + cfg.abs_tol {
                let vn = (0..n).map(|i| (x[i] - u[i]) / dt).collect();
                return Ok(StepResult {
                    u: x,
                    v: vn,
                    iterations: it,
                    residual: gn,
                });
            }
            let mut a = self.stiffness(&x)?;
            if let Some(k) = &k0 {
                a.axpby(1.0, beta / dt, k);
            }
            let diag: Vec<f64> = self.mass.iter().map(|m| m * (1.0 / (dt * dt) + alpha / dt)).collect();
            a.add_diagonal(&diag);
            let rhs: Vec<f64> = g.iter().map(|x| -x).collect();
            let step = match pcg(&a, &rhs, &free, cfg.cg_tol, 10 * n) {
                Ok((s, rep)) => {
                    debug!("newton {it}: cg {} iterations", rep.iterations);
                    s
                }
                Err(_) => {
                    warn!("cg failed in fullspace Newton iteration {it}; using dense LU");
                    dense_solve(&a, &rhs, &free)?
                }
            };
            let mut t = 1.0;
            loop {
                let trial: Vec<f64> = (0..n).map(|i| x[i] + t * step[i]).collect();
                let (g2, s2) = residual(&trial)?;
                let n2 = norm(&g2);
                if n2 < gn || t < 1e-4 {
                    x = trial;
                    g = g2;
                    gn = n2;
                    scale = s2;
                    break;
                }
                t *= 0.5;
            }
            if !gn.is_finite() {
                break;
            }
        }
        if gn <= cfg.rel_tol * scale + cfg.abs_tol {
            let vn = (0..n).map(|i| (x[i] - u[i]) / dt).collect();
            return Ok(StepResult {
                u: x,
                v: vn,
                iterations: cfg.max_iters,
                residual: gn,
            });
        }
        Err(Error::NewtonDiverged {
            iters: cfg.max_iters,
            residual: gn,
        })
    }
}
