//! The element selector: two graph convolutions over mesh vertices, mean
//! pooling onto tetrahedra, a shared two-layer head and a softmax over
//! elements.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::elastic::TetMesh;
use crate::error::{Error, Result};

pub const CHANNELS: usize = 8;

/// Normalized one-ring adjacency with self loops, `1/√(dᵢdⱼ)`.
#[derive(Clone, Debug)]
pub struct MeshGraph {
    neighbors: Vec<Vec<(usize, f64)>>,
    tets: Vec<[usize; 4]>,
}

impl MeshGraph {
    pub fn new(mesh: &TetMesh) -> Self {
        let nv = mesh.num_vertices();
        let mut adj: Vec<Vec<usize>> = (0..nv).map(|i| vec![i]).collect();
        for t in &mesh.tets {
            for a in 0..4 {
                for b in 0..4 {
                    if a != b {
                        adj[t[a]].push(t[b]);
                    }
                }
            }
        }
        for l in &mut adj {
            l.sort_unstable();
            l.dedup();
        }
        let deg: Vec<f64> = adj.iter().map(|l| l.len() as f64).collect();
        let neighbors = adj
            .iter()
            .enumerate()
            .map(|(i, l)| l.iter().map(|&j| (j, 1.0 / (deg[i] * deg[j]).sqrt())).collect())
            .collect();
        Self {
            neighbors,
            tets: mesh.tets.clone(),
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.neighbors.len()
    }

    pub fn num_elements(&self) -> usize {
        self.tets.len()
    }

    /// `Â x` for a row-per-vertex feature matrix. `Â` is symmetric.
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        for (i, l) in self.neighbors.iter().enumerate() {
            for &(j, w) in l {
                for c in 0..x.ncols() {
                    out[(i, c)] += w * x[(j, c)];
                }
            }
        }
        out
    }
}

/// Selector parameters. Matrices are stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SNet {
    /// 3 × 8
    pub gamma1: Vec<f64>,
    /// 8 × 8
    pub gamma2: Vec<f64>,
    /// 8 × 8, output-major
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
    pub out_w: Vec<f64>,
    pub out_b: f64,
}

pub struct SCache {
    ax: DMatrix<f64>,
    z1: DMatrix<f64>,
    ah1: DMatrix<f64>,
    z2: DMatrix<f64>,
    pooled: DMatrix<f64>,
    a: DMatrix<f64>,
    hh: DMatrix<f64>,
    pub scores: Vec<f64>,
}

const C: usize = CHANNELS;

impl SNet {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |n: usize, fan_in: usize| -> Vec<f64> {
            let s = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-s..s)).collect()
        };
        Self {
            gamma1: init(3 * C, 3),
            gamma2: init(C * C, C),
            head_w: init(C * C, C),
            head_b: init(C, C),
            out_w: init(C, C),
            out_b: 0.0,
        }
    }

    pub fn zeros() -> Self {
        Self {
            gamma1: vec![0.0; 3 * C],
            gamma2: vec![0.0; C * C],
            head_w: vec![0.0; C * C],
            head_b: vec![0.0; C],
            out_w: vec![0.0; C],
            out_b: 0.0,
        }
    }

    pub fn param_count(&self) -> usize {
        3 * C + 2 * C * C + 2 * C + 1
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        p.extend(&self.gamma1);
        p.extend(&self.gamma2);
        p.extend(&self.head_w);
        p.extend(&self.head_b);
        p.extend(&self.out_w);
        p.push(self.out_b);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::Dimension {
                expected: self.param_count(),
                got: p.len(),
                context: "selector parameters",
            });
        }
        let mut it = p.iter().copied();
        for v in self
            .gamma1
            .iter_mut()
            .chain(self.gamma2.iter_mut())
            .chain(self.head_w.iter_mut())
            .chain(self.head_b.iter_mut())
            .chain(self.out_w.iter_mut())
        {
            *v = it.next().unwrap_or_default();
        }
        self.out_b = it.next().unwrap_or_default();
        Ok(())
    }

    /// Scores for every element given a displacement `u` (3 per vertex).
    pub fn forward(&self, graph: &MeshGraph, u: &[f64]) -> Result<SCache> {
        let nv = graph.num_vertices();
        if u.len() != 3 * nv {
            return Err(Error::Dimension {
                expected: 3 * nv,
                got: u.len(),
                context: "selector input",
            });
        }
        let x = DMatrix::from_row_slice(nv, 3, u);
        let g1 = DMatrix::from_row_slice(3, C, &self.gamma1);
        let g2 = DMatrix::from_row_slice(C, C, &self.gamma2);
        let ax = graph.apply(&x);
        let z1 = &ax * g1;
        let h1 = z1.map(f64::sin);
        let ah1 = graph.apply(&h1);
        let z2 = &ah1 * g2;
        let h2 = z2.map(f64::sin);
        let ne = graph.num_elements();
        let mut pooled = DMatrix::<f64>::zeros(ne, C);
        for (e, t) in graph.tets.iter().enumerate() {
            for &v in t {
                for c in 0..C {
                    pooled[(e, c)] += 0.25 * h2[(v, c)];
                }
            }
        }
        let hw = DMatrix::from_row_slice(C, C, &self.head_w);
        let mut a = &pooled * hw.transpose();
        for mut row in a.row_iter_mut() {
            for c in 0..C {
                row[c] += self.head_b[c];
            }
        }
        let hh = a.map(f64::sin);
        let logits: Vec<f64> = (0..ne)
            .map(|e| (0..C).map(|c| hh[(e, c)] * self.out_w[c]).sum::<f64>() + self.out_b)
            .collect();
        let scores = softmax(&logits);
        Ok(SCache {
            ax,
            z1,
            ah1,
            z2,
            pooled,
            a,
            hh,
            scores,
        })
    }

    /// Parameter gradient given `∂L/∂s`.
    pub fn backward(&self, graph: &MeshGraph, cache: &SCache, ds: &[f64]) -> Vec<f64> {
        let s = &cache.scores;
        let ne = s.len();
        let dot: f64 = s.iter().zip(ds).map(|(a, b)| a * b).sum();
        let dl: Vec<f64> = (0..ne).map(|e| s[e] * (ds[e] - dot)).collect();

        let mut d_out_w = vec![0.0; C];
        let d_out_b: f64 = dl.iter().sum();
        let mut d_head_w = vec![0.0; C * C];
        let mut d_head_b = vec![0.0; C];
        let mut dpooled = DMatrix::<f64>::zeros(ne, C);
        for e in 0..ne {
            let mut da = [0.0; C];
            for c in 0..C {
                d_out_w[c] += dl[e] * cache.hh[(e, c)];
                da[c] = dl[e] * self.out_w[c] * cache.a[(e, c)].cos();
                d_head_b[c] += da[c];
            }
            for o in 0..C {
                for i in 0..C {
                    d_head_w[o * C + i] += da[o] * cache.pooled[(e, i)];
                    dpooled[(e, i)] += self.head_w[o * C + i] * da[o];
                }
            }
        }
        let nv = graph.num_vertices();
        let mut dz2 = DMatrix::<f64>::zeros(nv, C);
        for (e, t) in graph.tets.iter().enumerate() {
            for &v in t {
                for c in 0..C {
                    dz2[(v, c)] += 0.25 * dpooled[(e, c)];
                }
            }
        }
        dz2.zip_apply(&cache.z2, |d, z| *d *= z.cos());
        let g2 = DMatrix::from_row_slice(C, C, &self.gamma2);
        let dg2 = cache.ah1.transpose() * &dz2;
        let mut dz1 = graph.apply(&(dz2 * g2.transpose()));
        dz1.zip_apply(&cache.z1, |d, z| *d *= z.cos());
        let dg1 = cache.ax.transpose() * dz1;

        let mut grad = Vec::with_capacity(self.param_count());
        grad.extend(row_major(&dg1));
        grad.extend(row_major(&dg2));
        grad.extend(d_head_w);
        grad.extend(d_head_b);
        grad.extend(d_out_w);
        grad.push(d_out_b);
        grad
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
