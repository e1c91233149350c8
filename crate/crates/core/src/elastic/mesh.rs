//! Tetrahedral meshes: text I/O, a box generator, surface extraction.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct TetMesh {
    pub vertices: Vec<Vec3>,
    pub tets: Vec<[usize; 4]>,
    /// Outward-oriented boundary triangles.
    pub surface: Vec<[usize; 3]>,
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn det3(a: Vec3, b: Vec3, c: Vec3) -> f64 {
    a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0]) + a[2] * (b[0] * c[1] - b[1] * c[0])
}

impl TetMesh {
    /// Validates indices and orientation. When `surface` is `None` the
    /// boundary is extracted from faces used by exactly one tet.
    pub fn new(vertices: Vec<Vec3>, tets: Vec<[usize; 4]>, surface: Option<Vec<[usize; 3]>>) -> Result<Self> {
        let nv = vertices.len();
        if tets.is_empty() {
            return Err(Error::Mesh("mesh has no tetrahedra".into()));
        }
        if vertices.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Mesh("non-finite vertex coordinate".into()));
        }
        let mut mesh = Self {
            vertices,
            tets,
            surface: Vec::new(),
        };
        for (e, t) in mesh.tets.iter().enumerate() {
            if t.iter().any(|&i| i >= nv) {
                return Err(Error::Mesh(format!("tet {e} references a missing vertex")));
            }
            let v = mesh.tet_volume(e);
            if !(v > 0.0) {
                return Err(Error::Mesh(format!("tet {e} has nonpositive volume {v}")));
            }
        }
        mesh.surface = match surface {
            Some(s) => {
                if s.iter().flatten().any(|&i| i >= nv) {
                    return Err(Error::Mesh("surface triangle references a missing vertex".into()));
                }
                s
            }
            None => mesh.extract_surface(),
        };
        Ok(mesh)
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    /// Number of displacement degrees of freedom.
    pub fn dofs(&self) -> usize {
        3 * self.vertices.len()
    }

    pub fn tet_volume(&self, e: usize) -> f64 {
        let [a, b, c, d] = self.tets[e].map(|i| self.vertices[i]);
        det3(sub(b, a), sub(c, a), sub(d, a)) / 6.0
    }

    pub fn total_volume(&self) -> f64 {
        (0..self.tets.len()).map(|e| self.tet_volume(e)).sum()
    }

    pub fn centroid(&self, e: usize) -> Vec3 {
        let mut c = [0.0; 3];
        for &i in &self.tets[e] {
            for d in 0..3 {
                c[d] += 0.25 * self.vertices[i][d];
            }
        }
        c
    }

    pub fn bbox(&self) -> (Vec3, Vec3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for d in 0..3 {
                lo[d] = lo[d].min(v[d]);
                hi[d] = hi[d].max(v[d]);
            }
        }
        (lo, hi)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let (lo, hi) = self.bbox();
        (0..3).map(|d| (hi[d] - lo[d]).powi(2)).sum::<f64>().sqrt()
    }

    pub fn surface_vertices(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.surface.iter().flatten().copied().collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn vertices_where(&self, pred: impl Fn(&Vec3) -> bool) -> Vec<usize> {
        (0..self.vertices.len()).filter(|&i| pred(&self.vertices[i])).collect()
    }

    fn extract_surface(&self) -> Vec<[usize; 3]> {
        let mut faces: HashMap<[usize; 3], ([usize; 3], usize)> = HashMap::new();
        for t in &self.tets {
            let [a, b, c, d] = *t;
            for f in [[b, c, d], [a, c, b], [a, b, d], [a, d, c]] {
                let mut key = f;
                key.sort_unstable();
                faces.entry(key).or_insert((f, 0)).1 += 1;
            }
        }
        let mut out: Vec<[usize; 3]> = faces.into_values().filter(|&(_, n)| n == 1).map(|(f, _)| f).collect();
        out.sort_unstable();
        out
    }

    /// Axis-aligned box of `nx × ny × nz` cubes, six tets per cube.
    pub fn bar(cells: [usize; 3], size: Vec3) -> Result<Self> {
        let [nx, ny, nz] = cells;
        if nx == 0 || ny == 0 || nz == 0 || size.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Mesh("bar needs positive cell counts and size".into()));
        }
        let id = |i: usize, j: usize, k: usize| (i * (ny + 1) + j) * (nz + 1) + k;
        let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1) * (nz + 1));
        for i in 0..=nx {
            for j in 0..=ny {
                for k in 0..=nz {
                    vertices.push([
                        size[0] * i as f64 / nx as f64,
                        size[1] * j as f64 / ny as f64,
                        size[2] * k as f64 / nz as f64,
                    ]);
                }
            }
        }
        const PATHS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let mut tets = Vec::with_capacity(6 * nx * ny * nz);
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    for path in PATHS {
                        let mut c = [i, j, k];
                        let mut t = [id(i, j, k); 4];
                        for (s, &axis) in path.iter().enumerate() {
                            c[axis] += 1;
                            t[s + 1] = id(c[0], c[1], c[2]);
                        }
                        let [a, b, cc, d] = t.map(|v| vertices[v]);
                        if det3(sub(b, a), sub(cc, a), sub(d, a)) < 0.0 {
                            t.swap(2, 3);
                        }
                        tets.push(t);
                    }
                }
            }
        }
        Self::new(vertices, tets, None)
    }

    /// Plain-text format: `nv nt`, then `nv` coordinate lines, `nt` lines of
    /// four 0-based indices, then optional surface triangles. `#` starts a
    /// comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty());
        let bad = |m: String| Error::Mesh(m);
        let header = lines.next().ok_or_else(|| bad("empty mesh file".into()))?;
        let counts: Vec<usize> = header
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(format!("bad header: {e}")))?;
        if counts.len() != 2 {
            return Err(bad("header must be `N_vertices N_tets`".into()));
        }
        let nums = |line: &str, n: usize| -> Result<Vec<f64>> {
            let v: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(format!("bad number in {line:?}: {e}")))?;
            if v.len() != n {
                return Err(bad(format!("expected {n} values in {line:?}")));
            }
            Ok(v)
        };
        let idx = |line: &str, n: usize| -> Result<Vec<usize>> {
            let v: Vec<usize> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(format!("bad index in {line:?}: {e}")))?;
            if v.len() != n {
                return Err(bad(format!("expected {n} indices in {line:?}")));
            }
            Ok(v)
        };
        let mut vertices = Vec::with_capacity(counts[0]);
        for _ in 0..counts[0] {
            let v = nums(lines.next().ok_or_else(|| bad("missing vertex lines".into()))?, 3)?;
            vertices.push([v[0], v[1], v[2]]);
        }
        let mut tets = Vec::with_capacity(counts[1]);
        for _ in 0..counts[1] {
            let v = idx(lines.next().ok_or_else(|| bad("missing tet lines".into()))?, 4)?;
            tets.push([v[0], v[1], v[2], v[3]]);
        }
        let surface: Vec<[usize; 3]> = lines
            .map(|l| idx(l, 3).map(|v| [v[0], v[1], v[2]]))
            .collect::<Result<_>>()?;
        Self::new(vertices, tets, if surface.is_empty() { None } else { Some(surface) })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} {}", self.vertices.len(), self.tets.len());
        for v in &self.vertices {
            let _ = writeln!(s, "{:?} {:?} {:?}", v[0], v[1], v[2]);
        }
        for t in &self.tets {
            let _ = writeln!(s, "{} {} {} {}", t[0], t[1], t[2], t[3]);
        }
        for f in &self.surface {
            let _ = writeln!(s, "{} {} {}", f[0], f[1], f[2]);
        }
        s
    }
}
