//! Training poses from scripted random forcing, energy-based pose weights,
//! and the PCA basis of the low-energy poses.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::elastic::{ElasticModel, NewtonConfig};
use crate::error::{Error, Result};
use crate::par;

/// Parameters of the scripted forcing runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForceScript {
    pub seed: u64,
    pub episodes: usize,
    pub steps_per_episode: usize,
    /// Vertex gathering radius (m); `None` means 10% of the bounding-box
    /// diagonal.
    pub radius: Option<f64>,
    /// Total force magnitude range `[lo, hi]` (N), spread over the
    /// gathered vertices.
    pub magnitude: [f64; 2],
    pub dt: f64,
    pub newton: NewtonConfig,
}

impl Default for ForceScript {
    fn default() -> Self {
        Self {
            seed: 0,
            episodes: 10,
            steps_per_episode: 20,
            radius: None,
            magnitude: [0.0, 10.0],
            dt: 0.01,
            newton: NewtonConfig::default(),
        }
    }
}

impl ForceScript {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.magnitude;
        if self.steps_per_episode == 0 {
            return Err(Error::InvalidParameter("steps per episode must be at least 1".into()));
        }
        if self.radius.is_some_and(|r| !(r > 0.0)) {
            return Err(Error::InvalidParameter("radius must be positive".into()));
        }
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "bad magnitude range {:?}",
                self.magnitude
            )));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParameter("dt must be positive".into()));
        }
        Ok(())
    }
}

/// Displacement snapshots with their strain energies and training weights.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSet {
    /// `N × T`, one pose per column (m).
    pub poses: DMatrix<f64>,
    pub energies: Vec<f64>,
    pub weights: Vec<f64>,
}

impl PoseSet {
    pub fn new(poses: DMatrix<f64>, energies: Vec<f64>) -> Result<Self> {
        let t = poses.ncols();
        if energies.len() != t {
            return Err(Error::Dimension {
                expected: t,
                got: energies.len(),
                context: "pose energies",
            });
        }
        if poses.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("pose"));
        }
        if energies.iter().any(|&e| !(e >= 0.0 && e.is_finite())) {
            return Err(Error::InvalidParameter(
                "energies must be finite and nonnegative".into(),
            ));
        }
        Ok(Self {
            poses,
            energies,
            weights: vec![1.0; t],
        })
    }

    pub fn len(&self) -> usize {
        self.poses.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dofs(&self) -> usize {
        self.poses.nrows()
    }

    pub fn pose(&self, t: usize) -> Vec<f64> {
        self.poses.column(t).iter().copied().collect()
    }

    /// Subset of columns, weights carried along.
    pub fn select(&self, idx: &[usize]) -> PoseSet {
        PoseSet {
            poses: self.poses.select_columns(idx),
            energies: idx.iter().map(|&i| self.energies[i]).collect(),
            weights: idx.iter().map(|&i| self.weights[i]).collect(),
        }
    }

    /// Writes the binary file and a JSON sidecar next to it.
    pub fn save(&self, path: &Path, script: Option<&ForceScript>) -> Result<()> {
        write_matrix(path, &self.poses, &self.energies)?;
        let side = Sidecar {
            script: script.cloned(),
            weights: self.weights.clone(),
        };
        let f = std::io::BufWriter::new(std::fs::File::create(sidecar_path(path))?);
        serde_json::to_writer_pretty(f, &side)?;
        Ok(())
    }

    /// Reads a pose file; weights come from the sidecar when present.
    pub fn load(path: &Path) -> Result<(Self, Option<ForceScript>)> {
        let (poses, energies) = read_matrix(path)?;
        let mut ps = PoseSet::new(poses, energies)?;
        let side = sidecar_path(path);
        let mut script = None;
        if side.exists() {
            let s: Sidecar = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(side)?))?;
            if s.weights.len() == ps.len() {
                ps.weights = s.weights;
            }
            script = s.script;
        }
        Ok((ps, script))
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    script: Option<ForceScript>,
    weights: Vec<f64>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Binary layout: `u64 N`, `u64 T` (little endian), `N·T` column-major
/// doubles, then `T` trailing doubles.
pub fn write_matrix(path: &Path, m: &DMatrix<f64>, trailer: &[f64]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&(m.nrows() as u64).to_le_bytes())?;
    f.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for x in m.iter().chain(trailer) {
        f.write_all(&x.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(Error::Format(format!("{} is too short for a header", path.display())));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[8 * i..8 * i + 8].try_into().unwrap());
    let (n, t) = (word(0) as usize, word(1) as usize);
    let count = n
        .checked_mul(t)
        .and_then(|nt| nt.checked_add(t))
        .ok_or_else(|| Error::Format("header sizes overflow".into()))?;
    if bytes.len() != 16 + 8 * count {
        return Err(Error::Format(format!(
            "{}: expected {} bytes for {n}×{t}, found {}",
            path.display(),
            16 + 8 * count,
            bytes.len()
        )));
    }
    let vals: Vec<f64> = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((DMatrix::from_column_slice(n, t, &vals[..n * t]), vals[n * t..].to_vec()))
}

/// Runs the forcing script: every episode starts at rest, picks a random
/// free surface vertex, gathers free vertices within the radius, and applies
/// one random constant force while stepping the fullspace integrator. Every
/// frame is recorded; the rest pose is appended last. Diverging episodes are
/// skipped.
pub fn generate_poses(model: &ElasticModel, script: &ForceScript) -> Result<PoseSet> {
    script.validate()?;
    let n = model.dofs();
    let free = model.free_mask();
    let candidates: Vec<usize> = model
        .mesh
        .surface_vertices()
        .into_iter()
        .filter(|&v| free[3 * v])
        .collect();
    if candidates.is_empty() && script.episodes > 0 {
        return Err(Error::Mesh("no free surface vertices to push".into()));
    }
    let radius = script.radius.unwrap_or(0.1 * model.mesh.bbox_diagonal());
    let episodes = par::map_range(script.episodes, |ep| -> Option<Vec<(Vec<f64>, f64)>> {
        let mut rng = ChaCha8Rng::seed_from_u64(script.seed);
        rng.set_stream(ep as u64);
        let center = model.mesh.vertices[candidates[rng.gen_range(0..candidates.len())]];
        let group: Vec<usize> = model
            .mesh
            .vertices_where(|p| (0..3).map(|d| (p[d] - center[d]).powi(2)).sum::<f64>() <= radius * radius);
        let group: Vec<usize> = group.into_iter().filter(|&v| free[3 * v]).collect();
        let dir = loop {
            let d: [f64; 3] = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if len > 1e-3 && len <= 1.0 {
                break d.map(|x| x / len);
            }
        };
        let [lo, hi] = script.magnitude;
        let mag = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        let per = mag / group.len().max(1) as f64;
        let mut f = vec![0.0; n];
        for &v in &group {
            for d in 0..3 {
                f[3 * v + d] = per * dir[d];
            }
        }
        let (mut u, mut vel) = (vec![0.0; n], vec![0.0; n]);
        let mut frames = Vec::with_capacity(script.steps_per_episode);
        for step in 0..script.steps_per_episode {
            match model.fullspace_step(&u, &vel, &f, script.dt, &script.newton) {
                Ok(s) => {
                    u = s.u;
                    vel = s.v;
                }
                Err(e) => {
                    warn!("episode {ep} diverged at step {step}: {e}; skipped");
                    return None;
                }
            }
            let energy = model.stvk_energy(&u).ok()?;
            frames.push((u.clone(), energy));
        }
        Some(frames)
    });
    let mut cols: Vec<f64> = Vec::new();
    let mut energies = Vec::new();
    let mut skipped = 0;
    for ep in episodes {
        match ep {
            Some(frames) => {
                for (u, e) in frames {
                    cols.extend(u);
                    energies.push(e);
                }
            }
            None => skipped += 1,
        }
    }
    cols.extend(std::iter::repeat(0.0).take(n));
    energies.push(0.0);
    info!("generated {} poses, {skipped} episodes skipped", energies.len());
    let t = energies.len();
    PoseSet::new(DMatrix::from_column_slice(n, t, &cols), energies)
}

/// Default energy floor: `1e−6 ×` the median positive energy, or 1 J when
/// no pose stores energy.
pub fn default_energy_floor(energies: &[f64]) -> f64 {
    let mut pos: Vec<f64> = energies.iter().copied().filter(|&e| e > 0.0).collect();
    if pos.is_empty() {
        return 1.0;
    }
    pos.sort_by(f64::total_cmp);
    1e-6 * pos[pos.len() / 2]
}

/// `w_t = 1 / max(E_t, floor)`, normalized to mean 1.
pub fn energy_weights(energies: &[f64], floor: f64) -> Result<Vec<f64>> {
    if !(floor > 0.0 && floor.is_finite()) {
        return Err(Error::InvalidParameter("energy floor must be positive".into()));
    }
    if energies.is_empty() {
        return Ok(Vec::new());
    }
    let raw: Vec<f64> = energies.iter().map(|&e| 1.0 / e.max(floor)).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(raw.into_iter().map(|w| w / mean).collect())
}

/// Top `n_p` left singular vectors of the `subset_size` lowest-energy poses,
/// with the singular values.
pub fn pca_basis(ps: &PoseSet, n_p: usize, subset_size: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    if !(n_p <= subset_size && subset_size <= ps.len()) {
        return Err(Error::InvalidParameter(format!(
            "need n_p ≤ subset ≤ T, got {n_p}, {subset_size}, {}",
            ps.len()
        )));
    }
    let mut order: Vec<usize> = (0..ps.len()).collect();
    order.sort_by(|&a, &b| ps.energies[a].total_cmp(&ps.energies[b]).then(a.cmp(&b)));
    let x = ps.poses.select_columns(&order[..subset_size]);
    pca_of(&x, n_p)
}

/// Top `k` left singular vectors of `x`.
pub fn pca_of(x: &DMatrix<f64>, k: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    if k == 0 {
        return Ok((DMatrix::zeros(x.nrows(), 0), Vec::new()));
    }
    let svd = x.clone().svd(true, false);
    let u = svd.u.ok_or(Error::Singular)?;
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let smax = idx.first().map_or(0.0, |&i| svd.singular_values[i]);
    let found = idx
        .iter()
        .filter(|&&i| svd.singular_values[i] > 1e-12 * smax.max(f64::MIN_POSITIVE))
        .count();
    if found < k {
        return Err(Error::RankDeficient { needed: k, found });
    }
    let basis = u.select_columns(&idx[..k]);
    let sv: Vec<f64> = idx.iter().map(|&i| svd.singular_values[i]).collect();
    // Sign convention: largest-magnitude entry of each column positive.
    let mut basis = basis;
    for mut c in basis.column_iter_mut() {
        let imax = c.iamax();
        if c[imax] < 0.0 {
            c.neg_mut();
        }
    }
    Ok((basis, sv))
}

/// `‖(I − UUᵀ)X‖_F`
pub fn pca_residual(u: &DMatrix<f64>, x: &DMatrix<f64>) -> f64 {
    (x - u * (u.transpose() * x)).norm()
}

/// Projects a vector out of span(U).
pub fn project_out(u: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    let v = DVector::from_column_slice(x);
    let r = &v - u * (u.transpose() * &v);
    r.iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elastic::{Material, TetMesh};

    fn model() -> ElasticModel {
        let mesh = TetMesh::bar([4, 1, 1], [0.4, 0.1, 0.1]).unwrap();
        let mut m = ElasticModel::new(mesh, Material::default()).unwrap();
        let fixed = m.mesh.vertices_where(|p| p[0] < 1e-9);
        m.fix_vertices(&fixed).unwrap();
        m
    }

    fn script(episodes: usize, steps: usize) -> ForceScript {
        ForceScript {
            seed: 3,
            episodes,
            steps_per_episode: steps,
            magnitude: [1.0, 5.0],
            ..Default::default()
        }
    }

    #[test]
    fn counts_and_determinism() {
        let m = model();
        let a = generate_poses(&m, &script(3, 4)).unwrap();
        assert_eq!(a.len(), 3 * 4 + 1);
        let b = generate_poses(&m, &script(3, 4)).unwrap();
        let bits = |p: &PoseSet| p.poses.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert!(a.pose(0).iter().any(|&x| x != 0.0));
        assert!(a.pose(12).iter().all(|&x| x == 0.0));
        assert_eq!(generate_poses(&m, &script(0, 4)).unwrap().len(), 1);
    }

    #[test]
    fn zero_force_gives_rest_poses() {
        let m = model();
        let mut s = script(2, 3);
        s.magnitude = [0.0, 0.0];
        let p = generate_poses(&m, &s).unwrap();
        assert!(p.poses.iter().all(|&x| x.abs() < 1e-14));
        assert!(p.energies.iter().all(|&e| e < 1e-20));
    }

    #[test]
    fn weights() {
        let w = energy_weights(&[2.0, 2.0, 2.0], 1e-6).unwrap();
        assert!(w.iter().all(|&x| (x - 1.0).abs() < 1e-15));
        let e = [1e-9, 0.5, 2.0, 1e-3];
        let floor = 1e-3;
        let w = energy_weights(&e, floor).unwrap();
        let max = w.iter().cloned().fold(0.0, f64::max);
        assert_eq!(w[3], max);
        assert_eq!(w[0], max);
        let w2 = energy_weights(&e.map(|x| 2.0 * x), 2.0 * floor).unwrap();
        for i in 0..4 {
            assert!((w[i] / w[1] - w2[i] / w2[1]).abs() < 1e-12);
        }
        assert!((w.iter().sum::<f64>() / 4.0 - 1.0).abs() < 1e-15);
        assert!(energy_weights(&e, 0.0).is_err());
    }

    #[test]
    fn pca_of_rank_one_family() {
        let dir = DVector::from_vec(vec![3.0, 0.0, 4.0, 0.0]);
        let poses = DMatrix::from_fn(4, 5, |i, j| dir[i] * (j as f64 - 1.5));
        let ps = PoseSet::new(poses, vec![1.0; 5]).unwrap();
        let (u, _) = pca_basis(&ps, 1, 5).unwrap();
        let unit = &dir / 5.0;
        assert!((u.column(0) - unit).norm() < 1e-12);
        assert!(matches!(pca_basis(&ps, 2, 5), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn pca_properties() {
        let m = model();
        let ps = generate_poses(&m, &script(4, 5)).unwrap();
        let sub = 15;
        let mut last = f64::INFINITY;
        let mut order: Vec<usize> = (0..ps.len()).collect();
        order.sort_by(|&a, &b| ps.energies[a].total_cmp(&ps.energies[b]).then(a.cmp(&b)));
        let x = ps.poses.select_columns(&order[..sub]);
        for k in 1..=6 {
            let (u, sv) = pca_basis(&ps, k, sub).unwrap();
            let gram = u.transpose() * &u;
            assert!((gram - DMatrix::identity(k, k)).norm() <= 1e-10);
            let res = pca_residual(&u, &x);
            assert!(res <= last * (1.0 + 1e-12));
            last = res;
            let tail: f64 = sv[k..].iter().map(|s| s * s).sum::<f64>().sqrt();
            assert!((res - tail).abs() <= 1e-8 * tail.max(1e-300) + 1e-14);
        }
    }

    #[test]
    fn binary_round_trip() {
        let m = model();
        let s = script(2, 2);
        let mut ps = generate_poses(&m, &s).unwrap();
        ps.weights = energy_weights(&ps.energies, default_energy_floor(&ps.energies)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("poses.bin");
        ps.save(&p, Some(&s)).unwrap();
        let (back, sc) = PoseSet::load(&p).unwrap();
        assert_eq!(back, ps);
        assert_eq!(sc.unwrap(), s);
        std::fs::write(&p, [0u8; 20]).unwrap();
        assert!(matches!(PoseSet::load(&p), Err(Error::Format(_))));
    }
}
