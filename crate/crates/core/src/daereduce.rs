//! Reduced kinematics `u = U p + D(q)`: a PCA basis plus an autoencoder
//! trained on what the basis misses.
//!
//! The encoder starts with a filter layer and the decoder ends with one, so
//! the decoder output never leaves the orthogonal complement of `U`.

use std::path::Path;

use log::info;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::densenet::{
    adam_train_with, filter_from_basis, mse, Adam, DenseNet, InitScheme, Layer, NetBuilder, TrainConfig, TrainReport,
};
use crate::diffops::{columns_to_matrix, DiffConfig, Differ};
use crate::error::{Error, Result};
use crate::mcx::Scalar;
use crate::posegen::{read_matrix, write_matrix, PoseSet};

/// Autoencoder shape. `depth` counts the `sin` hidden layers on each side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DaeArch {
    pub n_q: usize,
    pub depth: usize,
    /// Hidden width; `None` means `ceil(4·log2 N)`.
    pub width: Option<usize>,
    pub init: InitScheme,
    pub seed: u64,
}

impl Default for DaeArch {
    fn default() -> Self {
        Self {
            n_q: 4,
            depth: 6,
            width: None,
            init: InitScheme::Uniform,
            seed: 0,
        }
    }
}

impl DaeArch {
    pub fn width_for(&self, n: usize) -> usize {
        self.width
            .unwrap_or_else(|| (4.0 * (n.max(2) as f64).log2()).ceil() as usize)
    }
}

/// Generalized coordinates `r = (p, q)` and their velocities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducedState {
    pub r: Vec<f64>,
    pub rdot: Vec<f64>,
    /// Step size used to reach this state (s).
    pub dt: f64,
}

impl ReducedState {
    pub fn rest(dim: usize, dt: f64) -> Self {
        Self {
            r: vec![0.0; dim],
            rdot: vec![0.0; dim],
            dt,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.r.iter().chain(&self.rdot).all(|x| x.is_finite())
    }
}

#[derive(Clone, Debug)]
pub struct ReducedModel {
    /// `N × n_p`, orthonormal columns.
    pub basis: DMatrix<f64>,
    pub encoder: DenseNet,
    pub decoder: DenseNet,
    pub diff: DiffConfig,
    /// Singular values of the PCA, kept for reports.
    pub singular_values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    dofs: usize,
    n_p: usize,
    n_q: usize,
    eps: f64,
    basis: String,
    encoder: String,
    decoder: String,
}

const MANIFEST_FORMAT: &str = "csrom-reduced-v1";

impl ReducedModel {
    pub fn new(basis: DMatrix<f64>, encoder: DenseNet, decoder: DenseNet) -> Result<Self> {
        let n = basis.nrows();
        if decoder.output_dim() != n {
            return Err(Error::Dimension {
                expected: n,
                got: decoder.output_dim(),
                context: "decoder output",
            });
        }
        if encoder.input_dim() != n {
            return Err(Error::Dimension {
                expected: n,
                got: encoder.input_dim(),
                context: "encoder input",
            });
        }
        if encoder.output_dim() != decoder.input_dim() {
            return Err(Error::Dimension {
                expected: decoder.input_dim(),
                got: encoder.output_dim(),
                context: "latent dimension",
            });
        }
        let k = basis.ncols();
        let err = (basis.transpose() * &basis - DMatrix::identity(k, k)).norm();
        if err > 1e-8 {
            return Err(Error::NotOrthonormal(err));
        }
        Ok(Self {
            basis,
            encoder,
            decoder,
            diff: DiffConfig::default(),
            singular_values: Vec::new(),
        })
    }

    /// Reduced model whose nonlinear part is the linear map `D(q) = A q`.
    /// The encoder is the least-squares inverse of `A` on the residual.
    pub fn linear(basis: DMatrix<f64>, a: DMatrix<f64>) -> Result<Self> {
        let (n, nq) = a.shape();
        let row_major = |m: &DMatrix<f64>| -> Vec<f64> { m.transpose().iter().copied().collect() };
        let dec = DenseNet::new(vec![Layer::dense_from(nq, n, row_major(&a), vec![0.0; n])?], 0)?;
        let pinv = a
            .clone()
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::InvalidParameter(e.into()))?;
        let enc = DenseNet::new(
            vec![
                filter_from_basis(&basis)?,
                Layer::dense_from(n, nq, row_major(&pinv), vec![0.0; nq])?,
            ],
            0,
        )?;
        Self::new(basis, enc, dec)
    }

    pub fn dofs(&self) -> usize {
        self.basis.nrows()
    }

    pub fn n_p(&self) -> usize {
        self.basis.ncols()
    }

    pub fn n_q(&self) -> usize {
        self.decoder.input_dim()
    }

    pub fn dim(&self) -> usize {
        self.n_p() + self.n_q()
    }

    pub fn differ(&self) -> Differ<'_> {
        Differ::new(&self.decoder, self.diff)
    }

    pub fn split<'a, S>(&self, r: &'a [S]) -> Result<(&'a [S], &'a [S])> {
        if r.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: r.len(),
                context: "generalized coordinates",
            });
        }
        Ok(r.split_at(self.n_p()))
    }

    /// `U p` in the scalar type of `p`.
    pub fn basis_apply<S: Scalar>(&self, p: &[S]) -> Vec<S> {
        (0..self.dofs())
            .map(|i| {
                let mut acc = S::zero();
                for (k, &pk) in p.iter().enumerate() {
                    acc += pk.scale(self.basis[(i, k)]);
                }
                acc
            })
            .collect()
    }

    /// `Uᵀ a` in the scalar type of `a`.
    pub fn basis_transpose_apply<S: Scalar>(&self, a: &[S]) -> Vec<S> {
        (0..self.n_p())
            .map(|k| {
                let mut acc = S::zero();
                for (i, &ai) in a.iter().enumerate() {
                    acc += ai.scale(self.basis[(i, k)]);
                }
                acc
            })
            .collect()
    }

    /// `u = U p + D(q)`.
    pub fn full_displacement<S: Scalar>(&self, r: &[S]) -> Result<Vec<S>> {
        let (p, q) = self.split(r)?;
        let d = self.differ().value(q)?;
        Ok(self.basis_apply(p).into_iter().zip(d).map(|(a, b)| a + b).collect())
    }

    /// `J̃ = [U, J(q)]`.
    pub fn jtilde(&self, q: &[f64]) -> Result<DMatrix<f64>> {
        let j = columns_to_matrix(&self.differ().jacobian(q)?);
        let mut out = DMatrix::zeros(self.dofs(), self.dim());
        out.columns_mut(0, self.n_p()).copy_from(&self.basis);
        out.columns_mut(self.n_p(), self.n_q()).copy_from(&j);
        Ok(out)
    }

    /// `J̃ᵀ M J̃` for a diagonal mass. Fails when it is not positive definite.
    pub fn reduced_mass(&self, q: &[f64], mass: &[f64]) -> Result<DMatrix<f64>> {
        let jt = self.jtilde(q)?;
        let mj = DMatrix::from_fn(jt.nrows(), jt.ncols(), |i, j| mass[i] * jt[(i, j)]);
        let m = jt.transpose() * mj;
        if m.clone().cholesky().is_none() {
            let found = m.clone().symmetric_eigenvalues().iter().filter(|&&l| l > 0.0).count();
            return Err(Error::RankDeficient {
                needed: self.dim(),
                found,
            });
        }
        Ok(m)
    }

    /// `p = Uᵀu`, `q = E(u)`.
    pub fn encode(&self, u: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if u.len() != self.dofs() {
            return Err(Error::Dimension {
                expected: self.dofs(),
                got: u.len(),
                context: "displacement",
            });
        }
        Ok((self.basis_transpose_apply(u), self.encoder.forward_real(u)?))
    }

    /// Generalized coordinates of a fullspace displacement.
    pub fn encode_r(&self, u: &[f64]) -> Result<Vec<f64>> {
        let (mut p, q) = self.encode(u)?;
        p.extend(q);
        Ok(p)
    }

    /// Relative Frobenius error of `u ↦ full_displacement(encode(u))` over
    /// the columns of `poses`.
    pub fn reconstruction_error(&self, poses: &DMatrix<f64>) -> Result<f64> {
        let mut num = 0.0;
        for c in poses.column_iter() {
            let u: Vec<f64> = c.iter().copied().collect();
            let back = self.full_displacement(&self.encode_r(&u)?)?;
            num += u.iter().zip(&back).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        Ok((num / poses.norm_squared().max(f64::MIN_POSITIVE)).sqrt())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut sv = self.singular_values.clone();
        sv.resize(self.n_p(), 0.0);
        write_matrix(&dir.join("basis.bin"), &self.basis, &sv)?;
        self.encoder.save(&dir.join("encoder.json"))?;
        self.decoder.save(&dir.join("decoder.json"))?;
        let m = Manifest {
            format: MANIFEST_FORMAT.into(),
            dofs: self.dofs(),
            n_p: self.n_p(),
            n_q: self.n_q(),
            eps: self.diff.eps,
            basis: "basis.bin".into(),
            encoder: "encoder.json".into(),
            decoder: "decoder.json".into(),
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Format(format!("unknown reduced model format {:?}", m.format)));
        }
        let (basis, sv) = read_matrix(&dir.join(&m.basis))?;
        let enc = DenseNet::load(&dir.join(&m.encoder))?;
        let dec = DenseNet::load(&dir.join(&m.decoder))?;
        let mut rm = Self::new(basis, enc, dec)?;
        if rm.dofs() != m.dofs || rm.n_p() != m.n_p || rm.n_q() != m.n_q {
            return Err(Error::Format(
                "manifest dimensions disagree with the stored arrays".into(),
            ));
        }
        rm.diff = DiffConfig::new(m.eps)?;
        rm.singular_values = sv;
        Ok(rm)
    }
}

/// Untrained encoder/decoder pair with filters at the encoder input and the
/// decoder output. Returns the nets and the index of the first decoder layer
/// in their concatenation.
pub fn dae_nets(basis: &DMatrix<f64>, arch: &DaeArch) -> Result<(DenseNet, DenseNet)> {
    let n = basis.nrows();
    if arch.depth < 1 || arch.n_q < 1 {
        return Err(Error::InvalidParameter(
            "autoencoder needs depth ≥ 1 and n_q ≥ 1".into(),
        ));
    }
    let w = arch.width_for(n);
    let mut enc = NetBuilder::new(n, arch.seed)
        .init(arch.init)
        .layer(filter_from_basis(basis)?);
    for _ in 0..arch.depth {
        enc = enc.dense(w).sin();
    }
    let enc = enc.dense(arch.n_q).build()?;
    let mut dec = NetBuilder::new(arch.n_q, arch.seed.wrapping_add(1)).init(arch.init);
    for _ in 0..arch.depth {
        dec = dec.dense(w).sin();
    }
    let dec = dec.dense(n).layer(filter_from_basis(basis)?).build()?;
    Ok((enc, dec))
}

fn last_dense(net: &mut DenseNet) -> Option<(&mut Vec<f64>, &mut Vec<f64>, usize)> {
    net.layers_mut().iter_mut().rev().find_map(|l| match l {
        Layer::Dense {
            weight, bias, in_dim, ..
        } => Some((weight, bias, *in_dim)),
        _ => None,
    })
}

fn first_dense(net: &mut DenseNet) -> Option<(&mut Vec<f64>, &mut Vec<f64>, usize)> {
    net.layers_mut().iter_mut().find_map(|l| match l {
        Layer::Dense {
            weight, bias, in_dim, ..
        } => Some((weight, bias, *in_dim)),
        _ => None,
    })
}

/// Shifts latent and output offsets so that `E(0) = 0` and `D(0) = 0`
/// while `D(E(u)) − D(E(0))` is unchanged.
pub fn anchor_rest(enc: &mut DenseNet, dec: &mut DenseNet) -> Result<()> {
    let c = enc.forward_real(&vec![0.0; enc.input_dim()])?;
    if let Some((_, b, _)) = last_dense(enc) {
        for (bi, ci) in b.iter_mut().zip(&c) {
            *bi -= ci;
        }
    }
    if let Some((w, b, inp)) = first_dense(dec) {
        for (i, bi) in b.iter_mut().enumerate() {
            *bi += (0..inp).map(|k| w[i * inp + k] * c[k]).sum::<f64>();
        }
    }
    // Output offset, taken before the trailing filter so it stays linear.
    let nl = dec.layers().len();
    let pre = match dec.layers().last() {
        Some(Layer::Filter { .. }) => nl - 1,
        _ => nl,
    };
    let head = DenseNet::new(dec.layers()[..pre].to_vec(), dec.seed)?;
    let d0 = head.forward_real(&vec![0.0; dec.input_dim()])?;
    if let Some((_, b, _)) = last_dense(dec) {
        for (bi, di) in b.iter_mut().zip(&d0) {
            *bi -= di;
        }
    }
    Ok(())
}

/// Options beyond the architecture and optimizer settings.
#[derive(Clone, Debug, Default)]
pub struct DaeOptions {
    /// Fixed DOFs whose decoder outputs are pinned to zero.
    pub fixed_dofs: Option<Vec<bool>>,
    /// Per-pose loss weights; `None` uses the pose set's weights.
    pub weights: Option<Vec<f64>>,
    pub diff: DiffConfig,
}

/// Trains the autoencoder on the PCA residual of the poses.
///
/// Poses are divided by the RMS of their residual during training and the
/// scale is folded back into the first encoder and last decoder layers
/// afterwards, so the reported losses are relative to that RMS.
pub fn build_dae(
    ps: &PoseSet,
    basis: &DMatrix<f64>,
    arch: &DaeArch,
    cfg: &TrainConfig,
    opts: &DaeOptions,
) -> Result<(ReducedModel, TrainReport)> {
    if ps.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if ps.dofs() != basis.nrows() {
        return Err(Error::Dimension {
            expected: basis.nrows(),
            got: ps.dofs(),
            context: "pose dimension",
        });
    }
    let (mut enc, mut dec) = dae_nets(basis, arch)?;
    let resid = &ps.poses - basis * (basis.transpose() * &ps.poses);
    let rms = (resid.norm_squared() / resid.len() as f64).sqrt();
    let scale = if rms > 0.0 { rms } else { 1.0 };
    let inputs: Vec<Vec<f64>> = ps
        .poses
        .column_iter()
        .map(|c| c.iter().map(|x| x / scale).collect())
        .collect();
    let targets: Vec<Vec<f64>> = resid
        .column_iter()
        .map(|c| c.iter().map(|x| x / scale).collect())
        .collect();
    let split = enc.layers().len();
    let mut net = DenseNet::concat(&enc, &dec)?;
    if let Some(fixed) = &opts.fixed_dofs {
        let rows: Vec<usize> = (0..fixed.len()).filter(|&i| fixed[i]).collect();
        let last = net
            .layers()
            .iter()
            .rposition(|l| matches!(l, Layer::Dense { .. }))
            .ok_or_else(|| Error::InvalidParameter("decoder has no dense layer".into()))?;
        net.pin_rows(last, &rows)?;
    }
    let mut cfg = cfg.clone();
    cfg.sample_weights = Some(opts.weights.clone().unwrap_or_else(|| ps.weights.clone()));
    let mut adam = Adam::new(net.param_count());
    let report = adam_train_with(&mut net, &inputs, &cfg, &mut adam, |i, y| mse(y, &targets[i]))?;
    info!(
        "autoencoder trained: final loss {:.3e} (relative to residual RMS {scale:.3e})",
        report.losses.last().copied().unwrap_or(f64::NAN)
    );
    let (e, d) = net.split_at(split)?;
    enc = e;
    dec = d;
    if let Some((w, _, _)) = first_dense(&mut enc) {
        w.iter_mut().for_each(|x| *x /= scale);
    }
    if let Some((w, b, _)) = last_dense(&mut dec) {
        w.iter_mut().for_each(|x| *x *= scale);
        b.iter_mut().for_each(|x| *x *= scale);
    }
    anchor_rest(&mut enc, &mut dec)?;
    let meta = serde_json::json!({
        "final_loss": report.losses.last(),
        "residual_rms": scale,
        "epochs": cfg.epochs,
        "arch": arch,
    });
    enc.metadata.insert("training".into(), meta.clone());
    dec.metadata.insert("training".into(), meta);
    let mut rm = ReducedModel::new(basis.clone(), enc, dec)?;
    rm.diff = opts.diff;
    Ok((rm, report))
}

/// Largest `‖UᵀD(q)‖ / (‖D(q)‖ + 1)` over the given latent samples.
pub fn orthogonality_violation(rm: &ReducedModel, qs: &[Vec<f64>]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for q in qs {
        let d = DVector::from_vec(rm.decoder.forward_real(q)?);
        let ud = rm.basis.transpose() * &d;
        worst = worst.max(ud.norm() / (d.norm() + 1.0));
    }
    Ok(worst)
}
