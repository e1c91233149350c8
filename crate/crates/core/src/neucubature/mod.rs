//! Neural cubature: a GCN selector `S` that grows the element set and a
//! weight net `W` that predicts pose-dependent nonnegative weights, trained
//! alternately on reduced-force residuals. A greedy NNLS baseline shares the
//! training set and the error metric.

mod gcn;
mod nnls;

use std::path::Path;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use gcn::{softmax, MeshGraph, SNet, CHANNELS};
pub use nnls::{nnls, nnls_gram};

use crate::daereduce::ReducedModel;
use crate::densenet::{adam_train_with, shuffle, Adam, DenseNet, Layer, NetBuilder, TrainConfig};
use crate::elastic::{ElasticModel, TetMesh};
use crate::error::{Error, Result};
use crate::par;
use crate::rdsim::{CubatureRule, Quadrature};

/// One training pose: reduced coordinates, decoded displacement, the exact
/// reduced internal force and its per-element split (`m × E`).
#[derive(Clone, Debug)]
pub struct CubatureSample {
    pub r: Vec<f64>,
    pub u: Vec<f64>,
    pub force: DVector<f64>,
    pub elem: DMatrix<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct CubatureTrainSet {
    pub samples: Vec<CubatureSample>,
}

/// Per-element reduced forces `J̃ᵀ P f_e(u(r))` as columns, plus `u(r)`.
pub fn element_reduced_forces(rm: &ReducedModel, model: &ElasticModel, r: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let u = rm.full_displacement(r)?;
    let jt = rm.jtilde(&r[rm.n_p()..])?;
    let fixed = model.fixed_dofs();
    let mut g = DMatrix::zeros(rm.dim(), model.num_elements());
    for (e, t) in model.mesh.tets.iter().enumerate() {
        let f = model.element_force(e, &u);
        let mut col = g.column_mut(e);
        for (a, &v) in t.iter().enumerate() {
            for k in 0..3 {
                let d = 3 * v + k;
                if !fixed[d] {
                    col.axpy(f[a][k], &jt.row(d).transpose(), 1.0);
                }
            }
        }
    }
    Ok((u, g))
}

impl CubatureTrainSet {
    /// Encodes each pose column, decodes it back and records the forces.
    /// Poses whose reduced force vanishes (the rest pose) carry no
    /// information for a relative metric and are skipped.
    pub fn from_poses(rm: &ReducedModel, model: &ElasticModel, poses: &DMatrix<f64>) -> Result<Self> {
        if poses.nrows() != rm.dofs() {
            return Err(Error::Dimension {
                expected: rm.dofs(),
                got: poses.nrows(),
                context: "pose matrix",
            });
        }
        let raw = par::map_range(poses.ncols(), |t| -> Result<CubatureSample> {
            let col: Vec<f64> = poses.column(t).iter().copied().collect();
            let r = rm.encode_r(&col)?;
            let (u, elem) = element_reduced_forces(rm, model, &r)?;
            let force = elem.column_sum();
            Ok(CubatureSample { r, u, force, elem })
        });
        let raw: Vec<CubatureSample> = raw.into_iter().collect::<Result<_>>()?;
        let top = raw.iter().map(|s| s.force.norm()).fold(0.0, f64::max);
        let samples: Vec<_> = raw.into_iter().filter(|s| s.force.norm() > 1e-10 * top).collect();
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.samples.first().map_or(0, |s| s.elem.ncols())
    }

    /// Deterministic shuffled split into (train, held-out).
    pub fn split(&self, held_fraction: f64, seed: u64) -> (Self, Self) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        shuffle(&mut idx, &mut ChaCha8Rng::seed_from_u64(seed));
        let held = ((self.len() as f64 * held_fraction).round() as usize).min(self.len());
        let pick = |ids: &[usize]| Self {
            samples: ids.iter().map(|&i| self.samples[i].clone()).collect(),
        };
        (pick(&idx[held..]), pick(&idx[..held]))
    }

    /// Mean over samples of `‖f̃ − Σ w_e f̃_e‖ / ‖f̃‖`, with `weights`
    /// returning a full-length (already masked) weight vector.
    pub fn relative_error(&self, weights: impl Fn(&CubatureSample) -> Result<Vec<f64>> + Sync) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let errs = par::map(&self.samples, |s| -> Result<f64> {
            let w = DVector::from_vec(weights(s)?);
            Ok((&s.force - &s.elem * w).norm() / s.force.norm())
        });
        let mut sum = 0.0;
        for e in errs {
            sum += e?;
        }
        Ok(sum / self.len() as f64)
    }
}

/// Full-length weight vector with only the listed elements nonzero.
pub fn masked(num_elements: usize, elements: &[usize], weights: &[f64]) -> Vec<f64> {
    let mut w = vec![0.0; num_elements];
    for (&e, &x) in elements.iter().zip(weights) {
        w[e] = x;
    }
    w
}

/// Adds the `k` highest-scoring elements not in `current`, ties to the
/// lower id. Returns all remaining elements when fewer than `k` are left.
pub fn select_topk(current: &[usize], scores: &[f64], k: usize) -> Vec<usize> {
    let mut member = vec![false; scores.len()];
    for &e in current {
        member[e] = true;
    }
    let mut cand: Vec<usize> = (0..scores.len()).filter(|&e| !member[e]).collect();
    cand.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut out = current.to_vec();
    out.extend(cand.into_iter().take(k));
    out
}

/// Farthest-point sampling over element centroids, seeded by the element
/// farthest from the mesh's center of mass.
pub fn farthest_elements(mesh: &TetMesh, count: usize) -> Vec<usize> {
    let ne = mesh.tets.len();
    let count = count.min(ne);
    if count == 0 {
        return Vec::new();
    }
    let cents: Vec<[f64; 3]> = (0..ne).map(|e| mesh.centroid(e)).collect();
    let mut mid = [0.0; 3];
    for c in &cents {
        for k in 0..3 {
            mid[k] += c[k] / ne as f64;
        }
    }
    let d2 = |a: &[f64; 3], b: &[f64; 3]| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>();
    let first = (0..ne).max_by(|&a, &b| d2(&cents[a], &mid).total_cmp(&d2(&cents[b], &mid)).then(b.cmp(&a)));
    let mut out = vec![first.unwrap_or(0)];
    let mut dist: Vec<f64> = cents.iter().map(|c| d2(c, &cents[out[0]])).collect();
    while out.len() < count {
        let next = (0..ne)
            .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
            .unwrap_or(0);
        out.push(next);
        for e in 0..ne {
            dist[e] = dist[e].min(d2(&cents[e], &cents[next]));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CubatureConfig {
    /// Elements added per alternation.
    pub k: usize,
    /// Number of selection rounds.
    pub rounds: usize,
    /// Size of the farthest-point starting set.
    pub init_size: usize,
    pub epochs_w: usize,
    pub epochs_s: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Hidden width of the weight net.
    pub width: usize,
    pub seed: u64,
}

impl Default for CubatureConfig {
    fn default() -> Self {
        Self {
            k: 5,
            rounds: 10,
            init_size: 5,
            epochs_w: 15,
            epochs_s: 15,
            learning_rate: 1e-3,
            batch_size: 16,
            width: 32,
            seed: 0,
        }
    }
}

impl CubatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.init_size == 0 || self.width == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParameter(
                "k, init_size, width and batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidParameter("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// A trained neural cubature rule.
#[derive(Clone, Debug)]
pub struct CubatureModel {
    pub elements: Vec<usize>,
    pub snet: SNet,
    pub wnet: DenseNet,
    pub k: usize,
    /// Inputs to both nets are displacements divided by this (m).
    pub input_scale: f64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    elements: Vec<usize>,
    k: usize,
    input_scale: f64,
    num_elements: usize,
}

const FORMAT: &str = "csrom-cubature-v1";

/// `u → 3 × (FC, sin) → FC → square`, one output per element. The last
/// layer starts at zero weight and unit bias, i.e. uniform unit weights.
pub fn weight_net(dofs: usize, num_elements: usize, width: usize, seed: u64) -> Result<DenseNet> {
    let mut net = NetBuilder::new(dofs, seed)
        .dense(width)
        .sin()
        .dense(width)
        .sin()
        .dense(width)
        .sin()
        .dense(num_elements)
        .square()
        .build()?;
    let n = net.layers().len();
    if let Layer::Dense { weight, bias, .. } = &mut net.layers_mut()[n - 2] {
        weight.fill(0.0);
        bias.fill(1.0);
    }
    Ok(net)
}

impl CubatureModel {
    pub fn num_elements(&self) -> usize {
        self.wnet.output_dim()
    }

    fn scaled(&self, u: &[f64]) -> Vec<f64> {
        u.iter().map(|x| x / self.input_scale).collect()
    }

    /// Raw weight-net output for all elements.
    pub fn all_weights(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.wnet.forward_real(&self.scaled(u))
    }

    /// Weights of the cubature elements, in `elements` order.
    pub fn weights(&self, u: &[f64]) -> Result<Vec<f64>> {
        let w = self.all_weights(u)?;
        Ok(self.elements.iter().map(|&e| w[e]).collect())
    }

    pub fn masked_weights(&self, u: &[f64]) -> Result<Vec<f64>> {
        Ok(masked(self.num_elements(), &self.elements, &self.weights(u)?))
    }

    /// Weights at reduced coordinates `r`, decoding through `rm`.
    pub fn weights_at(&self, rm: &ReducedModel, r: &[f64]) -> Result<Vec<f64>> {
        self.weights(&rm.full_displacement(r)?)
    }

    pub fn scores(&self, graph: &MeshGraph, u: &[f64]) -> Result<Vec<f64>> {
        Ok(self.snet.forward(graph, &self.scaled(u))?.scores)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let m = Manifest {
            format: FORMAT.into(),
            elements: self.elements.clone(),
            k: self.k,
            input_scale: self.input_scale,
            num_elements: self.num_elements(),
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m)?)?;
        std::fs::write(dir.join("snet.json"), serde_json::to_string(&self.snet)?)?;
        self.wnet.save(&dir.join("wnet.json"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        if m.format != FORMAT {
            return Err(Error::Format(format!("unexpected cubature format {:?}", m.format)));
        }
        let snet: SNet = serde_json::from_str(&std::fs::read_to_string(dir.join("snet.json"))?)?;
        if snet.params().len() != SNet::zeros().param_count() {
            return Err(Error::Format("selector parameter count".into()));
        }
        let wnet = DenseNet::load(&dir.join("wnet.json"))?;
        if wnet.output_dim() != m.num_elements || m.elements.iter().any(|&e| e >= m.num_elements) {
            return Err(Error::Format("cubature element ids out of range".into()));
        }
        let mut seen = m.elements.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != m.elements.len() {
            return Err(Error::Format("duplicate cubature elements".into()));
        }
        if !(m.input_scale > 0.0) {
            return Err(Error::Format("input scale must be positive".into()));
        }
        Ok(Self {
            elements: m.elements,
            snet,
            wnet,
            k: m.k,
            input_scale: m.input_scale,
        })
    }
}

/// Approximate reduced force and stiffness `J̃ᵀ P f` and `J̃ᵀ P K J̃`
/// integrated over the cubature elements only.
pub fn cubature_integrate(
    cm: &CubatureModel,
    rm: &ReducedModel,
    model: &ElasticModel,
    r: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let u = rm.full_displacement(r)?;
    let w = cm.weights(&u)?;
    weighted_reduced(rm, model, r, &u, &cm.elements, &w)
}

fn weighted_reduced(
    rm: &ReducedModel,
    model: &ElasticModel,
    r: &[f64],
    u: &[f64],
    elements: &[usize],
    w: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let jt = rm.jtilde(&r[rm.n_p()..])?;
    let mut jt_free = jt.clone();
    for (i, &f) in model.fixed_dofs().iter().enumerate() {
        if f {
            jt_free.row_mut(i).fill(0.0);
        }
    }
    let f = DVector::from_vec(model.weighted_internal_force(u, elements, w)?);
    let k = model.weighted_stiffness(u, elements, w)?;
    let mut kj = DMatrix::zeros(jt.nrows(), jt.ncols());
    for c in 0..jt.ncols() {
        let y = k.mul_vec(jt_free.column(c).as_slice());
        kj.column_mut(c).copy_from_slice(&y);
    }
    Ok((jt_free.transpose() * f, jt_free.transpose() * kj))
}

/// Cubature rule for the simulator, querying `W` at the decoded pose.
pub struct NeuralRule<'a> {
    pub cm: &'a CubatureModel,
    pub rm: &'a ReducedModel,
}

impl CubatureRule for NeuralRule<'_> {
    fn quadrature(&self, r: &[f64]) -> Result<Quadrature> {
        Ok(Quadrature::Weighted {
            elements: self.cm.elements.clone(),
            weights: self.cm.weights_at(self.rm, r)?,
        })
    }
}

impl CubatureRule for Quadrature {
    fn quadrature(&self, _r: &[f64]) -> Result<Quadrature> {
        Ok(self.clone())
    }
}

/// Per-round diagnostics of [`train_alternating`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub size: usize,
    /// Mean relative residual after the W phase.
    pub loss_w: f64,
    /// Mean selector loss after the S phase, absent on the last round.
    pub loss_s: Option<f64>,
}

fn input_scale(ts: &CubatureTrainSet) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for s in &ts.samples {
        sum += s.u.iter().map(|x| x * x).sum::<f64>();
        n += s.u.len();
    }
    let rms = (sum / n.max(1) as f64).sqrt();
    if rms > 0.0 && rms.is_finite() {
        rms
    } else {
        1.0
    }
}

/// Best constant nonnegative weights for the current set on per-sample
/// normalized forces, the same fit the greedy baseline solves.
fn constant_weights(elements: &[usize], ts: &CubatureTrainSet) -> Result<DVector<f64>> {
    let k = elements.len();
    let parts = par::map(&ts.samples, |s| {
        let inv = 1.0 / s.force.norm();
        let a = s.elem.select_columns(elements) * inv;
        let b = &s.force * inv;
        (a.transpose() * &a, a.transpose() * b)
    });
    let mut g = DMatrix::zeros(k, k);
    let mut c = DVector::zeros(k);
    for (gi, ci) in parts {
        g += gi;
        c += ci;
    }
    nnls_gram(&g, &c, None)
}

/// Resets `W` to output the constant weights `w` on the set: last-layer
/// rows of members are zeroed and their biases set to `sqrt(w)`.
fn set_constant_weights(cm: &mut CubatureModel, w: &DVector<f64>) {
    let elements = cm.elements.clone();
    if let Some(Layer::Dense {
        weight, bias, in_dim, ..
    }) = cm
        .wnet
        .layers_mut()
        .iter_mut()
        .rev()
        .find(|l| matches!(l, Layer::Dense { .. }))
    {
        let n_in = *in_dim;
        for (i, &e) in elements.iter().enumerate() {
            weight[e * n_in..(e + 1) * n_in].iter_mut().for_each(|x| *x = 0.0);
            bias[e] = w[i].sqrt();
        }
    }
}

fn train_w(
    cm: &mut CubatureModel,
    ts: &CubatureTrainSet,
    cfg: &CubatureConfig,
    adam: &mut Adam,
    round: usize,
) -> Result<f64> {
    let ne = cm.num_elements();
    let mut member = vec![0.0; ne];
    for &e in &cm.elements {
        member[e] = 1.0;
    }
    let inputs: Vec<Vec<f64>> = ts.samples.iter().map(|s| cm.scaled(&s.u)).collect();
    let tc = TrainConfig {
        learning_rate: cfg.learning_rate,
        schedule: Vec::new(),
        epochs: cfg.epochs_w,
        batch_size: cfg.batch_size,
        sample_weights: None,
        seed: cfg.seed.wrapping_add(round as u64),
    };
    let loss = |i: usize, y: &[f64]| -> (f64, Vec<f64>) {
        let s = &ts.samples[i];
        let w = DVector::from_iterator(ne, y.iter().zip(&member).map(|(a, m)| a * m));
        let res = &s.force - &s.elem * w;
        let (rn, fnorm) = (res.norm(), s.force.norm());
        if rn == 0.0 {
            return (0.0, vec![0.0; ne]);
        }
        let g = s.elem.transpose() * res * (-1.0 / (rn * fnorm));
        (rn / fnorm, g.iter().zip(&member).map(|(a, m)| a * m).collect())
    };
    if cfg.epochs_w > 0 {
        adam_train_with(&mut cm.wnet, &inputs, &tc, adam, loss)?;
    }
    ts.relative_error(|s| cm.masked_weights(&s.u))
}

/// Selector loss for one sample: the residual force fitted by the scores of
/// non-members, with the best scalar multiplier.
fn selector_loss(scores: &[f64], member: &[bool], elem: &DMatrix<f64>, resid: &DVector<f64>) -> (f64, Vec<f64>) {
    let ne = scores.len();
    let rn = resid.norm();
    if rn == 0.0 {
        return (0.0, vec![0.0; ne]);
    }
    let s = DVector::from_iterator(ne, scores.iter().zip(member).map(|(x, &m)| if m { 0.0 } else { *x }));
    let g = elem * s;
    let gg = g.norm_squared();
    let beta = if gg > 0.0 { resid.dot(&g) / gg } else { 0.0 };
    let e = resid - &g * beta;
    let en = e.norm();
    if en == 0.0 {
        return (0.0, vec![0.0; ne]);
    }
    // β is optimal, so only the explicit dependence on g contributes
    let dg = &e * (-beta / (en * rn));
    let ds = elem.transpose() * dg;
    let grad = ds.iter().zip(member).map(|(x, &m)| if m { 0.0 } else { *x }).collect();
    (en / rn, grad)
}

fn train_s(
    cm: &mut CubatureModel,
    graph: &MeshGraph,
    ts: &CubatureTrainSet,
    cfg: &CubatureConfig,
    adam: &mut Adam,
    round: usize,
) -> Result<f64> {
    let ne = cm.num_elements();
    let mut member = vec![false; ne];
    for &e in &cm.elements {
        member[e] = true;
    }
    let resid: Vec<DVector<f64>> = par::map(&ts.samples, |s| -> Result<DVector<f64>> {
        Ok(&s.force - &s.elem * DVector::from_vec(cm.masked_weights(&s.u)?))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let inputs: Vec<Vec<f64>> = ts.samples.iter().map(|s| cm.scaled(&s.u)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1 << 32).wrapping_add(round as u64));
    let mut order: Vec<usize> = (0..ts.len()).collect();
    let mut params = cm.snet.params();
    let mut last = f64::NAN;
    for epoch in 0..cfg.epochs_s {
        shuffle(&mut order, &mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let snet = &cm.snet;
            let parts = par::map(batch, |&i| -> Result<(f64, Vec<f64>)> {
                let cache = snet.forward(graph, &inputs[i])?;
                let (l, ds) = selector_loss(&cache.scores, &member, &ts.samples[i].elem, &resid[i]);
                Ok((l, snet.backward(graph, &cache, &ds)))
            });
            let mut grad = vec![0.0; params.len()];
            for p in parts {
                let (l, g) = p?;
                total += l;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            adam.step(&mut params, &grad, cfg.learning_rate);
            cm.snet.set_params(&params)?;
        }
        last = total / ts.len() as f64;
        if !last.is_finite() {
            return Err(Error::TrainingDiverged { epoch, loss: last });
        }
    }
    Ok(last)
}

/// Mean selector scores over the training poses.
fn mean_scores(cm: &CubatureModel, graph: &MeshGraph, ts: &CubatureTrainSet) -> Result<Vec<f64>> {
    let all = par::map(&ts.samples, |s| cm.scores(graph, &s.u));
    let mut mean = vec![0.0; cm.num_elements()];
    for s in all {
        for (m, v) in mean.iter_mut().zip(s?) {
            *m += v / ts.len() as f64;
        }
    }
    Ok(mean)
}

/// Alternates `W` and `S` training, growing the set by `cfg.k` per round.
/// `on_round` sees the model after each W phase, before the next selection.
pub fn train_alternating(
    model: &ElasticModel,
    ts: &CubatureTrainSet,
    cfg: &CubatureConfig,
    mut on_round: impl FnMut(&CubatureModel, &RoundReport),
) -> Result<(CubatureModel, Vec<RoundReport>)> {
    cfg.validate()?;
    if ts.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let ne = model.num_elements();
    if ts.num_elements() != ne || ts.samples[0].u.len() != model.dofs() {
        return Err(Error::Dimension {
            expected: ne,
            got: ts.num_elements(),
            context: "cubature training set",
        });
    }
    let graph = MeshGraph::new(&model.mesh);
    let mut cm = CubatureModel {
        elements: farthest_elements(&model.mesh, cfg.init_size),
        snet: SNet::new(cfg.seed),
        wnet: weight_net(model.dofs(), ne, cfg.width, cfg.seed.wrapping_add(1))?,
        k: cfg.k,
        input_scale: input_scale(ts),
    };
    let mut adam_s = Adam::new(cm.snet.param_count());
    let mut reports = Vec::new();
    for round in 0..=cfg.rounds {
        // W starts every round from the constant optimum for the new set and
        // keeps what it learns only if that beats the constant rule
        let w0 = constant_weights(&cm.elements, ts)?;
        set_constant_weights(&mut cm, &w0);
        let start = cm.wnet.clone();
        let loss_0 = ts.relative_error(|s| cm.masked_weights(&s.u))?;
        let mut adam_w = Adam::new(cm.wnet.param_count());
        let mut loss_w = train_w(&mut cm, ts, cfg, &mut adam_w, round)?;
        if !(loss_w <= loss_0) {
            cm.wnet = start;
            loss_w = loss_0;
        }
        let mut rep = RoundReport {
            size: cm.elements.len(),
            loss_w,
            loss_s: None,
        };
        on_round(&cm, &rep);
        if round == cfg.rounds || cm.elements.len() == ne {
            reports.push(rep);
            break;
        }
        rep.loss_s = Some(train_s(&mut cm, &graph, ts, cfg, &mut adam_s, round)?);
        let scores = mean_scores(&cm, &graph, ts)?;
        cm.elements = select_topk(&cm.elements, &scores, cfg.k);
        info!("cubature round {round}: |C| = {}, L_W = {loss_w:.4}", rep.size);
        reports.push(rep);
    }
    Ok((cm, reports))
}

/// Greedy residual-matching selection with NNLS weights on per-sample
/// normalized forces. `on_size` sees every intermediate `(C, w)`.
pub fn greedy_cubature_with(
    ts: &CubatureTrainSet,
    target_size: usize,
    mut on_size: impl FnMut(&[usize], &[f64]),
) -> Result<(Vec<usize>, Vec<f64>)> {
    if ts.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let ne = ts.num_elements();
    if target_size > ne {
        return Err(Error::InvalidParameter(format!(
            "target size {target_size} exceeds {ne} elements"
        )));
    }
    let inv: Vec<f64> = ts.samples.iter().map(|s| 1.0 / s.force.norm()).collect();
    // ‖A_e‖² and Aᵀb over the stacked, normalized system
    let mut col_norm = vec![0.0; ne];
    let mut atb = vec![0.0; ne];
    for (s, &k) in ts.samples.iter().zip(&inv) {
        let tb = s.elem.transpose() * &s.force;
        for e in 0..ne {
            col_norm[e] += s.elem.column(e).norm_squared() * k * k;
            atb[e] += tb[e] * k * k;
        }
    }
    let col_norm: Vec<f64> = col_norm.into_iter().map(f64::sqrt).collect();
    let mut chosen: Vec<usize> = Vec::new();
    let mut member = vec![false; ne];
    let mut gram = DMatrix::<f64>::zeros(0, 0);
    let mut w = DVector::<f64>::zeros(0);
    while chosen.len() < target_size {
        // correlation of every column with the current residual
        let mut corr = vec![0.0; ne];
        for (s, &k) in ts.samples.iter().zip(&inv) {
            let mut res = &s.force * k;
            for (j, &e) in chosen.iter().enumerate() {
                res.axpy(-w[j] * k, &s.elem.column(e), 1.0);
            }
            let c = s.elem.transpose() * res;
            for e in 0..ne {
                corr[e] += c[e] * k;
            }
        }
        let pick = (0..ne)
            .filter(|&e| !member[e] && col_norm[e] > 0.0)
            .max_by(|&a, &b| {
                (corr[a] / col_norm[a])
                    .total_cmp(&(corr[b] / col_norm[b]))
                    .then(b.cmp(&a))
            })
            .or_else(|| (0..ne).find(|&e| !member[e]));
        let Some(e) = pick else { break };
        let n = chosen.len();
        let mut g = gram.clone().resize(n + 1, n + 1, 0.0);
        for (j, &c) in chosen.iter().chain(std::iter::once(&e)).enumerate() {
            let v: f64 = ts
                .samples
                .iter()
                .zip(&inv)
                .map(|(s, &k)| s.elem.column(c).dot(&s.elem.column(e)) * k * k)
                .sum();
            g[(j, n)] = v;
            g[(n, j)] = v;
        }
        gram = g;
        chosen.push(e);
        member[e] = true;
        let c = DVector::from_iterator(n + 1, chosen.iter().map(|&e| atb[e]));
        let start = w.clone().resize_vertically(n + 1, 0.0);
        w = nnls_gram(&gram, &c, Some(&start))?;
        on_size(&chosen, w.as_slice());
    }
    if chosen.len() < target_size {
        warn!("greedy cubature stopped at {} elements", chosen.len());
    }
    Ok((chosen, w.iter().copied().collect()))
}

pub fn greedy_cubature(ts: &CubatureTrainSet, target_size: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    greedy_cubature_with(ts, target_size, |_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::daereduce::{anchor_rest, dae_nets, DaeArch};
    use crate::elastic::Material;
    use rand::Rng;

    fn setup() -> (ElasticModel, ReducedModel, DMatrix<f64>) {
        let mesh = TetMesh::bar([4, 1, 1], [0.4, 0.1, 0.1]).unwrap();
        let mut m = ElasticModel::new(mesh, Material::default()).unwrap();
        let fixed = m.mesh.vertices_where(|p| p[0] < 1e-9);
        m.fix_vertices(&fixed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let free = m.free_mask();
        let u = DMatrix::from_fn(m.dofs(), 3, |i, _| if free[i] { rng.gen_range(-1.0..1.0) } else { 0.0 })
            .qr()
            .q();
        let arch = DaeArch {
            n_q: 2,
            depth: 1,
            width: Some(6),
            seed: 1,
            ..Default::default()
        };
        let (mut e, mut d) = dae_nets(&u, &arch).unwrap();
        let rows: Vec<usize> = (0..m.dofs()).filter(|&i| !free[i]).collect();
        let last = d.layers().len() - 2;
        d.pin_rows(last, &rows).unwrap();
        if let Layer::Dense { weight, bias, .. } = &mut d.layers_mut()[last] {
            weight.iter_mut().for_each(|x| *x *= 0.01);
            bias.iter_mut().for_each(|x| *x *= 0.01);
        }
        anchor_rest(&mut e, &mut d).unwrap();
        let rm = ReducedModel::new(u, e, d).unwrap();
        let poses = DMatrix::from_fn(m.dofs(), 24, |_, _| 0.0);
        let mut poses = poses;
        for t in 0..24 {
            let r: Vec<f64> = (0..rm.dim()).map(|_| rng.gen_range(-0.02..0.02)).collect();
            let x = rm.full_displacement(&r).unwrap();
            poses.column_mut(t).copy_from_slice(&x);
        }
        (m, rm, poses)
    }

    #[test]
    fn element_forces_sum_to_reduced_force() {
        let (m, rm, poses) = setup();
        let ts = CubatureTrainSet::from_poses(&rm, &m, &poses).unwrap();
        let s = &ts.samples[0];
        let f = DVector::from_vec(m.internal_force(&s.u).unwrap());
        let jt = rm.jtilde(&s.r[rm.n_p()..]).unwrap();
        let exact = jt.transpose() * f;
        assert!((&s.force - &exact).norm() <= 1e-10 * exact.norm());
        let all: Vec<usize> = (0..m.num_elements()).collect();
        let ones = vec![1.0; all.len()];
        let (fc, kc) = weighted_reduced(&rm, &m, &s.r, &s.u, &all, &ones).unwrap();
        assert!((&fc - &exact).norm() <= 1e-10 * exact.norm());
        assert!((&kc - kc.transpose()).norm() <= 1e-9 * kc.norm());
        assert!(ts.relative_error(|_| Ok(ones.clone())).unwrap() < 1e-10);
        assert!((ts.relative_error(|_| Ok(vec![0.0; all.len()])).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn topk_selection_rules() {
        let s = [0.1, 0.5, 0.5, 0.3, 0.9];
        assert_eq!(select_topk(&[], &s, 2), vec![4, 1]);
        assert_eq!(select_topk(&[4], &s, 2), vec![4, 1, 2]);
        assert_eq!(select_topk(&[0, 1, 2], &s, 5), vec![0, 1, 2, 4, 3]);
        assert_eq!(select_topk(&[], &s, 5).len(), 5);
    }

    #[test]
    fn farthest_points_are_distinct() {
        let mesh = TetMesh::bar([4, 2, 2], [0.4, 0.2, 0.2]).unwrap();
        let c = farthest_elements(&mesh, 10);
        let mut d = c.clone();
        d.sort();
        d.dedup();
        assert_eq!(d.len(), 10);
        assert_eq!(farthest_elements(&mesh, 10), c);
    }

    fn toy_set(cols: &[[f64; 2]]) -> CubatureTrainSet {
        let elem = DMatrix::from_fn(2, cols.len(), |i, j| cols[j][i]);
        CubatureTrainSet {
            samples: vec![CubatureSample {
                r: vec![0.0; 2],
                u: vec![],
                force: elem.column_sum(),
                elem,
            }],
        }
    }

    #[test]
    fn greedy_picks_the_loaded_element() {
        let ts = toy_set(&[[0.0, 0.0], [1.0, 2.0]]);
        let (c, w) = greedy_cubature(&ts, 1).unwrap();
        assert_eq!(c, vec![1]);
        assert!((w[0] - 1.0).abs() < 1e-12);
        assert!(greedy_cubature(&ts, 3).is_err());
    }

    #[test]
    fn greedy_error_is_monotone_and_weights_nonnegative() {
        let (m, rm, poses) = setup();
        let ts = CubatureTrainSet::from_poses(&rm, &m, &poses).unwrap();
        let ne = ts.num_elements();
        let mut errs = Vec::new();
        greedy_cubature_with(&ts, 12, |c, w| {
            assert!(w.iter().all(|&x| x >= 0.0));
            errs.push(ts.relative_error(|_| Ok(masked(ne, c, w))).unwrap());
        })
        .unwrap();
        assert_eq!(errs.len(), 12);
        for p in errs.windows(2) {
            assert!(p[1] <= p[0] * (1.0 + 1e-9) + 1e-12, "{errs:?}");
        }
    }

    #[test]
    fn weight_net_is_nonnegative_and_zero_layer_silences_it() {
        let mut net = weight_net(12, 7, 8, 3).unwrap();
        assert!(net.forward_real(&[0.3; 12]).unwrap().iter().all(|&w| w == 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: Vec<f64> = (0..net.param_count()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        net.set_params(&p).unwrap();
        for _ in 0..200 {
            let x: Vec<f64> = (0..12).map(|_| rng.gen_range(-5.0..5.0)).collect();
            assert!(net.forward_real(&x).unwrap().iter().all(|&w| w >= 0.0));
        }
        let n = net.layers().len();
        if let Layer::Dense { weight, bias, .. } = &mut net.layers_mut()[n - 2] {
            weight.fill(0.0);
            bias.fill(0.0);
        }
        assert!(net.forward_real(&[0.3; 12]).unwrap().iter().all(|&w| w == 0.0));
    }

    #[test]
    fn selector_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let elem = DMatrix::from_fn(3, 6, |_, _| rng.gen_range(-1.0..1.0));
        let resid = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
        let member = [false, true, false, false, true, false];
        let s: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
        let (_, g) = selector_loss(&s, &member, &elem, &resid);
        for k in 0..6 {
            let mut p = s.clone();
            p[k] += 1e-6;
            let lp = selector_loss(&p, &member, &elem, &resid).0;
            p[k] -= 2e-6;
            let lm = selector_loss(&p, &member, &elem, &resid).0;
            assert!(((lp - lm) / 2e-6 - g[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn alternating_training_grows_the_set() {
        let (m, rm, poses) = setup();
        let ts = CubatureTrainSet::from_poses(&rm, &m, &poses).unwrap();
        let cfg = CubatureConfig {
            k: 3,
            rounds: 2,
            init_size: 2,
            epochs_w: 5,
            epochs_s: 3,
            width: 8,
            ..Default::default()
        };
        let mut sizes = Vec::new();
        let (cm, reps) = train_alternating(&m, &ts, &cfg, |c, _| sizes.push(c.elements.len())).unwrap();
        assert_eq!(sizes, vec![2, 5, 8]);
        assert_eq!(reps.len(), 3);
        assert_eq!(cm.elements.len(), 8);
        let mut d = cm.elements.clone();
        d.sort();
        d.dedup();
        assert_eq!(d.len(), 8);
        let none = CubatureConfig {
            rounds: 0,
            ..cfg.clone()
        };
        let (c0, _) = train_alternating(&m, &ts, &none, |_, _| {}).unwrap();
        assert_eq!(c0.elements, farthest_elements(&m.mesh, 2));

        let dir = tempfile::tempdir().unwrap();
        cm.save(dir.path()).unwrap();
        let back = CubatureModel::load(dir.path()).unwrap();
        assert_eq!(back.elements, cm.elements);
        let u = &ts.samples[0].u;
        assert_eq!(back.weights(u).unwrap(), cm.weights(u).unwrap());
        let (f, _) = cubature_integrate(&back, &rm, &m, &ts.samples[0].r).unwrap();
        let w = DVector::from_vec(cm.masked_weights(u).unwrap());
        assert!((f - &ts.samples[0].elem * w).norm() <= 1e-10 * ts.samples[0].force.norm());
    }

    #[test]
    fn full_set_capacity() {
        let (m, rm, poses) = setup();
        let ts = CubatureTrainSet::from_poses(&rm, &m, &poses).unwrap();
        let cfg = CubatureConfig {
            rounds: 0,
            init_size: m.num_elements(),
            epochs_w: 300,
            width: 8,
            ..Default::default()
        };
        let (_, reps) = train_alternating(&m, &ts, &cfg, |_, _| {}).unwrap();
        assert!(reps[0].loss_w <= 1e-3, "{reps:?}");
    }
}
