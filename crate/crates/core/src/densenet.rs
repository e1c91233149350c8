//! Dense feed-forward networks that run over real or multicomplex scalars.
//!
//! Layers are fully connected (`W x + b`), fixed projection filters
//! (`(I - U Uᵀ) x`), or elementwise/softmax activations. The forward pass is
//! generic over [`Scalar`]; [`DenseNet::forward_mc`] is the batched
//! multicomplex path used for complex-step passes, which applies each real
//! weight matrix to every imaginary part independently.
//!
//! Reverse passes are generic as well: running them over order-1 complex
//! numbers gives a complex-step perturbed gradient (see `diffops::vhp`).

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcx::{MultiComplex, Scalar};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    FullyConnected,
    Filter,
    ActivationSin,
    ActivationSoftmax,
    ActivationSquare,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    pub trainable: bool,
}

/// Weight initialization rule for fully connected layers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub enum InitScheme {
    /// Uniform in `±sqrt(6 / fan_in)`.
    #[default]
    Uniform,
    /// Uniform in `±sqrt(6 / fan_in) / omega` for every layer except the
    /// first, which uses `±1 / fan_in`. Keeps `sin` pre-activations in a
    /// single period for deep stacks.
    SinScaled { omega: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense {
        in_dim: usize,
        out_dim: usize,
        /// Row-major `out_dim × in_dim`.
        weight: Vec<f64>,
        bias: Vec<f64>,
        /// Output rows held at zero and excluded from training.
        pinned_rows: Vec<usize>,
    },
    Filter {
        dim: usize,
        rank: usize,
        /// Row-major `dim × rank` orthonormal basis `U`.
        basis: Vec<f64>,
    },
    Sin {
        dim: usize,
    },
    Softmax {
        dim: usize,
    },
    Square {
        dim: usize,
    },
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        match *self {
            Layer::Dense { in_dim, out_dim, .. } => LayerSpec {
                kind: LayerKind::FullyConnected,
                in_dim,
                out_dim,
                trainable: true,
            },
            Layer::Filter { dim, .. } => LayerSpec {
                kind: LayerKind::Filter,
                in_dim: dim,
                out_dim: dim,
                trainable: false,
            },
            Layer::Sin { dim } => LayerSpec {
                kind: LayerKind::ActivationSin,
                in_dim: dim,
                out_dim: dim,
                trainable: false,
            },
            Layer::Softmax { dim } => LayerSpec {
                kind: LayerKind::ActivationSoftmax,
                in_dim: dim,
                out_dim: dim,
                trainable: false,
            },
            Layer::Square { dim } => LayerSpec {
                kind: LayerKind::ActivationSquare,
                in_dim: dim,
                out_dim: dim,
                trainable: false,
            },
        }
    }

    fn param_count(&self) -> usize {
        match self {
            Layer::Dense { in_dim, out_dim, .. } => out_dim * (in_dim + 1),
            _ => 0,
        }
    }

    /// Fully connected layer with the given init rule.
    pub fn dense(in_dim: usize, out_dim: usize, scheme: InitScheme, first: bool, rng: &mut impl Rng) -> Layer {
        let bound = match scheme {
            InitScheme::Uniform => (6.0 / in_dim as f64).sqrt(),
            InitScheme::SinScaled { omega } => {
                if first {
                    1.0 / in_dim as f64
                } else {
                    (6.0 / in_dim as f64).sqrt() / omega
                }
            }
        };
        let weight = (0..in_dim * out_dim).map(|_| rng.gen_range(-bound..bound)).collect();
        Layer::Dense {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
            pinned_rows: Vec::new(),
        }
    }

    /// Dense layer with explicit weights (row-major) and bias.
    pub fn dense_from(in_dim: usize, out_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Layer> {
        if weight.len() != in_dim * out_dim {
            return Err(Error::Dimension {
                expected: in_dim * out_dim,
                got: weight.len(),
                context: "dense weight",
            });
        }
        if bias.len() != out_dim {
            return Err(Error::Dimension {
                expected: out_dim,
                got: bias.len(),
                context: "dense bias",
            });
        }
        Ok(Layer::Dense {
            in_dim,
            out_dim,
            weight,
            bias,
            pinned_rows: Vec::new(),
        })
    }
}

/// Fixed projection layer `x ↦ (I − U Uᵀ) x` removing the span of `U`.
///
/// The layer is applied as `x − U (Uᵀ x)`, which is the same linear map as
/// the dense weight `δᵢⱼ − Σₖ Uᵢₖ Uⱼₖ` (see [`filter_weight_matrix`]).
pub fn filter_from_basis(u: &DMatrix<f64>) -> Result<Layer> {
    let (n, k) = u.shape();
    let gram = u.transpose() * u;
    let err = (gram - DMatrix::identity(k, k)).norm();
    if err > 1e-8 || !err.is_finite() {
        return Err(Error::NotOrthonormal(err));
    }
    let mut basis = Vec::with_capacity(n * k);
    for i in 0..n {
        for j in 0..k {
            basis.push(u[(i, j)]);
        }
    }
    Ok(Layer::Filter { dim: n, rank: k, basis })
}

/// Explicit weight matrix of a filter layer.
pub fn filter_weight_matrix(layer: &Layer) -> Option<DMatrix<f64>> {
    match layer {
        Layer::Filter { dim, rank, basis } => {
            let u = DMatrix::from_row_slice(*dim, *rank, basis);
            Some(DMatrix::identity(*dim, *dim) - &u * u.transpose())
        }
        _ => None,
    }
}

fn apply_filter<S: Scalar>(dim: usize, rank: usize, basis: &[f64], x: &[S]) -> Vec<S> {
    let mut proj = vec![S::zero(); rank];
    for i in 0..dim {
        let row = &basis[i * rank..(i + 1) * rank];
        for (p, &b) in proj.iter_mut().zip(row) {
            *p += x[i].scale(b);
        }
    }
    (0..dim)
        .map(|i| {
            let row = &basis[i * rank..(i + 1) * rank];
            let mut back = S::zero();
            for (p, &b) in proj.iter().zip(row) {
                back += p.scale(b);
            }
            x[i] - back
        })
        .collect()
}

fn filter_real(dim: usize, rank: usize, basis: &[f64], x: &[f64], out: &mut [f64]) {
    let mut proj = vec![0.0; rank];
    for i in 0..dim {
        let row = &basis[i * rank..(i + 1) * rank];
        for (p, &b) in proj.iter_mut().zip(row) {
            *p += x[i] * b;
        }
    }
    for i in 0..dim {
        let row = &basis[i * rank..(i + 1) * rank];
        let mut back = 0.0;
        for (p, &b) in proj.iter().zip(row) {
            back += p * b;
        }
        out[i] = x[i] - back;
    }
}

fn softmax<S: Scalar>(x: &[S]) -> Vec<S> {
    let m = x.iter().map(|v| v.re()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<S> = x.iter().map(|&v| (v - S::from_real(m)).exp()).collect();
    let mut s = S::zero();
    for &v in &e {
        s += v;
    }
    let inv = s.recip();
    e.into_iter().map(|v| v * inv).collect()
}

/// Cached activations of one forward pass: `acts[k]` is the input of layer
/// `k`, the last entry is the network output.
#[derive(Clone, Debug)]
pub struct Tape<S> {
    pub acts: Vec<Vec<S>>,
}

impl<S: Scalar> Tape<S> {
    pub fn output(&self) -> &[S] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Result of a reverse pass.
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    pub input: Vec<S>,
    /// Flat in the layout of [`DenseNet::params`].
    pub params: Vec<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    layers: Vec<Layer>,
    pub seed: u64,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl DenseNet {
    pub fn new(layers: Vec<Layer>, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParameter("network has no layers".into()));
        }
        for w in layers.windows(2) {
            let (a, b) = (w[0].spec(), w[1].spec());
            if a.out_dim != b.in_dim {
                return Err(Error::Dimension {
                    expected: a.out_dim,
                    got: b.in_dim,
                    context: "layer chaining",
                });
            }
        }
        Ok(Self {
            layers,
            seed,
            metadata: BTreeMap::new(),
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec().in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].spec().out_dim
    }

    /// True when every layer is linear (dense or filter).
    pub fn is_linear(&self) -> bool {
        self.layers
            .iter()
            .all(|l| matches!(l, Layer::Dense { .. } | Layer::Filter { .. }))
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Concatenation of every dense layer's row-major weights then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            if let Layer::Dense { weight, bias, .. } = l {
                out.extend_from_slice(weight);
                out.extend_from_slice(bias);
            }
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::Dimension {
                expected: self.param_count(),
                got: p.len(),
                context: "parameter vector",
            });
        }
        let mut off = 0;
        for l in &mut self.layers {
            if let Layer::Dense { weight, bias, .. } = l {
                let (nw, nb) = (weight.len(), bias.len());
                weight.copy_from_slice(&p[off..off + nw]);
                off += nw;
                bias.copy_from_slice(&p[off..off + nb]);
                off += nb;
            }
        }
        Ok(())
    }

    /// Marks output rows of dense layer `layer` as pinned to zero.
    pub fn pin_rows(&mut self, layer: usize, rows: &[usize]) -> Result<()> {
        match self.layers.get_mut(layer) {
            Some(Layer::Dense {
                in_dim,
                out_dim,
                weight,
                bias,
                pinned_rows,
            }) => {
                for &r in rows {
                    if r >= *out_dim {
                        return Err(Error::InvalidParameter(format!("pinned row {r} out of range")));
                    }
                    weight[r * *in_dim..(r + 1) * *in_dim].fill(0.0);
                    bias[r] = 0.0;
                }
                pinned_rows.extend_from_slice(rows);
                pinned_rows.sort_unstable();
                pinned_rows.dedup();
                Ok(())
            }
            _ => Err(Error::InvalidParameter(format!("layer {layer} is not dense"))),
        }
    }

    fn check_input<S>(&self, x: &[S]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: x.len(),
                context: "network input",
            });
        }
        Ok(())
    }

    fn layer_forward<S: Scalar>(layer: &Layer, x: &[S]) -> Vec<S> {
        match layer {
            Layer::Dense {
                in_dim,
                out_dim,
                weight,
                bias,
                ..
            } => (0..*out_dim)
                .map(|i| {
                    let row = &weight[i * in_dim..(i + 1) * in_dim];
                    let mut acc = S::from_real(bias[i]);
                    for (&w, &xj) in row.iter().zip(x) {
                        acc += xj.scale(w);
                    }
                    acc
                })
                .collect(),
            Layer::Filter { dim, rank, basis } => apply_filter(*dim, *rank, basis, x),
            Layer::Sin { .. } => x.iter().map(|&v| v.sin()).collect(),
            Layer::Square { .. } => x.iter().map(|&v| v * v).collect(),
            Layer::Softmax { .. } => softmax(x),
        }
    }

    pub fn forward<S: Scalar>(&self, x: &[S]) -> Result<Vec<S>> {
        self.check_input(x)?;
        let mut a = x.to_vec();
        for l in &self.layers {
            a = Self::layer_forward(l, &a);
        }
        Ok(a)
    }

    /// Real forward pass without per-element scalar dispatch.
    pub fn forward_real(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut a = x.to_vec();
        for l in &self.layers {
            a = match l {
                Layer::Filter { dim, rank, basis } => {
                    let mut out = vec![0.0; *dim];
                    filter_real(*dim, *rank, basis, &a, &mut out);
                    out
                }
                _ => Self::layer_forward(l, &a),
            };
        }
        Ok(a)
    }

    /// Multicomplex forward pass in parts-major layout: every real weight
    /// matrix multiplies each imaginary part separately, bias only touches
    /// the real part, activations act per neuron.
    pub fn forward_mc(&self, x: &[MultiComplex]) -> Result<Vec<MultiComplex>> {
        self.check_input(x)?;
        let order = x.iter().map(MultiComplex::order).max().unwrap_or(0);
        let nparts = 1usize << order;
        let mut parts: Vec<Vec<f64>> = (0..nparts)
            .map(|m| x.iter().map(|z| if m < z.len() { z.part(m) } else { 0.0 }).collect())
            .collect();
        for l in &self.layers {
            match l {
                Layer::Dense {
                    in_dim,
                    out_dim,
                    weight,
                    bias,
                    ..
                } => {
                    for (m, p) in parts.iter_mut().enumerate() {
                        let mut y = vec![0.0; *out_dim];
                        for (i, yi) in y.iter_mut().enumerate() {
                            let row = &weight[i * in_dim..(i + 1) * in_dim];
                            let mut acc = if m == 0 { bias[i] } else { 0.0 };
                            for (&w, &xj) in row.iter().zip(p.iter()) {
                                acc += xj * w;
                            }
                            *yi = acc;
                        }
                        *p = y;
                    }
                }
                Layer::Filter { dim, rank, basis } => {
                    for p in parts.iter_mut() {
                        let mut y = vec![0.0; *dim];
                        filter_real(*dim, *rank, basis, p, &mut y);
                        *p = y;
                    }
                }
                Layer::Sin { dim } | Layer::Square { dim } => {
                    let square = matches!(l, Layer::Square { .. });
                    let mut buf = [0.0; 8];
                    for i in 0..*dim {
                        for m in 0..nparts {
                            buf[m] = parts[m][i];
                        }
                        let z = MultiComplex::new(order, &buf[..nparts])?;
                        let y = if square { z * z } else { z.sin() };
                        for m in 0..nparts {
                            parts[m][i] = y.part(m);
                        }
                    }
                }
                Layer::Softmax { dim } => {
                    let zs: Vec<MultiComplex> = (0..*dim)
                        .map(|i| {
                            let buf: Vec<f64> = (0..nparts).map(|m| parts[m][i]).collect();
                            MultiComplex::new(order, &buf)
                        })
                        .collect::<Result<_>>()?;
                    let ys = softmax(&zs);
                    for (i, y) in ys.iter().enumerate() {
                        for m in 0..nparts {
                            parts[m][i] = y.part(m);
                        }
                    }
                }
            }
        }
        let dim = parts[0].len();
        (0..dim)
            .map(|i| {
                let buf: Vec<f64> = (0..nparts).map(|m| parts[m][i]).collect();
                MultiComplex::new(order, &buf)
            })
            .collect()
    }

    /// Independent multicomplex passes, evaluated as one batch.
    pub fn forward_mc_batch(&self, xs: &[Vec<MultiComplex>]) -> Result<Vec<Vec<MultiComplex>>> {
        par::map(xs, |x| self.forward_mc(x)).into_iter().collect()
    }

    pub fn forward_tape<S: Scalar>(&self, x: &[S]) -> Result<Tape<S>> {
        self.check_input(x)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for l in &self.layers {
            let next = Self::layer_forward(l, acts.last().unwrap());
            acts.push(next);
        }
        Ok(Tape { acts })
    }

    /// Reverse pass from `upstream = ∂L/∂output`, returning the input
    /// cotangent and, if `with_params`, the parameter cotangents.
    /// Products of two perturbed quantities use the truncated rule.
    pub fn backward<S: Scalar>(&self, tape: &Tape<S>, upstream: &[S], with_params: bool) -> Result<Gradients<S>> {
        if tape.acts.len() != self.layers.len() + 1 {
            return Err(Error::InvalidParameter("tape does not belong to this network".into()));
        }
        if upstream.len() != self.output_dim() {
            return Err(Error::Dimension {
                expected: self.output_dim(),
                got: upstream.len(),
                context: "upstream gradient",
            });
        }
        let mut params = if with_params {
            vec![S::zero(); self.param_count()]
        } else {
            Vec::new()
        };
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.param_count();
        }
        let mut g = upstream.to_vec();
        for (k, l) in self.layers.iter().enumerate().rev() {
            let x = &tape.acts[k];
            g = match l {
                Layer::Dense {
                    in_dim,
                    out_dim,
                    weight,
                    pinned_rows,
                    ..
                } => {
                    if with_params {
                        let base = offsets[k];
                        let (pw, pb) = params[base..base + out_dim * (in_dim + 1)].split_at_mut(out_dim * in_dim);
                        for i in 0..*out_dim {
                            if pinned_rows.binary_search(&i).is_ok() {
                                continue;
                            }
                            let gi = g[i];
                            let row = &mut pw[i * in_dim..(i + 1) * in_dim];
                            for (r, &xj) in row.iter_mut().zip(x.iter()) {
                                *r = gi.mul_truncated(xj);
                            }
                            pb[i] = gi;
                        }
                    }
                    let mut dx = vec![S::zero(); *in_dim];
                    for i in 0..*out_dim {
                        let row = &weight[i * in_dim..(i + 1) * in_dim];
                        let gi = g[i];
                        for (d, &w) in dx.iter_mut().zip(row) {
                            *d += gi.scale(w);
                        }
                    }
                    dx
                }
                Layer::Filter { dim, rank, basis } => apply_filter(*dim, *rank, basis, &g),
                Layer::Sin { .. } => g.iter().zip(x).map(|(&gi, &xi)| gi.mul_truncated(xi.cos())).collect(),
                Layer::Square { .. } => g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| gi.mul_truncated(xi).scale(2.0))
                    .collect(),
                Layer::Softmax { .. } => {
                    let s = &tape.acts[k + 1];
                    let mut dot = S::zero();
                    for (&gi, &si) in g.iter().zip(s) {
                        dot += gi.mul_truncated(si);
                    }
                    g.iter().zip(s).map(|(&gi, &si)| si.mul_truncated(gi - dot)).collect()
                }
            };
        }
        Ok(Gradients { input: g, params })
    }

    /// Runs `x` through the first `split` layers into a new net and the rest
    /// into a second one.
    pub fn split_at(&self, split: usize) -> Result<(DenseNet, DenseNet)> {
        if split == 0 || split >= self.layers.len() {
            return Err(Error::InvalidParameter(format!("cannot split at layer {split}")));
        }
        Ok((
            DenseNet::new(self.layers[..split].to_vec(), self.seed)?,
            DenseNet::new(self.layers[split..].to_vec(), self.seed)?,
        ))
    }

    pub fn concat(a: &DenseNet, b: &DenseNet) -> Result<DenseNet> {
        let mut layers = a.layers.clone();
        layers.extend(b.layers.iter().cloned());
        DenseNet::new(layers, a.seed)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            seed: self.seed,
            layers: self
                .layers
                .iter()
                .map(|l| {
                    let spec = l.spec();
                    let (weights, bias, pinned_rows, rank) = match l {
                        Layer::Dense {
                            weight,
                            bias,
                            pinned_rows,
                            ..
                        } => (weight.clone(), bias.clone(), pinned_rows.clone(), None),
                        Layer::Filter { basis, rank, .. } => (basis.clone(), Vec::new(), Vec::new(), Some(*rank)),
                        _ => (Vec::new(), Vec::new(), Vec::new(), None),
                    };
                    LayerRecord {
                        spec,
                        weights,
                        bias,
                        pinned_rows,
                        rank,
                    }
                })
                .collect(),
            metadata: self.metadata.clone(),
        }
    }

    pub fn from_checkpoint(c: Checkpoint) -> Result<Self> {
        if c.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("unknown checkpoint format {:?}", c.format)));
        }
        let layers = c
            .layers
            .into_iter()
            .map(|r| {
                let LayerSpec {
                    kind, in_dim, out_dim, ..
                } = r.spec;
                let square = || {
                    if in_dim != out_dim {
                        Err(Error::Format(format!("{kind:?} layer must be square")))
                    } else {
                        Ok(())
                    }
                };
                Ok(match kind {
                    LayerKind::FullyConnected => {
                        let mut l = Layer::dense_from(in_dim, out_dim, r.weights, r.bias)?;
                        if let Layer::Dense { pinned_rows, .. } = &mut l {
                            *pinned_rows = r.pinned_rows;
                        }
                        l
                    }
                    LayerKind::Filter => {
                        square()?;
                        let rank = r
                            .rank
                            .ok_or_else(|| Error::Format("filter layer without rank".into()))?;
                        if r.weights.len() != in_dim * rank {
                            return Err(Error::Format("filter basis has wrong size".into()));
                        }
                        Layer::Filter {
                            dim: in_dim,
                            rank,
                            basis: r.weights,
                        }
                    }
                    LayerKind::ActivationSin => {
                        square()?;
                        Layer::Sin { dim: in_dim }
                    }
                    LayerKind::ActivationSoftmax => {
                        square()?;
                        Layer::Softmax { dim: in_dim }
                    }
                    LayerKind::ActivationSquare => {
                        square()?;
                        Layer::Square { dim: in_dim }
                    }
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut net = DenseNet::new(layers, c.seed)?;
        net.metadata = c.metadata;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, &self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let c: Checkpoint = serde_json::from_reader(f)?;
        Self::from_checkpoint(c)
    }
}

const CHECKPOINT_FORMAT: &str = "csrom-densenet-v1";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LayerRecord {
    #[serde(flatten)]
    pub spec: LayerSpec,
    #[serde(default)]
    pub weights: Vec<f64>,
    #[serde(default)]
    pub bias: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pinned_rows: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
}

/// JSON checkpoint: layer specs with row-major weights, seed, and free-form
/// training metadata.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Checkpoint {
    pub format: String,
    pub seed: u64,
    pub layers: Vec<LayerRecord>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

/// Incremental construction of a [`DenseNet`] with seeded initialization.
pub struct NetBuilder {
    dim: usize,
    layers: Vec<Layer>,
    rng: ChaCha8Rng,
    seed: u64,
    scheme: InitScheme,
    dense_count: usize,
}

impl NetBuilder {
    pub fn new(input_dim: usize, seed: u64) -> Self {
        Self {
            dim: input_dim,
            layers: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
            scheme: InitScheme::Uniform,
            dense_count: 0,
        }
    }

    pub fn init(mut self, scheme: InitScheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn dense(mut self, out_dim: usize) -> Self {
        let first = self.dense_count == 0;
        self.layers
            .push(Layer::dense(self.dim, out_dim, self.scheme, first, &mut self.rng));
        self.dense_count += 1;
        self.dim = out_dim;
        self
    }

    pub fn sin(mut self) -> Self {
        self.layers.push(Layer::Sin { dim: self.dim });
        self
    }

    pub fn square(mut self) -> Self {
        self.layers.push(Layer::Square { dim: self.dim });
        self
    }

    pub fn softmax(mut self) -> Self {
        self.layers.push(Layer::Softmax { dim: self.dim });
        self
    }

    pub fn layer(mut self, layer: Layer) -> Self {
        self.dim = layer.spec().out_dim;
        self.layers.push(layer);
        self
    }

    pub fn build(self) -> Result<DenseNet> {
        DenseNet::new(self.layers, self.seed)
    }
}

/// Uniform fan-in initialization of a fully connected layer spec.
pub fn init_weights(spec: &LayerSpec, seed: u64) -> Layer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Layer::dense(spec.in_dim, spec.out_dim, InitScheme::Uniform, false, &mut rng)
}

/// Adam with a piecewise-constant learning-rate schedule.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// `(epoch, factor)`: from `epoch` on, the rate is multiplied by `factor`.
    pub schedule: Vec<(usize, f64)>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Per-sample loss multipliers; `None` means all ones.
    pub sample_weights: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            schedule: vec![(300, 0.8), (3000, 0.8)],
            epochs: 500,
            batch_size: 16,
            sample_weights: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, samples: usize) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter("learning rate must be positive".into()));
        }
        if self.schedule.iter().any(|&(_, f)| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::InvalidParameter("decay factors must lie in (0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be positive".into()));
        }
        if let Some(w) = &self.sample_weights {
            if w.len() != samples {
                return Err(Error::Dimension {
                    expected: samples,
                    got: w.len(),
                    context: "sample weights",
                });
            }
            if w.iter().any(|&x| !(x.is_finite() && x >= 0.0)) {
                return Err(Error::InvalidParameter(
                    "sample weights must be finite and nonnegative".into(),
                ));
            }
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.schedule
            .iter()
            .filter(|&&(e, _)| epoch >= e)
            .fold(self.learning_rate, |lr, &(_, f)| lr * f)
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    /// Weighted mean loss per epoch, measured during the epoch.
    pub losses: Vec<f64>,
    pub final_lr: f64,
}

/// Loss functions with a built-in gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Loss {
    /// Mean over output components of the squared error.
    Mse,
}

/// Mean squared error and its gradient with respect to `y`.
pub fn mse(y: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let n = y.len() as f64;
    let mut l = 0.0;
    let g = y
        .iter()
        .zip(target)
        .map(|(&a, &b)| {
            let d = a - b;
            l += d * d;
            2.0 * d / n
        })
        .collect();
    (l / n, g)
}

/// Trains `net` on input/target pairs with a built-in loss.
pub fn adam_train(
    net: &mut DenseNet,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    loss: Loss,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if inputs.len() != targets.len() {
        return Err(Error::Dimension {
            expected: inputs.len(),
            got: targets.len(),
            context: "targets",
        });
    }
    match loss {
        Loss::Mse => adam_train_with(net, inputs, cfg, &mut Adam::new(net.param_count()), |i, y| {
            mse(y, &targets[i])
        }),
    }
}

/// Trains `net` with a caller-supplied per-sample loss returning
/// `(loss, ∂loss/∂output)`. Sample weights from `cfg` scale both.
/// The optimizer state is passed in so training can be resumed.
pub fn adam_train_with<F>(
    net: &mut DenseNet,
    inputs: &[Vec<f64>],
    cfg: &TrainConfig,
    adam: &mut Adam,
    loss: F,
) -> Result<TrainReport>
where
    F: Fn(usize, &[f64]) -> (f64, Vec<f64>) + Sync + Send,
{
    let n = inputs.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    cfg.validate(n)?;
    let np = net.param_count();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut report = TrainReport::default();
    let mut params = net.params();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let per_sample = par::map(batch, |&i| -> Result<(f64, Vec<f64>)> {
                let w = cfg.sample_weights.as_ref().map_or(1.0, |w| w[i]);
                if w == 0.0 {
                    return Ok((0.0, Vec::new()));
                }
                let tape = net.forward_tape(&inputs[i])?;
                let (l, g) = loss(i, tape.output());
                let g: Vec<f64> = g.into_iter().map(|v| v * w).collect();
                let grads = net.backward(&tape, &g, true)?;
                Ok((w * l, grads.params))
            });
            let mut grad = vec![0.0; np];
            for r in per_sample {
                let (l, g) = r?;
                epoch_loss += l;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            adam.step(&mut params, &grad, lr);
            net.set_params(&params)?;
        }
        let mean = epoch_loss / n as f64;
        if !mean.is_finite() {
            return Err(Error::TrainingDiverged { epoch, loss: mean });
        }
        report.losses.push(mean);
        report.final_lr = lr;
    }
    Ok(report)
}

/// Fisher–Yates with the crate's seeded generator.
pub(crate) fn shuffle<T>(v: &mut [T], rng: &mut impl Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_basis(n: usize, k: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, k, |_, _| rng.gen_range(-1.0..1.0));
        a.qr().q()
    }

    /// (x·y)² built from dense layers and squares: ((x+y)² − (x−y)²)/4 = xy.
    pub(crate) fn product_square_net() -> DenseNet {
        DenseNet::new(
            vec![
                Layer::dense_from(2, 2, vec![1.0, 1.0, 1.0, -1.0], vec![0.0, 0.0]).unwrap(),
                Layer::Square { dim: 2 },
                Layer::dense_from(2, 1, vec![0.25, -0.25], vec![0.0]).unwrap(),
                Layer::Square { dim: 1 },
            ],
            0,
        )
        .unwrap()
    }

    #[test]
    fn filter_projects_out_basis() {
        let u = random_basis(12, 3, 1);
        let f = filter_from_basis(&u).unwrap();
        let net = DenseNet::new(vec![f.clone()], 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x_in: Vec<f64> = (0..12).map(|i| (0..3).map(|k| u[(i, k)] * c[k]).sum()).collect();
        let xn = x_in.iter().map(|v| v * v).sum::<f64>().sqrt();
        let y = net.forward_real(&x_in).unwrap();
        assert!(y.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-10 * xn);

        // orthogonal complement passes through
        let r: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let perp = net.forward_real(&r).unwrap();
        let again = net.forward_real(&perp).unwrap();
        for (a, b) in perp.iter().zip(&again) {
            assert!((a - b).abs() <= 1e-12);
        }
        // explicit weight matrix agrees
        let w = filter_weight_matrix(&f).unwrap();
        let wy = &w * nalgebra::DVector::from_column_slice(&r);
        for i in 0..12 {
            assert!((wy[i] - perp[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn filter_rejects_non_orthonormal() {
        let u = DMatrix::from_element(5, 2, 1.0);
        assert!(matches!(filter_from_basis(&u), Err(Error::NotOrthonormal(_))));
    }

    #[test]
    fn identity_layer_forward() {
        let net = DenseNet::new(
            vec![Layer::dense_from(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0; 2]).unwrap()],
            0,
        )
        .unwrap();
        assert_eq!(net.forward_real(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
        assert!(net.forward_real(&[1.0]).is_err());
    }

    #[test]
    fn product_net_complex_forward() {
        let net = product_square_net();
        let h = 1e-10;
        let x = MultiComplex::new(1, &[2.0, h]).unwrap();
        let y = MultiComplex::real(3.0);
        let tape = net.forward_tape(&[x, y]).unwrap();
        let z = tape.acts[3][0];
        assert_eq!(z.re(), 6.0);
        assert!((z.part(1) / h - 3.0).abs() < 1e-12);
        let w = tape.output()[0];
        assert_eq!(w.re(), 36.0);
        assert!((w.part(1) / h - 36.0).abs() < 1e-12);
    }

    #[test]
    fn product_net_backward() {
        let net = product_square_net();
        let tape = net.forward_tape(&[2.0, 3.0]).unwrap();
        let g = net.backward(&tape, &[1.0], false).unwrap();
        assert_eq!(g.input, vec![36.0, 24.0]);

        let h = 1e-10;
        let x = MultiComplex::new(1, &[2.0, h]).unwrap();
        let tape = net.forward_tape(&[x, MultiComplex::real(3.0)]).unwrap();
        let g = net.backward(&tape, &[MultiComplex::real(1.0)], false).unwrap();
        assert!((g.input[0].re() - 36.0).abs() < 1e-12);
        assert!((g.input[0].part(1) / h - 18.0).abs() < 1e-9);

        let g = net.backward(&tape, &[MultiComplex::real(0.0)], true).unwrap();
        assert!(g.input.iter().all(|z| z.max_abs() == 0.0));
    }

    fn random_sin_net(inp: usize, width: usize, out: usize, depth: usize, seed: u64) -> DenseNet {
        let mut b = NetBuilder::new(inp, seed).dense(width).sin();
        for _ in 1..depth {
            b = b.dense(width).sin();
        }
        b.dense(out).build().unwrap()
    }

    #[test]
    fn backward_matches_complex_step() {
        for depth in [1, 3, 10] {
            let net = random_sin_net(4, 6, 3, depth, depth as u64);
            let x = [0.3, -0.2, 0.5, 0.1];
            let a = [0.7, -1.1, 0.4];
            let tape = net.forward_tape(&x).unwrap();
            let g = net.backward(&tape, &a, true).unwrap();
            let h = 1e-20;
            for j in 0..4 {
                let xs: Vec<MultiComplex> = x
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| MultiComplex::new(1, &[v, if k == j { h } else { 0.0 }]).unwrap())
                    .collect();
                let y = net.forward_mc(&xs).unwrap();
                let d: f64 = y.iter().zip(&a).map(|(z, ai)| z.part(1) / h * ai).sum();
                assert!((d - g.input[j]).abs() <= 1e-8 * d.abs().max(1.0), "depth {depth}");
            }
            // one parameter via complex step on the weights
            let p0 = net.params();
            for idx in [0, p0.len() / 2, p0.len() - 1] {
                let mut layers = net.layers().to_vec();
                let mut off = 0;
                let mut found = None;
                for (li, l) in layers.iter().enumerate() {
                    let c = l.param_count();
                    if idx < off + c {
                        found = Some((li, idx - off));
                        break;
                    }
                    off += c;
                }
                let (li, local) = found.unwrap();
                // finite difference in real arithmetic with a tiny central step
                let eps = 1e-6;
                let eval = |layers: &Vec<Layer>| {
                    let n = DenseNet::new(layers.clone(), 0).unwrap();
                    let y = n.forward_real(&x).unwrap();
                    y.iter().zip(&a).map(|(p, q)| p * q).sum::<f64>()
                };
                let bump = |layers: &mut Vec<Layer>, delta: f64| {
                    if let Layer::Dense { weight, bias, .. } = &mut layers[li] {
                        if local < weight.len() {
                            weight[local] += delta;
                        } else {
                            bias[local - weight.len()] += delta;
                        }
                    }
                };
                bump(&mut layers, eps);
                let fp = eval(&layers);
                bump(&mut layers, -2.0 * eps);
                let fm = eval(&layers);
                let fd = (fp - fm) / (2.0 * eps);
                assert!((fd - g.params[idx]).abs() <= 1e-6 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn deep_sin_gradients_do_not_vanish() {
        let net = random_sin_net(5, 16, 1, 10, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let tape = net.forward_tape(&x).unwrap();
            let g = net.backward(&tape, &[1.0], true).unwrap();
            let norm = g.params.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm > 1e-3 && norm < 1e6, "gradient norm {norm}");
        }
    }

    #[test]
    fn mc_forward_equals_real_forward() {
        let u = random_basis(7, 2, 3);
        let net = NetBuilder::new(3, 5)
            .dense(7)
            .sin()
            .dense(7)
            .square()
            .layer(filter_from_basis(&u).unwrap())
            .dense(4)
            .softmax()
            .build()
            .unwrap();
        let x = [0.2, -0.4, 0.9];
        let real = net.forward_real(&x).unwrap();
        let generic = net.forward(&x).unwrap();
        for order in 0..=3 {
            let xs: Vec<MultiComplex> = x.iter().map(|&v| MultiComplex::promote(v, order).unwrap()).collect();
            let y = net.forward_mc(&xs).unwrap();
            let yg = net.forward(&xs).unwrap();
            for i in 0..4 {
                assert_eq!(y[i].re(), real[i]);
                assert_eq!(yg[i].re(), real[i]);
                assert_eq!(generic[i], real[i]);
                assert!(y[i].parts()[1..].iter().all(|&p| p == 0.0));
            }
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let spec = LayerSpec {
            kind: LayerKind::FullyConnected,
            in_dim: 6,
            out_dim: 9,
            trainable: true,
        };
        let a = init_weights(&spec, 42);
        let b = init_weights(&spec, 42);
        let c = init_weights(&spec, 43);
        assert_eq!(a, b);
        assert_ne!(a, c);
        if let Layer::Dense { weight, .. } = a {
            assert!(weight.iter().all(|w| w.abs() < 1.0));
        }
    }

    #[test]
    fn learns_linear_map() {
        let mut net = NetBuilder::new(3, 1).dense(2).build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let targets: Vec<Vec<f64>> = inputs
            .iter()
            .map(|x| vec![0.5 * x[0] - x[1] + 0.1, 2.0 * x[2] - 0.3 * x[0]])
            .collect();
        let cfg = TrainConfig {
            learning_rate: 0.01,
            schedule: vec![(300, 0.5)],
            epochs: 500,
            batch_size: 8,
            ..Default::default()
        };
        let report = adam_train(&mut net, &inputs, &targets, Loss::Mse, &cfg).unwrap();
        assert!(*report.losses.last().unwrap() < 1e-8, "{:?}", report.losses.last());
    }

    #[test]
    fn schedule_decays() {
        let cfg = TrainConfig {
            learning_rate: 0.001,
            schedule: vec![(300, 0.8), (3000, 0.8)],
            ..Default::default()
        };
        assert_eq!(cfg.lr_at(0), 0.001);
        assert!((cfg.lr_at(300) - 0.0008).abs() < 1e-15);
        assert!((cfg.lr_at(3000) - 0.00064).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_leave_parameters() {
        let mut net = NetBuilder::new(2, 1).dense(3).sin().dense(1).build().unwrap();
        let before = net.params();
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 2,
            sample_weights: Some(vec![0.0; 4]),
            ..Default::default()
        };
        let x = vec![vec![0.1, 0.2]; 4];
        let t = vec![vec![1.0]; 4];
        adam_train(&mut net, &x, &t, Loss::Mse, &cfg).unwrap();
        assert_eq!(before, net.params());
    }

    #[test]
    fn nan_loss_aborts() {
        let mut net = NetBuilder::new(1, 1).dense(1).build().unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            ..Default::default()
        };
        let r = adam_train(&mut net, &[vec![1.0]], &[vec![f64::NAN]], Loss::Mse, &cfg);
        assert!(matches!(r, Err(Error::TrainingDiverged { .. })));
    }

    #[test]
    fn pinned_rows_stay_zero() {
        let mut net = NetBuilder::new(2, 1).dense(3).sin().dense(4).build().unwrap();
        net.pin_rows(2, &[1, 3]).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 20,
            batch_size: 2,
            ..Default::default()
        };
        let x = vec![vec![0.1, 0.2], vec![-0.3, 0.5]];
        let t = vec![vec![1.0, 1.0, 1.0, 1.0]; 2];
        adam_train(&mut net, &x, &t, Loss::Mse, &cfg).unwrap();
        let y = net.forward_real(&[0.4, 0.4]).unwrap();
        assert_eq!(y[1], 0.0);
        assert_eq!(y[3], 0.0);
        assert!(y[0] != 0.0);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let u = random_basis(6, 2, 3);
        let mut net = NetBuilder::new(3, 77)
            .dense(6)
            .sin()
            .dense(6)
            .layer(filter_from_basis(&u).unwrap())
            .build()
            .unwrap();
        net.pin_rows(2, &[0]).unwrap();
        net.metadata.insert("epochs".into(), serde_json::json!(12));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("net.json");
        net.save(&p).unwrap();
        let back = DenseNet::load(&p).unwrap();
        assert_eq!(net, back);
        let bits = |n: &DenseNet| n.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&net), bits(&back));
    }
}
