//! Per-layer Fisher estimates and their damped inverse quadratic forms.
//!
//! Two estimators are provided: the diagonal of the empirical Fisher and
//! the eigenvalue-corrected Kronecker factorisation (EKFAC), whose
//! eigenbases come from the input/output second moments `A = E[hhᵀ]` and
//! `B = E[δδᵀ]` and whose eigenvalues are re-fitted to the gradients
//! projected onto that basis.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{LayerGradient, LayerGradientSet};
use crate::data::ImageDataset;
use crate::rose::LayerStats;
use crate::tensor::{gemm, kron_apply, sym_eig, MatRef, Scalar, Tensor, TensorError};
use crate::vae::{VaeError, VaeModel};

/// Default damping relative to the mean of the fitted spectrum.
pub const RELATIVE_DAMPING: f64 = 1e-8;

/// Samples per parallel accumulation unit; partial sums are merged in unit
/// order so results do not depend on the thread count.
const ACCUMULATE_CHUNK: usize = 8;

#[derive(Debug, Error)]
pub enum FisherError {
    #[error("gradient stream is empty")]
    Empty,
    #[error("layer {layer}: expected gradient shape {expected:?}, found {found:?}")]
    Shape { layer: usize, expected: Vec<usize>, found: Vec<usize> },
    #[error("expected {expected} layers per sample, found {found}")]
    LayerCount { expected: usize, found: usize },
    #[error("gradient stream yielded {second} samples on replay but {first} on the first pass")]
    Replay { first: usize, second: usize },
    #[error("eigendecomposition of layer {layer}: {source}")]
    Eigen { layer: usize, source: TensorError },
    #[error("relative damping must be positive and finite, got {0}")]
    Damping(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Vae(#[from] VaeError),
}

pub type Result<T, E = FisherError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FisherMethod {
    Diag,
    Ekfac,
}

impl fmt::Display for FisherMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FisherMethod::Diag => "diag",
            FisherMethod::Ekfac => "ekfac",
        })
    }
}

impl FromStr for FisherMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "diag" => Ok(FisherMethod::Diag),
            "ekfac" => Ok(FisherMethod::Ekfac),
            other => Err(format!("unknown Fisher method `{other}` (expected diag or ekfac)")),
        }
    }
}

/// Source of per-sample gradients that can be traversed more than once in
/// the same order.
pub trait GradientStream<T: Scalar> {
    fn replay(&mut self, visit: &mut dyn FnMut(&[LayerGradientSet<T>]) -> Result<()>) -> Result<()>;
}

impl<T: Scalar> GradientStream<T> for &[LayerGradientSet<T>] {
    fn replay(&mut self, visit: &mut dyn FnMut(&[LayerGradientSet<T>]) -> Result<()>) -> Result<()> {
        for chunk in self.chunks(64) {
            visit(chunk)?;
        }
        Ok(())
    }
}

impl<T: Scalar> GradientStream<T> for Vec<LayerGradientSet<T>> {
    fn replay(&mut self, visit: &mut dyn FnMut(&[LayerGradientSet<T>]) -> Result<()>) -> Result<()> {
        self.as_slice().replay(visit)
    }
}

/// Recomputes score gradients from a model on every replay instead of
/// holding them in memory. Sample `i` of `indices` always uses latent noise
/// stream `indices[i]` under `seed`.
pub struct ModelGradients<'a, T: Scalar> {
    pub model: &'a VaeModel<T>,
    pub data: &'a ImageDataset,
    pub indices: Vec<usize>,
    pub k: usize,
    pub seed: u64,
}

impl<'a, T: Scalar> ModelGradients<'a, T> {
    const BATCH: usize = 32;

    pub fn new(model: &'a VaeModel<T>, data: &'a ImageDataset, indices: Vec<usize>, k: usize, seed: u64) -> Self {
        Self { model, data, indices, k, seed }
    }

    /// Gradients for one batch of dataset indices.
    pub fn batch(&self, idx: &[usize]) -> Result<Vec<LayerGradientSet<T>>> {
        let x: Tensor<T> = self.data.batch(idx).cast();
        let ids: Vec<u64> = idx.iter().map(|&i| i as u64).collect();
        let eps = self.model.draw_noise(self.seed, &ids, self.k);
        Ok(self.model.score_gradients_with_noise(&x, &eps)?.0)
    }
}

impl<T: Scalar> GradientStream<T> for ModelGradients<'_, T> {
    fn replay(&mut self, visit: &mut dyn FnMut(&[LayerGradientSet<T>]) -> Result<()>) -> Result<()> {
        let group = Self::BATCH * rayon::current_num_threads().max(1);
        for outer in self.indices.chunks(group) {
            let batches = outer
                .par_chunks(Self::BATCH)
                .map(|idx| self.batch(idx))
                .collect::<Result<Vec<_>>>()?;
            for sets in &batches {
                visit(sets)?;
            }
        }
        Ok(())
    }
}

/// Diagonal Fisher of one layer, shaped like its gradient `[out, fan_in(+1)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagFactor {
    pub diag: Tensor<f64>,
    pub n_samples: usize,
    pub damping: f64,
}

/// EKFAC factors of one layer with gradient shape `[q, p]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EkfacFactor {
    /// `p×p`, columns are eigenvectors of `A`.
    pub u_a: Tensor<f64>,
    /// `q×q`, columns are eigenvectors of `B`.
    pub u_b: Tensor<f64>,
    /// Corrected eigenvalues laid out like `U_Bᵀ G U_A`, `[q, p]`.
    pub sigma: Tensor<f64>,
    pub n_samples: usize,
    pub damping: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerFactor {
    Diag(DiagFactor),
    Ekfac(EkfacFactor),
}

fn damping_for(spectrum: &[f64], relative: f64) -> f64 {
    let mean = spectrum.iter().sum::<f64>() / spectrum.len().max(1) as f64;
    (relative * mean).max(f64::MIN_POSITIVE)
}

fn check_relative(relative: f64) -> Result<()> {
    if !(relative > 0.0 && relative.is_finite()) {
        return Err(FisherError::Damping(relative));
    }
    Ok(())
}

fn cheaper_factored(p: usize, q: usize, positions: usize) -> bool {
    positions * (p * p + q * q + p * q) < q * p * (p + q)
}

impl EkfacFactor {
    pub fn dims(&self) -> (usize, usize) {
        (self.u_b.shape()[0], self.u_a.shape()[0])
    }

    /// `U_Bᵀ G U_A` for a dense `[q, p]` gradient.
    pub fn project(&self, g: &Tensor<f64>) -> Result<Tensor<f64>> {
        let (q, p) = self.dims();
        if g.shape() != [q, p] {
            return Err(FisherError::Shape { layer: 0, expected: vec![q, p], found: g.shape().to_vec() });
        }
        let mut gu = vec![0.0; q * p];
        gemm(1.0, MatRef::new(g.data(), q, p), MatRef::new(self.u_a.data(), p, p), 0.0, &mut gu);
        let mut c = vec![0.0; q * p];
        gemm(1.0, MatRef::new(self.u_b.data(), q, q).t(), MatRef::new(&gu, q, p), 0.0, &mut c);
        Ok(Tensor::new(vec![q, p], c)?)
    }

    /// `U_Bᵀ G U_A` using `G = Δᵀ H` when that is cheaper.
    fn project_sample<T: Scalar>(&self, g: &LayerGradient<T>) -> Result<Tensor<f64>> {
        let (q, p) = self.dims();
        if g.grad.shape() != [q, p] {
            return Err(FisherError::Shape { layer: g.layer, expected: vec![q, p], found: g.grad.shape().to_vec() });
        }
        let positions = g.h.shape()[0];
        if !cheaper_factored(p, q, positions) {
            return self.project(&g.grad.cast());
        }
        let h: Tensor<f64> = g.h.cast();
        let d: Tensor<f64> = g.delta.cast();
        let mut hu = vec![0.0; positions * p];
        gemm(1.0, MatRef::new(h.data(), positions, p), MatRef::new(self.u_a.data(), p, p), 0.0, &mut hu);
        let mut du = vec![0.0; positions * q];
        gemm(1.0, MatRef::new(d.data(), positions, q), MatRef::new(self.u_b.data(), q, q), 0.0, &mut du);
        let mut c = vec![0.0; q * p];
        gemm(1.0, MatRef::new(&du, positions, q).t(), MatRef::new(&hu, positions, p), 0.0, &mut c);
        Ok(Tensor::new(vec![q, p], c)?)
    }

    fn quad_projected(&self, c: &Tensor<f64>) -> f64 {
        c.data()
            .iter()
            .zip(self.sigma.data())
            .map(|(&c, &s)| if c == 0.0 { 0.0 } else { c * c / (s + self.damping) })
            .sum()
    }
}

impl LayerFactor {
    /// Gradient shape `[q, p]` this factor applies to.
    pub fn shape(&self) -> (usize, usize) {
        match self {
            LayerFactor::Diag(d) => (d.diag.shape()[0], d.diag.shape()[1]),
            LayerFactor::Ekfac(e) => e.dims(),
        }
    }

    pub fn damping(&self) -> f64 {
        match self {
            LayerFactor::Diag(d) => d.damping,
            LayerFactor::Ekfac(e) => e.damping,
        }
    }

    pub fn n_samples(&self) -> usize {
        match self {
            LayerFactor::Diag(d) => d.n_samples,
            LayerFactor::Ekfac(e) => e.n_samples,
        }
    }

    /// Number of stored scalars.
    pub fn storage_len(&self) -> usize {
        match self {
            LayerFactor::Diag(d) => d.diag.len(),
            LayerFactor::Ekfac(e) => e.u_a.len() + e.u_b.len() + e.sigma.len(),
        }
    }

    /// `vec(G)ᵀ (F̂ + εI)⁻¹ vec(G)` for a dense gradient matrix.
    pub fn quad_form_matrix(&self, g: &Tensor<f64>) -> Result<f64> {
        match self {
            LayerFactor::Diag(d) => {
                check_shape(&d.diag, g)?;
                Ok(g.data()
                    .iter()
                    .zip(d.diag.data())
                    .map(|(&s, &v)| if s == 0.0 { 0.0 } else { s * s / (v + d.damping) })
                    .sum())
            }
            LayerFactor::Ekfac(e) => Ok(e.quad_projected(&e.project(g)?)),
        }
    }

    /// Quadratic form of one sample's layer gradient.
    pub fn quad_form<T: Scalar>(&self, g: &LayerGradient<T>) -> Result<f64> {
        match self {
            LayerFactor::Diag(_) => self.quad_form_matrix(&g.grad.cast()),
            LayerFactor::Ekfac(e) => Ok(e.quad_projected(&e.project_sample(g)?)),
        }
    }

    /// `(F̂ + εI)⁻¹ vec(G)`, reshaped like `G`.
    pub fn apply_inverse(&self, g: &Tensor<f64>) -> Result<Tensor<f64>> {
        match self {
            LayerFactor::Diag(d) => {
                check_shape(&d.diag, g)?;
                let data = g.data().iter().zip(d.diag.data()).map(|(&s, &v)| s / (v + d.damping)).collect();
                Ok(Tensor::new(g.shape().to_vec(), data)?)
            }
            LayerFactor::Ekfac(e) => {
                let c = kron_apply(&e.u_a.transpose()?, &e.u_b.transpose()?, g)?;
                let scaled: Vec<f64> =
                    c.data().iter().zip(e.sigma.data()).map(|(&c, &s)| c / (s + e.damping)).collect();
                let scaled = Tensor::new(c.shape().to_vec(), scaled)?;
                Ok(kron_apply(&e.u_a, &e.u_b, &scaled)?)
            }
        }
    }
}

fn check_shape(expected: &Tensor<f64>, g: &Tensor<f64>) -> Result<()> {
    if expected.shape() != g.shape() {
        return Err(FisherError::Shape { layer: 0, expected: expected.shape().to_vec(), found: g.shape().to_vec() });
    }
    Ok(())
}

/// Fitted factors for every selected layer, plus calibration statistics
/// once computed.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherArtifact {
    pub method: FisherMethod,
    pub layer_names: Vec<String>,
    pub layers: Vec<LayerFactor>,
    /// Architecture fingerprint of the model the gradients came from.
    pub model_fingerprint: u64,
    pub weights_checksum: u64,
    pub stats: Option<LayerStats>,
}

impl FisherArtifact {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Raw per-layer scores `sˡ = sˡᵀ (F̂ˡ + εI)⁻¹ sˡ` of one sample.
    pub fn layer_scores<T: Scalar>(&self, set: &LayerGradientSet<T>) -> Result<Vec<f64>> {
        if set.len() != self.layers.len() {
            return Err(FisherError::LayerCount { expected: self.layers.len(), found: set.len() });
        }
        self.layers.iter().zip(&set.layers).map(|(f, g)| f.quad_form(g)).collect()
    }
}

/// Layer shapes of the first sample; every later sample must agree.
struct Layout {
    shapes: Vec<(usize, usize)>,
}

impl Layout {
    fn of<T: Scalar>(set: &LayerGradientSet<T>) -> Result<Self> {
        let shapes = set
            .layers
            .iter()
            .map(|g| g.grad.dims2().map_err(FisherError::from))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { shapes })
    }

    fn check<T: Scalar>(&self, set: &LayerGradientSet<T>) -> Result<()> {
        if set.len() != self.shapes.len() {
            return Err(FisherError::LayerCount { expected: self.shapes.len(), found: set.len() });
        }
        for (l, (g, &(q, p))) in set.layers.iter().zip(&self.shapes).enumerate() {
            let h_ok = g.h.shape().get(1) == Some(&p) && g.delta.shape().get(1) == Some(&q);
            if g.grad.shape() != [q, p] || !h_ok {
                return Err(FisherError::Shape { layer: l, expected: vec![q, p], found: g.grad.shape().to_vec() });
            }
        }
        Ok(())
    }
}

/// Reduces `chunk` with `fold` over fixed-size units in parallel and merges
/// the partial results in unit order.
fn reduce_chunk<T, A, F, M>(chunk: &[LayerGradientSet<T>], fold: F, merge: M) -> Result<Option<A>>
where
    T: Scalar,
    A: Send,
    F: Fn(&[LayerGradientSet<T>]) -> Result<A> + Sync,
    M: Fn(&mut A, A),
{
    let parts = chunk.par_chunks(ACCUMULATE_CHUNK).map(&fold).collect::<Result<Vec<A>>>()?;
    let mut iter = parts.into_iter();
    let Some(mut acc) = iter.next() else { return Ok(None) };
    for part in iter {
        merge(&mut acc, part);
    }
    Ok(Some(acc))
}

fn add_into(acc: &mut [Vec<f64>], part: Vec<Vec<f64>>) {
    for (a, p) in acc.iter_mut().zip(part) {
        for (x, y) in a.iter_mut().zip(p) {
            *x += y;
        }
    }
}

/// Mean of element-wise squared gradients per layer, damped by
/// `relative × mean(diag)`.
pub fn fit_diag<T: Scalar, S: GradientStream<T> + ?Sized>(stream: &mut S, relative: f64) -> Result<Vec<DiagFactor>> {
    check_relative(relative)?;
    let mut layout: Option<Layout> = None;
    let mut sums: Vec<Vec<f64>> = Vec::new();
    let mut n = 0usize;
    stream.replay(&mut |chunk| {
        if chunk.is_empty() {
            return Ok(());
        }
        let lay = match &layout {
            Some(l) => l,
            None => {
                let l = Layout::of(&chunk[0])?;
                sums = l.shapes.iter().map(|&(q, p)| vec![0.0; q * p]).collect();
                layout.insert(l)
            }
        };
        for set in chunk {
            lay.check(set)?;
        }
        let part = reduce_chunk(
            chunk,
            |sets| {
                let mut acc: Vec<Vec<f64>> = lay.shapes.iter().map(|&(q, p)| vec![0.0; q * p]).collect();
                for set in sets {
                    for (a, g) in acc.iter_mut().zip(&set.layers) {
                        for (x, &v) in a.iter_mut().zip(g.grad.data()) {
                            let v = v.as_f64();
                            *x += v * v;
                        }
                    }
                }
                Ok(acc)
            },
            |a, b| add_into(a, b),
        )?;
        if let Some(part) = part {
            add_into(&mut sums, part);
        }
        n += chunk.len();
        Ok(())
    })?;
    let layout = layout.ok_or(FisherError::Empty)?;
    Ok(sums
        .into_iter()
        .zip(&layout.shapes)
        .map(|(s, &(q, p))| {
            let diag: Vec<f64> = s.into_iter().map(|v| v / n as f64).collect();
            let damping = damping_for(&diag, relative);
            DiagFactor { diag: Tensor::new(vec![q, p], diag).expect("finite"), n_samples: n, damping }
        })
        .collect())
}

/// Two passes over `stream`: the first accumulates `A` and `B` and
/// eigendecomposes them, the second accumulates the squared projections.
/// Damped by `relative × mean(Σ)`.
pub fn fit_ekfac<T: Scalar, S: GradientStream<T> + ?Sized>(stream: &mut S, relative: f64) -> Result<Vec<EkfacFactor>> {
    check_relative(relative)?;
    let mut layout: Option<Layout> = None;
    // Per layer: (A sum, B sum, rows).
    let mut moments: Vec<(Vec<f64>, Vec<f64>, usize)> = Vec::new();
    let mut n = 0usize;
    stream.replay(&mut |chunk| {
        if chunk.is_empty() {
            return Ok(());
        }
        let lay = match &layout {
            Some(l) => l,
            None => {
                let l = Layout::of(&chunk[0])?;
                moments = l.shapes.iter().map(|&(q, p)| (vec![0.0; p * p], vec![0.0; q * q], 0)).collect();
                layout.insert(l)
            }
        };
        for set in chunk {
            lay.check(set)?;
        }
        let part = reduce_chunk(
            chunk,
            |sets| {
                let mut acc: Vec<(Vec<f64>, Vec<f64>, usize)> =
                    lay.shapes.iter().map(|&(q, p)| (vec![0.0; p * p], vec![0.0; q * q], 0)).collect();
                for set in sets {
                    for ((a, b, rows), g) in acc.iter_mut().zip(&set.layers) {
                        let h: Tensor<f64> = g.h.cast();
                        let d: Tensor<f64> = g.delta.cast();
                        let (r, p) = (h.shape()[0], h.shape()[1]);
                        let q = d.shape()[1];
                        gemm(1.0, MatRef::new(h.data(), r, p).t(), MatRef::new(h.data(), r, p), 1.0, a);
                        gemm(1.0, MatRef::new(d.data(), r, q).t(), MatRef::new(d.data(), r, q), 1.0, b);
                        *rows += r;
                    }
                }
                Ok(acc)
            },
            merge_moments,
        )?;
        if let Some(part) = part {
            merge_moments(&mut moments, part);
        }
        n += chunk.len();
        Ok(())
    })?;
    let layout = layout.ok_or(FisherError::Empty)?;

    let mut bases = Vec::with_capacity(layout.shapes.len());
    for (l, ((a, b, rows), &(q, p))) in moments.into_iter().zip(&layout.shapes).enumerate() {
        let rows = rows.max(1) as f64;
        let a = Tensor::new(vec![p, p], a.into_iter().map(|v| v / rows).collect())?;
        let b = Tensor::new(vec![q, q], b.into_iter().map(|v| v / rows).collect())?;
        let ea = sym_eig(&a).map_err(|source| FisherError::Eigen { layer: l, source })?;
        let eb = sym_eig(&b).map_err(|source| FisherError::Eigen { layer: l, source })?;
        log::debug!("layer {l}: eigendecomposition took {} + {} sweeps", ea.sweeps, eb.sweeps);
        bases.push(EkfacFactor {
            u_a: ea.vectors,
            u_b: eb.vectors,
            sigma: Tensor::zeros(&[q, p]),
            n_samples: n,
            damping: 0.0,
        });
    }

    let mut sums: Vec<Vec<f64>> = layout.shapes.iter().map(|&(q, p)| vec![0.0; q * p]).collect();
    let mut second = 0usize;
    stream.replay(&mut |chunk| {
        for set in chunk {
            layout.check(set)?;
        }
        let part = reduce_chunk(
            chunk,
            |sets| {
                let mut acc: Vec<Vec<f64>> = layout.shapes.iter().map(|&(q, p)| vec![0.0; q * p]).collect();
                for set in sets {
                    for ((a, g), f) in acc.iter_mut().zip(&set.layers).zip(&bases) {
                        let c = f.project_sample(g)?;
                        for (x, &v) in a.iter_mut().zip(c.data()) {
                            *x += v * v;
                        }
                    }
                }
                Ok(acc)
            },
            |a, b| add_into(a, b),
        )?;
        if let Some(part) = part {
            add_into(&mut sums, part);
        }
        second += chunk.len();
        Ok(())
    })?;
    if second != n {
        return Err(FisherError::Replay { first: n, second });
    }
    for (f, s) in bases.iter_mut().zip(sums) {
        let sigma: Vec<f64> = s.into_iter().map(|v| v / n as f64).collect();
        f.damping = damping_for(&sigma, relative);
        f.sigma = Tensor::new(f.sigma.shape().to_vec(), sigma)?;
    }
    Ok(bases)
}

fn merge_moments(acc: &mut Vec<(Vec<f64>, Vec<f64>, usize)>, part: Vec<(Vec<f64>, Vec<f64>, usize)>) {
    for ((a, b, r), (pa, pb, pr)) in acc.iter_mut().zip(part) {
        for (x, y) in a.iter_mut().zip(pa) {
            *x += y;
        }
        for (x, y) in b.iter_mut().zip(pb) {
            *x += y;
        }
        *r += pr;
    }
}

pub fn fit<T: Scalar, S: GradientStream<T> + ?Sized>(
    method: FisherMethod,
    stream: &mut S,
    relative: f64,
) -> Result<Vec<LayerFactor>> {
    Ok(match method {
        FisherMethod::Diag => fit_diag(stream, relative)?.into_iter().map(LayerFactor::Diag).collect(),
        FisherMethod::Ekfac => fit_ekfac(stream, relative)?.into_iter().map(LayerFactor::Ekfac).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    /// Dense-layer gradient sample (one position): `G = δ hᵀ`.
    fn dense_sample(h: &[f64], d: &[f64]) -> LayerGradient<f64> {
        let (p, q) = (h.len(), d.len());
        let mut g = vec![0.0; q * p];
        for i in 0..q {
            for j in 0..p {
                g[i * p + j] = d[i] * h[j];
            }
        }
        LayerGradient {
            layer: 0,
            grad: Tensor::new(vec![q, p], g).unwrap(),
            h: Tensor::new(vec![1, p], h.to_vec()).unwrap(),
            delta: Tensor::new(vec![1, q], d.to_vec()).unwrap(),
        }
    }

    /// Conv-like sample with `positions` rows: `G = Δᵀ H`.
    fn conv_sample(rng: &mut Rng, positions: usize, p: usize, q: usize) -> LayerGradient<f64> {
        let h = Tensor::<f64>::gaussian(&[positions, p], rng);
        let d = Tensor::<f64>::gaussian(&[positions, q], rng);
        let g = d.transpose().unwrap().matmul(&h).unwrap();
        LayerGradient { layer: 0, grad: g, h, delta: d }
    }

    fn sets(samples: Vec<LayerGradient<f64>>) -> Vec<LayerGradientSet<f64>> {
        samples.into_iter().map(|g| LayerGradientSet { layers: vec![g] }).collect()
    }

    fn vec_col(g: &Tensor<f64>) -> Vec<f64> {
        let (q, p) = g.dims2().unwrap();
        let mut out = Vec::with_capacity(q * p);
        for j in 0..p {
            for i in 0..q {
                out.push(g.data()[i * p + j]);
            }
        }
        out
    }

    /// Dense `E[vec(G) vec(G)ᵀ]`.
    fn dense_fisher(samples: &[LayerGradientSet<f64>]) -> Vec<Vec<f64>> {
        let dim = samples[0].layers[0].grad.len();
        let mut f = vec![vec![0.0; dim]; dim];
        for s in samples {
            let v = vec_col(&s.layers[0].grad);
            for i in 0..dim {
                for j in 0..dim {
                    f[i][j] += v[i] * v[j] / samples.len() as f64;
                }
            }
        }
        f
    }

    /// Explicit `U_A ⊗ U_B` on column-stacked vectors.
    fn dense_kron(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<Vec<f64>> {
        let (p, q) = (a.shape()[0], b.shape()[0]);
        let mut k = vec![vec![0.0; p * q]; p * q];
        for j in 0..p {
            for i in 0..q {
                for l in 0..p {
                    for m in 0..q {
                        k[j * q + i][l * q + m] = a.data()[j * p + l] * b.data()[i * q + m];
                    }
                }
            }
        }
        k
    }

    /// Solves `M x = v` by Gaussian elimination with partial pivoting.
    fn solve(mut m: Vec<Vec<f64>>, mut v: Vec<f64>) -> Vec<f64> {
        let n = v.len();
        for col in 0..n {
            let piv = (col..n).max_by(|&a, &b| m[a][col].abs().partial_cmp(&m[b][col].abs()).unwrap()).unwrap();
            m.swap(col, piv);
            v.swap(col, piv);
            for r in col + 1..n {
                let f = m[r][col] / m[col][col];
                for c in col..n {
                    m[r][c] -= f * m[col][c];
                }
                v[r] -= f * v[col];
            }
        }
        let mut x = vec![0.0; n];
        for r in (0..n).rev() {
            let s: f64 = (r + 1..n).map(|c| m[r][c] * x[c]).sum();
            x[r] = (v[r] - s) / m[r][r];
        }
        x
    }

    fn ekfac_one(samples: &[LayerGradientSet<f64>]) -> EkfacFactor {
        let mut s = samples;
        fit_ekfac(&mut s, RELATIVE_DAMPING).unwrap().remove(0)
    }

    #[test]
    fn diag_single_sample_is_square() {
        let s = sets(vec![dense_sample(&[1.0, -2.0], &[3.0])]);
        let f = fit_diag(&mut s.as_slice(), RELATIVE_DAMPING).unwrap().remove(0);
        assert_eq!(f.diag.data(), &[9.0, 36.0]);
        assert_eq!(f.n_samples, 1);
    }

    #[test]
    fn diag_sign_cancels() {
        let s = sets(vec![dense_sample(&[1.0, -2.0], &[3.0]), dense_sample(&[1.0, -2.0], &[-3.0])]);
        let f = fit_diag(&mut s.as_slice(), RELATIVE_DAMPING).unwrap().remove(0);
        assert_eq!(f.diag.data(), &[9.0, 36.0]);
    }

    #[test]
    fn diag_matches_dense_outer_product() {
        let mut rng = Rng::new(3);
        let s = sets((0..50).map(|_| conv_sample(&mut rng, 3, 4, 3)).collect());
        let f = fit_diag(&mut s.as_slice(), RELATIVE_DAMPING).unwrap().remove(0);
        let dense = dense_fisher(&s);
        let diag_col = vec_col(&f.diag);
        for (i, v) in diag_col.iter().enumerate() {
            assert!((v - dense[i][i]).abs() <= 1e-12 * dense[i][i].abs().max(1.0));
        }
    }

    #[test]
    fn diag_quad_form_closed_form() {
        let s = sets(vec![dense_sample(&[1.0, 2.0], &[1.0])]);
        let f = LayerFactor::Diag(fit_diag(&mut s.as_slice(), RELATIVE_DAMPING).unwrap().remove(0));
        let eps = f.damping();
        let g = Tensor::new(vec![1, 2], vec![3.0, -1.0]).unwrap();
        let expected = 9.0 / (1.0 + eps) + 1.0 / (4.0 + eps);
        assert!((f.quad_form_matrix(&g).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn empty_stream_is_an_error() {
        let s: Vec<LayerGradientSet<f64>> = vec![];
        assert!(matches!(fit_diag(&mut s.as_slice(), RELATIVE_DAMPING), Err(FisherError::Empty)));
        assert!(matches!(fit_ekfac(&mut s.as_slice(), RELATIVE_DAMPING), Err(FisherError::Empty)));
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let s = sets(vec![dense_sample(&[1.0, 2.0], &[1.0]), dense_sample(&[1.0, 2.0, 3.0], &[1.0])]);
        assert!(matches!(fit_ekfac(&mut s.as_slice(), RELATIVE_DAMPING), Err(FisherError::Shape { .. })));
    }

    #[test]
    fn ekfac_bases_are_orthogonal() {
        let mut rng = Rng::new(5);
        let s = sets((0..20).map(|_| conv_sample(&mut rng, 4, 5, 3)).collect());
        let f = ekfac_one(&s);
        for u in [&f.u_a, &f.u_b] {
            let n = u.shape()[0];
            let utu = u.transpose().unwrap().matmul(u).unwrap();
            assert!(utu.sub(&Tensor::eye(n)).unwrap().max_abs() < 1e-5);
        }
        assert!(f.sigma.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn ekfac_single_sample_is_exact() {
        let s = sets(vec![dense_sample(&[0.5, -1.0, 2.0], &[1.5, 0.3])]);
        let f = ekfac_one(&s);
        let eps = f.damping;
        let g = &s[0].layers[0].grad;
        let mut dense = dense_fisher(&s);
        for (i, row) in dense.iter_mut().enumerate() {
            row[i] += eps;
        }
        let v = vec_col(g);
        let x = solve(dense, v.clone());
        let oracle: f64 = v.iter().zip(&x).map(|(a, b)| a * b).sum();
        let got = LayerFactor::Ekfac(f).quad_form(&s[0].layers[0]).unwrap();
        assert!((got - oracle).abs() <= 1e-5 * oracle, "{got} vs {oracle}");
    }

    #[test]
    fn sigma_equals_dense_congruence() {
        let mut rng = Rng::new(8);
        // p = 6, q = 4: 24 parameters.
        let s = sets((0..30).map(|_| conv_sample(&mut rng, 3, 6, 4)).collect());
        let f = ekfac_one(&s);
        let k = dense_kron(&f.u_a, &f.u_b);
        let fisher = dense_fisher(&s);
        let dim = k.len();
        let sigma_col = vec_col(&f.sigma);
        for d in 0..dim {
            let mut acc = 0.0;
            for i in 0..dim {
                for j in 0..dim {
                    acc += k[i][d] * fisher[i][j] * k[j][d];
                }
            }
            assert!((acc - sigma_col[d]).abs() <= 1e-10 * acc.abs().max(1.0), "{acc} vs {}", sigma_col[d]);
        }
    }

    #[test]
    fn quad_form_matches_dense_reconstruction() {
        let mut rng = Rng::new(9);
        // p = 3, q = 2: a 6-parameter layer.
        let s = sets((0..10).map(|_| conv_sample(&mut rng, 2, 3, 2)).collect());
        let f = ekfac_one(&s);
        let k = dense_kron(&f.u_a, &f.u_b);
        let sigma = vec_col(&f.sigma);
        let dim = k.len();
        let mut m = vec![vec![0.0; dim]; dim];
        for i in 0..dim {
            for j in 0..dim {
                m[i][j] = (0..dim).map(|d| k[i][d] * sigma[d] * k[j][d]).sum();
            }
            m[i][i] += f.damping;
        }
        let factor = LayerFactor::Ekfac(f);
        for _ in 0..5 {
            let probe = conv_sample(&mut rng, 2, 3, 2);
            let v = vec_col(&probe.grad);
            let x = solve(m.clone(), v.clone());
            let oracle: f64 = v.iter().zip(&x).map(|(a, b)| a * b).sum();
            let got = factor.quad_form(&probe).unwrap();
            assert!((got - oracle).abs() <= 1e-8 * oracle, "{got} vs {oracle}");
            let inv = factor.apply_inverse(&probe.grad).unwrap();
            let inv_col = vec_col(&inv);
            for (a, b) in inv_col.iter().zip(&x) {
                assert!((a - b).abs() <= 1e-8 * b.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn factored_and_dense_projection_agree() {
        let mut rng = Rng::new(10);
        let s = sets((0..10).map(|_| conv_sample(&mut rng, 1, 40, 6)).collect());
        let f = ekfac_one(&s);
        let g = &s[0].layers[0];
        assert!(cheaper_factored(40, 6, 1));
        let a = f.project_sample(g).unwrap();
        let b = f.project(&g.grad).unwrap();
        assert!(a.sub(&b).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn zero_gradients_give_zero() {
        let s = sets(vec![dense_sample(&[0.0, 0.0], &[0.0, 0.0]); 3]);
        let f = ekfac_one(&s);
        assert!(f.sigma.data().iter().all(|&v| v == 0.0));
        let factor = LayerFactor::Ekfac(f);
        assert_eq!(factor.quad_form(&s[0].layers[0]).unwrap(), 0.0);
    }

    #[test]
    fn quad_form_positive_for_nonzero_input() {
        let mut rng = Rng::new(11);
        let s = sets((0..3).map(|_| conv_sample(&mut rng, 1, 5, 4)).collect());
        let f = LayerFactor::Ekfac(ekfac_one(&s));
        let probe = conv_sample(&mut rng, 1, 5, 4);
        assert!(f.quad_form(&probe).unwrap() > 0.0);
        let zero = Tensor::<f64>::zeros(&[4, 5]);
        assert_eq!(f.quad_form_matrix(&zero).unwrap(), 0.0);
    }

    #[test]
    fn fit_is_order_invariant() {
        // Dyadic values keep every partial sum exact.
        let mut rng = Rng::new(12);
        let mut samples: Vec<LayerGradient<f64>> = (0..24)
            .map(|_| {
                let h: Vec<f64> = (0..4).map(|_| (rng.below(9) as f64 - 4.0) / 4.0).collect();
                let d: Vec<f64> = (0..3).map(|_| (rng.below(9) as f64 - 4.0) / 8.0).collect();
                dense_sample(&h, &d)
            })
            .collect();
        let forward = sets(samples.clone());
        samples.reverse();
        let backward = sets(samples);
        let a = fit_diag(&mut forward.as_slice(), RELATIVE_DAMPING).unwrap();
        let b = fit_diag(&mut backward.as_slice(), RELATIVE_DAMPING).unwrap();
        assert_eq!(a, b);
        let ea = ekfac_one(&forward);
        let eb = ekfac_one(&backward);
        assert_eq!(ea.u_a, eb.u_a);
        assert_eq!(ea.u_b, eb.u_b);
        let rel = ea.sigma.sub(&eb.sigma).unwrap().max_abs() / ea.sigma.max_abs();
        assert!(rel < 1e-12, "{rel}");
    }

    #[test]
    fn rescaled_gradients_leave_quad_form_unchanged() {
        let mut rng = Rng::new(13);
        let base: Vec<LayerGradient<f64>> = (0..15).map(|_| conv_sample(&mut rng, 2, 4, 3)).collect();
        let c = 7.5;
        let scaled: Vec<LayerGradient<f64>> = base
            .iter()
            .map(|g| LayerGradient {
                layer: 0,
                grad: g.grad.scale(c).unwrap(),
                h: g.h.scale(c.sqrt()).unwrap(),
                delta: g.delta.scale(c.sqrt()).unwrap(),
            })
            .collect();
        let probe = conv_sample(&mut rng, 2, 4, 3);
        for method in [FisherMethod::Diag, FisherMethod::Ekfac] {
            let f = fit(method, &mut sets(base.clone()), RELATIVE_DAMPING).unwrap().remove(0);
            let fs = fit(method, &mut sets(scaled.clone()), RELATIVE_DAMPING).unwrap().remove(0);
            assert!((fs.damping() / f.damping() - c * c).abs() < 1e-9 * c * c);
            let q = f.quad_form_matrix(&probe.grad).unwrap();
            let qs = fs.quad_form_matrix(&probe.grad.scale(c).unwrap()).unwrap();
            assert!((q - qs).abs() <= 1e-9 * q, "{method}: {q} vs {qs}");
        }
    }

    #[test]
    fn storage_is_factored() {
        let mut rng = Rng::new(14);
        let (p, q) = (120, 100);
        let s = sets((0..4).map(|_| conv_sample(&mut rng, 1, p, q)).collect());
        let f = LayerFactor::Ekfac(ekfac_one(&s));
        assert!(p * q > 10_000);
        assert_eq!(f.storage_len(), p * p + q * q + p * q);
    }

    #[test]
    fn damping_follows_relative_setting() {
        let s = sets(vec![dense_sample(&[1.0, 2.0], &[1.0])]);
        let f = fit_diag(&mut s.as_slice(), 1e-3).unwrap().remove(0);
        assert!((f.damping - 1e-3 * 2.5).abs() < 1e-18);
        assert!(matches!(fit_diag(&mut s.as_slice(), 0.0), Err(FisherError::Damping(_))));
    }

    #[test]
    fn method_parses() {
        assert_eq!("EKFAC".parse::<FisherMethod>().unwrap(), FisherMethod::Ekfac);
        assert_eq!("diag".parse::<FisherMethod>().unwrap(), FisherMethod::Diag);
        assert!("kfac".parse::<FisherMethod>().is_err());
    }
}
