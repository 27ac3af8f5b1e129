//! Null-space gradient projection.
//!
//! After a task is learned, the input activations of every trainable layer are
//! summarized by a Frobenius-normalized gram matrix `XᵀX / ‖XᵀX‖_F`, which has
//! the same right null space as `X`. Grams are summed across tasks; the
//! eigenvectors of the sum whose eigenvalues make up at most a fraction `ρ` of
//! the spectrum span the (approximate) common null space, and `P = V₂V₂ᵀ`
//! projects gradients into it. With `ρ = 0` only exact zero eigenvalues are
//! admitted, so `X·(P·G) = 0` for every absorbed `X`.

use crate::encoder::{ForwardTrace, Gradients};
use crate::error::{Error, Result};
use crate::linalg::{self, EigenSpectrum, Matrix};

/// Default null-space budget ratio.
pub const DEFAULT_RHO: f64 = 0.15;

/// `XᵀX / ‖XᵀX‖_F`.
pub fn gram_from_activations(x: &Matrix) -> Result<Matrix> {
    if x.rows() == 0 || x.cols() == 0 {
        return Err(Error::Empty("gram_from_activations"));
    }
    normalize_gram(linalg::matmul_tn(x, x)?)
}

fn normalize_gram(xtx: Matrix) -> Result<Matrix> {
    let norm = linalg::frobenius_norm(&xtx);
    if norm == 0.0 {
        return Err(Error::ZeroActivations);
    }
    Ok(xtx.scale(1.0 / norm))
}

/// Builds per-layer grams from a stream of captured batches without keeping the
/// activations. At most `cap` rows contribute.
#[derive(Debug, Clone)]
pub struct StreamingGram {
    sums: Vec<Matrix>,
    rows: usize,
    cap: usize,
}

impl StreamingGram {
    pub fn new(layer_dims: &[usize], cap: usize) -> Self {
        Self {
            sums: layer_dims.iter().map(|&d| Matrix::zeros(d, d)).collect(),
            rows: 0,
            cap,
        }
    }

    pub fn rows_seen(&self) -> usize {
        self.rows
    }

    pub fn is_full(&self) -> bool {
        self.rows >= self.cap
    }

    /// Adds the layer inputs of one captured batch.
    pub fn absorb(&mut self, trace: &ForwardTrace) -> Result<()> {
        if trace.layer_inputs.len() != self.sums.len() {
            return Err(Error::InvalidArgument(format!(
                "trace has {} layers, gram expects {}",
                trace.layer_inputs.len(),
                self.sums.len()
            )));
        }
        let batch = trace.layer_inputs.first().map_or(0, Matrix::rows);
        let take = batch.min(self.cap.saturating_sub(self.rows));
        if take == 0 {
            return Ok(());
        }
        for (sum, x) in self.sums.iter_mut().zip(&trace.layer_inputs) {
            let x = if take < batch { x.row_range(0, take) } else { x.clone() };
            sum.axpy(1.0, &linalg::matmul_tn(&x, &x)?)?;
        }
        self.rows += take;
        Ok(())
    }

    /// Normalized grams, one per layer.
    pub fn finish(self) -> Result<Vec<Matrix>> {
        self.sums.into_iter().map(normalize_gram).collect()
    }
}

/// Running sum of per-task normalized grams, one matrix per trainable layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GramAccumulator {
    pub per_layer: Vec<Matrix>,
    pub tasks_absorbed: usize,
    pub layer_dims: Vec<usize>,
}

impl GramAccumulator {
    pub fn new(layer_dims: &[usize]) -> Self {
        Self {
            per_layer: layer_dims.iter().map(|&d| Matrix::zeros(d, d)).collect(),
            tasks_absorbed: 0,
            layer_dims: layer_dims.to_vec(),
        }
    }

    /// Adds one task's grams. Each must be `d_l × d_l` with unit Frobenius norm.
    pub fn accumulate(&mut self, layer_grams: &[Matrix]) -> Result<()> {
        if layer_grams.len() != self.layer_dims.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} layer grams, got {}",
                self.layer_dims.len(),
                layer_grams.len()
            )));
        }
        for (layer, (g, &d)) in layer_grams.iter().zip(&self.layer_dims).enumerate() {
            if g.shape() != (d, d) {
                return Err(Error::ShapeMismatch {
                    op: "accumulate",
                    left: (d, d),
                    right: g.shape(),
                });
            }
            let norm = linalg::frobenius_norm(g);
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::NotNormalized { layer, norm });
            }
        }
        for (acc, g) in self.per_layer.iter_mut().zip(layer_grams) {
            acc.axpy(1.0, g)?;
        }
        self.tasks_absorbed += 1;
        Ok(())
    }

    pub fn spectra(&self) -> Result<Vec<EigenSpectrum>> {
        self.per_layer.iter().map(linalg::sym_eig).collect()
    }
}

/// Number of trailing (smallest) eigenvalues whose sum stays within
/// `rho · Σ values`. Ties at the boundary are included. A zero spectrum
/// admits every direction.
pub fn adaptive_split(spectrum: &EigenSpectrum, rho: f64) -> Result<usize> {
    split_values(&spectrum.values, rho)
}

pub(crate) fn split_values(values: &[f64], rho: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!("rho must lie in [0, 1], got {rho}")));
    }
    // Sum in the same (ascending) order as the scan so that rho = 1 admits
    // everything exactly.
    let total: f64 = values.iter().rev().sum();
    if total == 0.0 {
        return Ok(values.len());
    }
    let budget = rho * total;
    let mut running = 0.0;
    let mut k = 0;
    for &v in values.iter().rev() {
        running += v;
        if running <= budget {
            k += 1;
        } else {
            break;
        }
    }
    Ok(k)
}

/// Per-layer orthogonal projectors onto the retained null space.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub per_layer: Vec<Matrix>,
    pub null_dims: Vec<usize>,
    pub rho_used: f64,
}

impl Projector {
    /// Unconstrained projector (`P = I` on every layer).
    pub fn identity(layer_dims: &[usize]) -> Self {
        Self {
            per_layer: layer_dims.iter().map(|&d| Matrix::identity(d)).collect(),
            null_dims: layer_dims.to_vec(),
            rho_used: 1.0,
        }
    }

    /// Fully constrained projector (`P = 0` on every layer).
    pub fn zeros(layer_dims: &[usize]) -> Self {
        Self {
            per_layer: layer_dims.iter().map(|&d| Matrix::zeros(d, d)).collect(),
            null_dims: vec![0; layer_dims.len()],
            rho_used: 0.0,
        }
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        self.per_layer.iter().map(Matrix::rows).collect()
    }

    /// Measures how far each layer is from being an orthogonal projector of
    /// rank `null_dims[l]`.
    pub fn diagnostics(&self) -> Result<Vec<ProjectorDiagnostics>> {
        self.per_layer
            .iter()
            .zip(&self.null_dims)
            .map(|(p, &k)| {
                let p2 = linalg::matmul(p, p)?;
                let eig = linalg::sym_eig(&Matrix::from_fn(p.rows(), p.cols(), |i, j| {
                    0.5 * (p.get(i, j) + p.get(j, i))
                }))?;
                let eig_defect = eig
                    .values
                    .iter()
                    .map(|&v| v.abs().min((v - 1.0).abs()))
                    .fold(0.0, f64::max);
                Ok(ProjectorDiagnostics {
                    symmetry: p.symmetry_defect(),
                    idempotence: linalg::frobenius_norm(&p2.sub(p)?),
                    trace_defect: (p.trace() - k as f64).abs(),
                    eigen_defect: eig_defect,
                })
            })
            .collect()
    }
}

/// Residuals of the projector identities for one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectorDiagnostics {
    /// `‖P − Pᵀ‖_max`
    pub symmetry: f64,
    /// `‖P² − P‖_F`
    pub idempotence: f64,
    /// `|trace(P) − null_dim|`
    pub trace_defect: f64,
    /// Largest distance of an eigenvalue of `P` from {0, 1}.
    pub eigen_defect: f64,
}

/// Eigendecomposes each accumulated gram and keeps the trailing
/// eigenvectors admitted by `rho` as the projector's range.
pub fn build_projector(acc: &GramAccumulator, rho: f64) -> Result<Projector> {
    if acc.tasks_absorbed == 0 {
        return Err(Error::InvalidArgument("no tasks absorbed yet".into()));
    }
    let mut per_layer = Vec::with_capacity(acc.per_layer.len());
    let mut null_dims = Vec::with_capacity(acc.per_layer.len());
    for m in &acc.per_layer {
        let spectrum = linalg::sym_eig(m)?;
        let k = adaptive_split(&spectrum, rho)?;
        per_layer.push(projector_from_spectrum(&spectrum, k));
        null_dims.push(k);
    }
    Ok(Projector {
        per_layer,
        null_dims,
        rho_used: rho,
    })
}

/// `V₂V₂ᵀ` where `V₂` holds the last `k` eigenvectors.
fn projector_from_spectrum(spectrum: &EigenSpectrum, k: usize) -> Matrix {
    let d = spectrum.dim();
    let v2 = Matrix::from_fn(d, k, |i, j| spectrum.vectors.get(i, d - k + j));
    linalg::matmul_nt(&v2, &v2).expect("consistent factor shapes")
}

/// `ΔW_l = P_l · G_l` for every layer.
pub fn project_update(p: &Projector, grads: &Gradients) -> Result<Gradients> {
    if p.per_layer.len() != grads.layers.len() {
        return Err(Error::InvalidArgument(format!(
            "projector has {} layers, gradients have {}",
            p.per_layer.len(),
            grads.layers.len()
        )));
    }
    let layers = p
        .per_layer
        .iter()
        .zip(&grads.layers)
        .map(|(pl, g)| {
            if pl.cols() != g.rows() {
                return Err(Error::ShapeMismatch {
                    op: "project_update",
                    left: pl.shape(),
                    right: g.shape(),
                });
            }
            linalg::matmul(pl, g)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Gradients { layers })
}

/// One row of a spectrum export: `layer,index,eigenvalue,selected`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectrumRow {
    pub layer: usize,
    pub index: usize,
    pub eigenvalue: f64,
    /// Whether the eigenvector belongs to the projector's null space.
    pub selected: bool,
}

pub fn spectrum_rows(acc: &GramAccumulator, rho: f64) -> Result<Vec<SpectrumRow>> {
    let mut rows = Vec::new();
    for (layer, spectrum) in acc.spectra()?.iter().enumerate() {
        let k = adaptive_split(spectrum, rho)?;
        let d = spectrum.dim();
        rows.extend(
            spectrum
                .values
                .iter()
                .enumerate()
                .map(|(index, &eigenvalue)| SpectrumRow {
                    layer,
                    index,
                    eigenvalue,
                    selected: index >= d - k,
                }),
        );
    }
    Ok(rows)
}
