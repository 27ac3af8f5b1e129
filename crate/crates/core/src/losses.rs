//! Training objectives over embeddings.
//!
//! Every loss returns its value together with exact gradients with respect to
//! the (unnormalized) image and text embeddings it was given. Cosine
//! similarities normalize internally, so the normalization Jacobian is part of
//! each gradient.

use crate::encoder::l2_normalize_backward;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, NORM_EPS};

/// Default weight of the contrastive distillation term.
pub const DEFAULT_LAMBDA_CD: f64 = 1.0;
/// Default weight of the modality alignment term.
pub const DEFAULT_BETA_MAP: f64 = 0.75;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub d_image_embeddings: Matrix,
    pub d_text_embeddings: Matrix,
}

impl LossOutput {
    fn scaled(&self, w: f64) -> Self {
        Self {
            value: w * self.value,
            d_image_embeddings: self.d_image_embeddings.scale(w),
            d_text_embeddings: self.d_text_embeddings.scale(w),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_cd: f64,
    pub beta_map: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cd: DEFAULT_LAMBDA_CD,
            beta_map: DEFAULT_BETA_MAP,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_cd: f64, beta_map: f64) -> Result<Self> {
        if !(lambda_cd >= 0.0 && beta_map >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be non-negative (lambda_cd={lambda_cd}, beta_map={beta_map})"
            )));
        }
        Ok(Self { lambda_cd, beta_map })
    }
}

/// Weighted sum of the three objectives. Components keep their own gradients
/// (already multiplied by their weight) because the task-batch and
/// reference-batch gradients live on different embedding matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLoss {
    pub value: f64,
    pub ce: LossOutput,
    pub cd: LossOutput,
    pub map: LossOutput,
}

/// Normalized operands of a cosine-similarity matrix, kept for the backward pass.
struct CosineSim<'a> {
    a: &'a Matrix,
    b: &'a Matrix,
    a_unit: Matrix,
    b_unit: Matrix,
    sims: Matrix,
}

impl<'a> CosineSim<'a> {
    fn new(a: &'a Matrix, b: &'a Matrix, op: &'static str) -> Result<Self> {
        if a.cols() != b.cols() {
            return Err(Error::ShapeMismatch {
                op,
                left: a.shape(),
                right: b.shape(),
            });
        }
        let a_unit = linalg::l2_normalize_rows(a, NORM_EPS);
        let b_unit = linalg::l2_normalize_rows(b, NORM_EPS);
        let sims = linalg::matmul_nt(&a_unit, &b_unit)?;
        Ok(Self {
            a,
            b,
            a_unit,
            b_unit,
            sims,
        })
    }

    /// Maps `∂L/∂S` to `(∂L/∂a, ∂L/∂b)`.
    fn backward(&self, d_sims: &Matrix) -> Result<(Matrix, Matrix)> {
        let du = linalg::matmul(d_sims, &self.b_unit)?;
        let dv = linalg::matmul_tn(d_sims, &self.a_unit)?;
        Ok((l2_normalize_backward(self.a, &du), l2_normalize_backward(self.b, &dv)))
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be positive, got {t}")))
    }
}

fn check_pair(a: &Matrix, b: &Matrix, op: &'static str) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    if a.rows() == 0 {
        return Err(Error::Empty(op));
    }
    Ok(())
}

/// Softmax cross-entropy of each image against the class text embeddings,
/// averaged over the batch.
pub fn classification_loss(
    image_emb: &Matrix,
    class_text_emb: &Matrix,
    labels: &[usize],
    temperature: f64,
) -> Result<LossOutput> {
    check_temperature(temperature)?;
    if image_emb.rows() == 0 {
        return Err(Error::Empty("classification_loss"));
    }
    if labels.len() != image_emb.rows() {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {} embeddings",
            labels.len(),
            image_emb.rows()
        )));
    }
    let classes = class_text_emb.rows();
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let cos = CosineSim::new(image_emb, class_text_emb, "classification_loss")?;
    let batch = labels.len() as f64;
    let mut value = 0.0;
    let mut d_sims = Matrix::zeros(labels.len(), classes);
    for (i, &y) in labels.iter().enumerate() {
        let logits: Vec<f64> = cos.sims.row(i).iter().map(|s| s / temperature).collect();
        let log_p = linalg::log_softmax(&logits);
        value -= log_p[y];
        for (j, d) in d_sims.row_mut(i).iter_mut().enumerate() {
            let target = if j == y { 1.0 } else { 0.0 };
            *d = (log_p[j].exp() - target) / (batch * temperature);
        }
    }
    let (d_img, d_txt) = cos.backward(&d_sims)?;
    Ok(LossOutput {
        value: (value / batch).max(0.0),
        d_image_embeddings: d_img,
        d_text_embeddings: d_txt,
    })
}

/// Column-wise softmax.
fn softmax_cols(z: &Matrix) -> Matrix {
    linalg::softmax_rows(&z.transpose()).transpose()
}

/// Contrastive distillation: row-wise plus column-wise KL between the teacher's
/// and the student's temperature-scaled similarity distributions. Summed (not
/// averaged) over the batch. Teacher inputs receive no gradient.
pub fn cd_loss(
    teacher_img: &Matrix,
    teacher_txt: &Matrix,
    student_img: &Matrix,
    student_txt: &Matrix,
    temperature: f64,
) -> Result<LossOutput> {
    check_temperature(temperature)?;
    check_pair(teacher_img, teacher_txt, "cd_loss")?;
    check_pair(student_img, student_txt, "cd_loss")?;
    if teacher_img.rows() != student_img.rows() {
        return Err(Error::ShapeMismatch {
            op: "cd_loss",
            left: teacher_img.shape(),
            right: student_img.shape(),
        });
    }
    let teacher = linalg::cosine_sim_matrix(teacher_img, teacher_txt)?;
    let z_teacher = teacher.scale(1.0 / temperature);
    cd_loss_from_teacher_logits(&z_teacher, student_img, student_txt, temperature)
}

/// [`cd_loss`] with precomputed teacher logits `S⁰/τ`.
pub fn cd_loss_from_teacher_logits(
    z_teacher: &Matrix,
    student_img: &Matrix,
    student_txt: &Matrix,
    temperature: f64,
) -> Result<LossOutput> {
    check_temperature(temperature)?;
    check_pair(student_img, student_txt, "cd_loss")?;
    let cos = CosineSim::new(student_img, student_txt, "cd_loss")?;
    let z_student = cos.sims.scale(1.0 / temperature);
    if z_teacher.shape() != z_student.shape() {
        return Err(Error::ShapeMismatch {
            op: "cd_loss",
            left: z_teacher.shape(),
            right: z_student.shape(),
        });
    }
    let z_teacher_t = z_teacher.transpose();
    let z_student_t = z_student.transpose();
    let value = linalg::kl_rows(z_teacher, &z_student)? + linalg::kl_rows(&z_teacher_t, &z_student_t)?;

    // d KL(p ‖ softmax(z)) / dz = softmax(z) − p
    let mut dz = linalg::softmax_rows(&z_student).sub(&linalg::softmax_rows(z_teacher))?;
    dz.axpy(1.0, &softmax_cols(&z_student))?;
    dz.axpy(-1.0, &softmax_cols(z_teacher))?;
    let (d_img, d_txt) = cos.backward(&dz.scale(1.0 / temperature))?;
    Ok(LossOutput {
        value,
        d_image_embeddings: d_img,
        d_text_embeddings: d_txt,
    })
}

/// Symmetric in-batch InfoNCE: image-to-text plus text-to-image, each a mean
/// over the batch.
pub fn map_loss(student_img: &Matrix, student_txt: &Matrix, temperature: f64) -> Result<LossOutput> {
    check_temperature(temperature)?;
    check_pair(student_img, student_txt, "map_loss")?;
    let cos = CosineSim::new(student_img, student_txt, "map_loss")?;
    let b = student_img.rows();
    let z = cos.sims.scale(1.0 / temperature);
    let z_t = z.transpose();
    let mut value = 0.0;
    for i in 0..b {
        value -= linalg::log_softmax(z.row(i))[i];
        value -= linalg::log_softmax(z_t.row(i))[i];
    }
    let bf = b as f64;
    let mut dz = linalg::softmax_rows(&z);
    dz.axpy(1.0, &softmax_cols(&z))?;
    for i in 0..b {
        dz.set(i, i, dz.get(i, i) - 2.0);
    }
    let (d_img, d_txt) = cos.backward(&dz.scale(1.0 / (bf * temperature)))?;
    Ok(LossOutput {
        value: (value / bf).max(0.0),
        d_image_embeddings: d_img,
        d_text_embeddings: d_txt,
    })
}

/// `L = L_CE + λ·L_CD + β·L_MAP`.
pub fn total_loss(ce: &LossOutput, cd: &LossOutput, map: &LossOutput, weights: LossWeights) -> CombinedLoss {
    let ce = ce.clone();
    let cd = cd.scaled(weights.lambda_cd);
    let map = map.scaled(weights.beta_map);
    CombinedLoss {
        value: ce.value + cd.value + map.value,
        ce,
        cd,
        map,
    }
}

/// Mean cosine similarity of index-paired image and text embeddings.
pub fn modality_gap(image_emb: &Matrix, text_emb: &Matrix) -> Result<f64> {
    check_pair(image_emb, text_emb, "modality_gap")?;
    let a = linalg::l2_normalize_rows(image_emb, NORM_EPS);
    let b = linalg::l2_normalize_rows(text_emb, NORM_EPS);
    let sum: f64 = a.row_iter().zip(b.row_iter()).map(|(x, y)| linalg::dot(x, y)).sum();
    Ok(sum / image_emb.rows() as f64)
}
