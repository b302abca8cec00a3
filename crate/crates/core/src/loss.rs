//! Losses and metrics over logits. Everything here is computed in double
//! precision; gradients are w.r.t. the logits of the mean loss.

use ndarray::{Array2, ArrayView1, Zip};

use crate::error::{Error, Result};
use crate::model::argmax_rows;

fn log_softmax_row(row: ArrayView1<f64>) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v - lse).collect()
}

pub fn log_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(logits.raw_dim());
    for (mut o, row) in out.rows_mut().into_iter().zip(logits.rows()) {
        for (dst, v) in o.iter_mut().zip(log_softmax_row(row)) {
            *dst = v;
        }
    }
    out
}

pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    log_softmax(logits).mapv(f64::exp)
}

fn check_labels(logits: &Array2<f64>, labels: &[usize]) -> Result<()> {
    let (n, k) = logits.dim();
    if n != labels.len() {
        return Err(Error::Shape {
            expected: format!("{n} labels"),
            actual: format!("{} labels", labels.len()),
        });
    }
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: k,
        });
    }
    Ok(())
}

fn check_pair(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape {
            expected: format!("{:?}", a.dim()),
            actual: format!("{:?}", b.dim()),
        });
    }
    if a.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(())
}

/// Mean negative log-likelihood of `labels` under softmax(`logits`).
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    Ok(cross_entropy_with_grad(logits, labels)?.0)
}

pub fn cross_entropy_with_grad(logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    check_labels(logits, labels)?;
    let n = labels.len() as f64;
    let logp = log_softmax(logits);
    let loss = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -logp[(i, y)])
        .sum::<f64>()
        / n;
    let mut grad = logp.mapv(f64::exp);
    for (i, &y) in labels.iter().enumerate() {
        grad[(i, y)] -= 1.0;
    }
    grad /= n;
    Ok((loss, grad))
}

/// Mean KL(p || q) with p = softmax(teacher), q = softmax(student).
pub fn kl_divergence(teacher: &Array2<f64>, student: &Array2<f64>) -> Result<f64> {
    Ok(kl_with_grads(teacher, student)?.value)
}

pub struct KlGrads {
    pub value: f64,
    /// Gradient w.r.t. the student logits.
    pub student: Array2<f64>,
    /// Gradient w.r.t. the teacher logits (used only when the teacher is
    /// not treated as a constant target).
    pub teacher: Array2<f64>,
}

pub fn kl_with_grads(teacher: &Array2<f64>, student: &Array2<f64>) -> Result<KlGrads> {
    check_pair(teacher, student)?;
    let n = teacher.nrows() as f64;
    let logp = log_softmax(teacher);
    let logq = log_softmax(student);
    let p = logp.mapv(f64::exp);
    let q = logq.mapv(f64::exp);
    let mut per_row = Vec::with_capacity(teacher.nrows());
    for i in 0..teacher.nrows() {
        let kl: f64 = (0..teacher.ncols())
            .filter(|&j| p[(i, j)] > 0.0)
            .map(|j| p[(i, j)] * (logp[(i, j)] - logq[(i, j)]))
            .sum();
        per_row.push(kl.max(0.0));
    }
    let value = per_row.iter().sum::<f64>() / n;
    let student_grad = (&q - &p) / n;
    let mut teacher_grad = Array2::zeros(teacher.raw_dim());
    Zip::indexed(&mut teacher_grad).for_each(|(i, j), g| {
        let pij = p[(i, j)];
        *g = if pij > 0.0 {
            pij * (logp[(i, j)] - logq[(i, j)] - per_row[i]) / n
        } else {
            0.0
        };
    });
    Ok(KlGrads {
        value,
        student: student_grad,
        teacher: teacher_grad,
    })
}

/// Fraction of rows whose argmax (ties to the lowest index) equals the label.
pub fn accuracy(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = argmax_rows(logits)
        .into_iter()
        .zip(labels)
        .filter(|(p, y)| p == *y)
        .count();
    correct as f64 / labels.len() as f64
}

/// Per-row correctness, for accumulating accuracy over chunks.
pub fn correct_count(logits: &Array2<f64>, labels: &[usize]) -> usize {
    argmax_rows(logits)
        .into_iter()
        .zip(labels)
        .filter(|(p, y)| p == *y)
        .count()
}
