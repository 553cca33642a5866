use super::{Embedding, Logits, Matrix, ModelError, Result};

fn check(logits: &Logits, labels: &[usize], eps: f32) -> Result<()> {
    if !(0.0..1.0).contains(&eps) {
        return Err(ModelError::InvalidSmoothing(eps));
    }
    if labels.len() != logits.rows() {
        return Err(ModelError::Shape(format!("{} labels for {} logit rows", labels.len(), logits.rows())));
    }
    let classes = logits.classes();
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(ModelError::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

/// Row loss and, if requested, `softmax - target` for that row.
fn row_loss(row: &[f32], label: usize, eps: f64, grad: Option<&mut [f32]>, scale: f64) -> f64 {
    let n = row.len() as f64;
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let sum_exp: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
    let lse = max + sum_exp.ln();
    let off = eps / n;
    let on = 1.0 - eps + off;
    // -sum_c t_c log p_c = lse - sum_c t_c z_c, since sum_c t_c = 1.
    let mean_z: f64 = row.iter().map(|&v| v as f64).sum::<f64>();
    let target_dot = off * (mean_z - row[label] as f64) + on * row[label] as f64;
    if let Some(g) = grad {
        for (c, (gc, &v)) in g.iter_mut().zip(row).enumerate() {
            let p = (v as f64 - lse).exp();
            let t = if c == label { on } else { off };
            *gc = ((p - t) * scale) as f32;
        }
    }
    lse - target_dot
}

/// Mean label-smoothed cross-entropy with target `(1-eps)*onehot + eps/N`.
pub fn ce_label_smoothing(logits: &Logits, labels: &[usize], eps: f32) -> Result<f32> {
    check(logits, labels, eps)?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = labels.iter().enumerate().map(|(r, &l)| row_loss(logits.row(r), l, eps as f64, None, 0.0)).sum();
    Ok((total / labels.len() as f64) as f32)
}

/// Loss together with its gradient with respect to the logits.
pub fn ce_label_smoothing_with_grad(logits: &Logits, labels: &[usize], eps: f32) -> Result<(f32, Matrix)> {
    check(logits, labels, eps)?;
    let mut grad = Matrix::zeros(logits.rows(), logits.classes());
    if labels.is_empty() {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / labels.len() as f64;
    let mut total = 0.0f64;
    for (r, &l) in labels.iter().enumerate() {
        total += row_loss(logits.row(r), l, eps as f64, Some(grad.row_mut(r)), scale);
    }
    Ok(((total * scale) as f32, grad))
}

/// Scales every row to unit L2 norm. All-zero rows are left unchanged and
/// flagged in `zero_rows`.
pub fn l2_normalize(embedding: &Embedding) -> Embedding {
    let mut values = embedding.values.clone();
    let mut zero_rows = vec![false; values.rows];
    for (r, flag) in zero_rows.iter_mut().enumerate() {
        let row = values.row_mut(r);
        let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if norm == 0.0 {
            *flag = true;
            continue;
        }
        row.iter_mut().for_each(|v| *v = (*v as f64 / norm) as f32);
    }
    Embedding { values, normalized: true, zero_rows }
}
