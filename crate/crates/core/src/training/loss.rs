use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use crate::{Error, Result, Scalar};

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub loss: T,
    /// Gradient of the loss with respect to the raw (unnormalized) combined rows.
    pub grad_combined: Array2<T>,
}

/// Batch contrastive loss over cosine logits.
///
/// `loss = mean_i [ logsumexp_j(tau * cos(c_i, t_j)) - tau * cos(c_i, t_i) ]`,
/// with row `i` of `targets` the positive for row `i` of `combined` and every
/// other target in the batch a negative. Rows are normalized inside the loss,
/// so the gradient includes the normalization Jacobian.
///
/// The computation always runs in f64: with large `tau`, f32 cosines would
/// put rounding error of order `tau * 2^-24` into every logit.
pub fn contrastive_loss<T: Scalar>(
    combined: ArrayView2<T>,
    targets: ArrayView2<T>,
    tau: T,
) -> Result<LossOutput<T>> {
    let wide = |m: ArrayView2<T>| m.mapv(|v| v.to_f64().expect("float converts to f64"));
    let narrow = |v: f64| T::from_f64(v).expect("f64 converts to float");
    let tau = tau.to_f64().expect("float converts to f64");
    let out = loss_f64(wide(combined).view(), wide(targets).view(), tau)?;
    Ok(LossOutput {
        loss: narrow(out.loss),
        grad_combined: out.grad_combined.mapv(narrow),
    })
}

fn loss_f64(
    combined: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    tau: f64,
) -> Result<LossOutput<f64>> {
    if combined.dim() != targets.dim() {
        return Err(Error::ShapeMismatch(format!(
            "combined {:?} vs targets {:?}",
            combined.dim(),
            targets.dim()
        )));
    }
    let b = combined.nrows();
    if b == 0 {
        return Err(Error::Empty("batch".into()));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "temperature must be positive, got {tau}"
        )));
    }

    let (cn, c_norm) = normalize_rows(combined, "combined")?;
    let (tn, _) = normalize_rows(targets, "target")?;
    let logits = cn.dot(&tn.t()) * tau;

    let bt = b as f64;
    let mut total = 0.0;
    // d loss / d logits = (softmax - onehot) / B
    let mut d_logits = Array2::zeros((b, b));
    for (i, (row, mut drow)) in logits
        .rows()
        .into_iter()
        .zip(d_logits.rows_mut())
        .enumerate()
    {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum = row.iter().map(|&l| (l - max).exp()).fold(0.0, |a, e| a + e);
        let lse = max + sum.ln();
        total += lse - row[i];
        Zip::from(&mut drow)
            .and(&row)
            .for_each(|g, &l| *g = (l - lse).exp() / bt);
        drow[i] -= 1.0 / bt;
    }
    let loss = total / bt;

    // Through the logits scale and the target-side dot product ...
    let d_cn = d_logits.dot(&tn) * tau;
    // ... then the row normalization: (g - c_hat (c_hat . g)) / |c|
    let mut grad = d_cn;
    Zip::from(grad.rows_mut())
        .and(cn.rows())
        .and(&c_norm)
        .for_each(|mut g, c, &norm| {
            let proj = g.dot(&c);
            g.zip_mut_with(&c, |gv, &cv| *gv = (*gv - cv * proj) / norm);
        });

    Ok(LossOutput {
        loss,
        grad_combined: grad,
    })
}

fn normalize_rows(m: ArrayView2<f64>, what: &str) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = m.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(i) = norms.iter().position(|n| !(*n > 0.0) || !n.is_finite()) {
        return Err(Error::ZeroNorm(format!("{what} row {i}")));
    }
    let mut out = m.to_owned();
    Zip::from(out.rows_mut())
        .and(&norms)
        .for_each(|mut r, &n| r.mapv_inplace(|v| v / n));
    Ok((out, norms))
}
