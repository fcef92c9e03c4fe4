use super::Network;
use crate::dihedral::{act_on_plane, GroupElement};
use crate::error::{shape_err, Result};
use crate::glayers::Ctx;
use crate::tensor::{Scalar, Tensor};

/// Rotate-then-predict versus predict-then-rotate for one group element.
#[derive(Clone, Debug)]
pub struct EquivarianceRow {
    pub element: GroupElement,
    pub max_abs: f64,
    /// `max_abs / max|predict-then-rotate|`.
    pub max_rel: f64,
    /// Pixels whose argmax class differs between the two predictions.
    pub mask_diff_px: usize,
    /// Per-pixel largest absolute logit difference, `[H, W]`.
    pub heatmap: Tensor<f64>,
    /// Smallest top-1/top-2 logit margin among the disagreeing pixels (infinite if none).
    pub min_disagree_margin: f64,
}

fn argmax_with_margin<F: Scalar>(logits: &Tensor<F>, pixel: usize, npix: usize) -> (usize, f64) {
    let k = logits.dim(1);
    let mut best = (0, f64::NEG_INFINITY);
    let mut second = f64::NEG_INFINITY;
    for c in 0..k {
        let v = logits.data()[c * npix + pixel].to_f64_lossy();
        if v > best.1 {
            second = best.1;
            best = (c, v);
        } else if v > second {
            second = v;
        }
    }
    (best.0, best.1 - second)
}

/// Checks `forward(g·x) = g·forward(x)` for all eight elements on a single `[1, C, S, S]` image.
pub fn equivariance_report<F: Scalar>(
    net: &mut Network<F>,
    image: &Tensor<F>,
    ctx: Ctx,
) -> Result<Vec<EquivarianceRow>> {
    let &[1, _, h, w] = image.shape() else {
        return shape_err(format!(
            "verification takes one image [1, C, H, W], got {:?}",
            image.shape()
        ));
    };
    if h != w {
        return shape_err(format!("verification needs a square input, got {h}x{w}"));
    }
    let ctx = Ctx { cache: false, ..ctx };
    let base = net.forward(image, ctx)?;
    let npix = h * w;
    let mut rows = Vec::new();
    for g in GroupElement::ALL {
        let a = net.forward(&act_on_plane(g, image)?, ctx)?;
        let b = act_on_plane(g, &base)?;
        let diff = a.zip_map(&b, |p, q| (p - q).abs())?;
        let max_abs = diff.max_abs().to_f64_lossy();
        let scale = b.max_abs().to_f64_lossy();
        let max_rel = if scale > 0.0 { max_abs / scale } else { max_abs };
        let mut heat = Tensor::zeros(&[h, w]);
        for c in 0..a.dim(1) {
            for p in 0..npix {
                let v = diff.data()[c * npix + p].to_f64_lossy();
                let slot = &mut heat.data_mut()[p];
                *slot = f64::max(*slot, v);
            }
        }
        let mut mask_diff_px = 0;
        let mut min_margin = f64::INFINITY;
        for p in 0..npix {
            let (ca, _) = argmax_with_margin(&a, p, npix);
            let (cb, mb) = argmax_with_margin(&b, p, npix);
            if ca != cb {
                mask_diff_px += 1;
                min_margin = min_margin.min(mb);
            }
        }
        rows.push(EquivarianceRow {
            element: g,
            max_abs,
            max_rel,
            mask_diff_px,
            heatmap: heat,
            min_disagree_margin: min_margin,
        });
    }
    Ok(rows)
}
