use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Network;
use crate::error::Result;
use crate::glayers::{record_relu_signs, Ctx, Mode};
use crate::tensor::Tensor;
use crate::train::cross_entropy_loss;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error. Central differences at `FD_STEP`
/// in f64 carry about 5e-11 of rounding noise, so smaller gradients cannot be
/// resolved to a relative 1e-5 and are held to an absolute 1e-10 instead.
pub const REL_FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradRow {
    /// Layer name, or `input` for the gradient with respect to the image.
    pub layer: String,
    /// Entries compared. Every entry when the layer has no more than requested.
    pub probes: usize,
    /// Entries passed over because the ±step straddled a ReLU kink.
    pub kinks: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

/// Which analytic gradient to spoil on purpose, for negative controls.
#[derive(Clone, Debug, Default)]
pub struct Corruption {
    pub layer: Option<String>,
}

fn layer_of(param: &str) -> &str {
    param.rsplit_once('.').map_or(param, |(l, _)| l)
}

fn loss(net: &mut Network<f64>, x: &Tensor<f64>, labels: &[usize]) -> Result<(f64, Vec<bool>)> {
    let (y, signs) = record_relu_signs(|| {
        net.forward(
            x,
            Ctx {
                mode: Mode::Train,
                cache: false,
            },
        )
    });
    Ok((cross_entropy_loss(&y?, labels)?.0, signs))
}

#[derive(Default)]
struct Tally {
    probes: usize,
    kinks: usize,
    rel: f64,
    abs: f64,
}

impl Tally {
    /// `eval(delta)` returns the loss with the probed entry shifted by `delta`.
    fn probe(
        &mut self,
        analytic: f64,
        base: &[bool],
        mut eval: impl FnMut(f64) -> Result<(f64, Vec<bool>)>,
    ) -> Result<()> {
        let (lp, sp) = eval(FD_STEP)?;
        let (lm, sm) = eval(-FD_STEP)?;
        if sp != base || sm != base {
            self.kinks += 1;
            return Ok(());
        }
        let n = (lp - lm) / (2.0 * FD_STEP);
        self.probes += 1;
        self.rel = self.rel.max(relative_error(analytic, n));
        self.abs = self.abs.max((analytic - n).abs());
        Ok(())
    }

    fn row(self, layer: String) -> GradRow {
        GradRow {
            layer,
            probes: self.probes,
            kinks: self.kinks,
            max_rel_err: self.rel,
            max_abs_err: self.abs,
        }
    }
}

/// Compares the backpropagated gradient of the mean cross-entropy loss with
/// central differences, `probes` entries per trainable layer plus the input.
///
/// Batch norm runs in training mode, so away from ReLU kinks the loss is a
/// smooth function of every parameter and of the input. A probe whose
/// perturbation flips the sign of any ReLU input has no meaningful central
/// difference; it is counted in `kinks` and another entry is drawn.
pub fn gradcheck(
    net: &mut Network<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    probes: usize,
    seed: u64,
    corrupt: &Corruption,
) -> Result<Vec<GradRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    net.zero_grad();
    let y = net.forward(x, Ctx::TRAIN)?;
    let (_, g) = cross_entropy_loss(&y, labels)?;
    let gx = net.backward(&g)?;
    net.clear_cache();
    let (_, base) = loss(net, x, labels)?;

    // group parameter tensors by layer, keeping execution order
    let mut layers: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, p) in net.params().iter().enumerate() {
        let l = layer_of(&p.name);
        match layers.last_mut() {
            Some((name, v)) if name == l => v.push(i),
            _ => layers.push((l.to_string(), vec![i])),
        }
    }
    let analytic: Vec<Tensor<f64>> = net.params().iter().map(|p| p.grad.clone()).collect();

    let mut rows = Vec::new();
    for (layer, idx) in &layers {
        let scale = if corrupt.layer.as_deref() == Some(layer.as_str()) {
            1.5
        } else {
            1.0
        };
        let sizes: Vec<usize> = idx.iter().map(|&i| analytic[i].len()).collect();
        let total: usize = sizes.iter().sum();
        let mut order: Vec<usize> = (0..total).collect();
        order.shuffle(&mut rng);
        let mut tally = Tally::default();
        for flat in order {
            if tally.probes == probes {
                break;
            }
            let (mut t, mut off) = (0, flat);
            while off >= sizes[t] {
                off -= sizes[t];
                t += 1;
            }
            let pi = idx[t];
            let orig = net.params()[pi].value.data()[off];
            tally.probe(analytic[pi].data()[off] * scale, &base, |d| {
                net.params_mut()[pi].value.data_mut()[off] = orig + d;
                let r = loss(net, x, labels);
                net.params_mut()[pi].value.data_mut()[off] = orig;
                r
            })?;
        }
        rows.push(tally.row(layer.clone()));
    }

    let mut order: Vec<usize> = (0..x.len()).collect();
    order.shuffle(&mut rng);
    let mut tally = Tally::default();
    let mut xp = x.clone();
    for i in order {
        if tally.probes == probes {
            break;
        }
        let orig = x.data()[i];
        tally.probe(gx.data()[i], &base, |d| {
            xp.data_mut()[i] = orig + d;
            let r = loss(net, &xp, labels);
            xp.data_mut()[i] = orig;
            r
        })?;
    }
    rows.push(tally.row("input".into()));
    net.zero_grad();
    Ok(rows)
}
