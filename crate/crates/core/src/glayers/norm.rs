use super::{expect_rank5, Ctx, Layer, Mode, Param};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-channel affine parameters and running statistics of a batch-norm layer.
///
/// Statistics are pooled over batch, orientation, and spatial axes together,
/// so normalizing commutes with every group action.
#[derive(Clone, Debug)]
pub struct BatchNormState<F: Scalar> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Tensor<F>,
    pub running_var: Tensor<F>,
    pub eps: f64,
    pub momentum: f64,
    pub initialized: bool,
}

impl<F: Scalar> BatchNormState<F> {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNormState {
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(&[channels], F::one())),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], F::one()),
            eps: 1e-5,
            momentum: 0.1,
            initialized: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }
}

struct NormCache<F: Scalar> {
    xhat: Tensor<F>,
    inv_std: Vec<F>,
    mode: Mode,
}

pub struct GroupBatchNorm<F: Scalar> {
    name: String,
    pub state: BatchNormState<F>,
    cache: Option<NormCache<F>>,
}

impl<F: Scalar> GroupBatchNorm<F> {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        let name = name.into();
        GroupBatchNorm {
            state: BatchNormState::new(&name, channels),
            name,
            cache: None,
        }
    }
}

/// Per-channel mean and biased variance over all non-channel axes, in a fixed order.
fn channel_stats<F: Scalar>(x: &Tensor<F>, c: usize, inner: usize) -> (Vec<f64>, Vec<f64>) {
    let n = x.dim(0);
    let count = (n * inner) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for item in 0..n {
            let base = (item * c + ch) * inner;
            s += x.data()[base..base + inner]
                .iter()
                .map(|v| v.to_f64_lossy())
                .sum::<f64>();
        }
        let m = s / count;
        let mut q = 0.0;
        for item in 0..n {
            let base = (item * c + ch) * inner;
            q += x.data()[base..base + inner]
                .iter()
                .map(|v| {
                    let d = v.to_f64_lossy() - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = q / count;
    }
    (mean, var)
}

impl<F: Scalar> Layer<F> for GroupBatchNorm<F> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor<F>, ctx: Ctx) -> Result<Tensor<F>> {
        let [n, c, g, h, w] = expect_rank5(x, &self.name)?;
        if c != self.state.channels() {
            return shape_err(format!(
                "{}: expected {} channels, got {c}",
                self.name,
                self.state.channels()
            ));
        }
        let inner = g * h * w;
        let st = &mut self.state;
        let (mean, inv_std): (Vec<f64>, Vec<f64>) = match ctx.mode {
            Mode::Train => {
                if n * inner == 0 {
                    return Err(Error::Precondition("batch norm over an empty batch".into()));
                }
                let (mean, var) = channel_stats(x, c, inner);
                let m = st.momentum;
                let count = (n * inner) as f64;
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                for ch in 0..c {
                    let rm = st.running_mean.data()[ch].to_f64_lossy();
                    let rv = st.running_var.data()[ch].to_f64_lossy();
                    let (new_m, new_v) = if st.initialized {
                        ((1.0 - m) * rm + m * mean[ch], (1.0 - m) * rv + m * var[ch] * unbias)
                    } else {
                        (mean[ch], var[ch] * unbias)
                    };
                    st.running_mean.data_mut()[ch] = F::from_f64_lossy(new_m);
                    st.running_var.data_mut()[ch] = F::from_f64_lossy(new_v);
                }
                st.initialized = true;
                let inv = var.iter().map(|v| 1.0 / (v + st.eps).sqrt()).collect();
                (mean, inv)
            }
            Mode::Eval => {
                if !st.initialized {
                    return Err(Error::UninitializedStats(self.name.clone()));
                }
                let mean = st.running_mean.data().iter().map(|v| v.to_f64_lossy()).collect();
                let inv = st
                    .running_var
                    .data()
                    .iter()
                    .map(|v| 1.0 / (v.to_f64_lossy() + st.eps).sqrt())
                    .collect();
                (mean, inv)
            }
        };
        let mut xhat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        for item in 0..n {
            for ch in 0..c {
                let base = (item * c + ch) * inner;
                let m = F::from_f64_lossy(mean[ch]);
                let s = F::from_f64_lossy(inv_std[ch]);
                let gm = st.gamma.value.data()[ch];
                let bt = st.beta.value.data()[ch];
                for i in base..base + inner {
                    let xh = (x.data()[i] - m) * s;
                    xhat.data_mut()[i] = xh;
                    out.data_mut()[i] = xh * gm + bt;
                }
            }
        }
        out.debug_check_finite(&self.name)?;
        self.cache = ctx.cache.then(|| NormCache {
            xhat,
            inv_std: inv_std.into_iter().map(F::from_f64_lossy).collect(),
            mode: ctx.mode,
        });
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor<F>) -> Result<Tensor<F>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::MissingCache(self.name.clone()))?;
        cache.xhat.check_same_shape(grad, &self.name)?;
        let [n, c, g, h, w] = expect_rank5(grad, &self.name)?;
        let inner = g * h * w;
        let count = F::from_usize(n * inner).unwrap();
        let st = &mut self.state;
        let mut dx = Tensor::zeros(grad.shape());
        for ch in 0..c {
            let gm = st.gamma.value.data()[ch];
            let mut sum_dy = F::zero();
            let mut sum_dy_xhat = F::zero();
            for item in 0..n {
                let base = (item * c + ch) * inner;
                for i in base..base + inner {
                    sum_dy += grad.data()[i];
                    sum_dy_xhat += grad.data()[i] * cache.xhat.data()[i];
                }
            }
            st.beta.grad.data_mut()[ch] += sum_dy;
            st.gamma.grad.data_mut()[ch] += sum_dy_xhat;
            let inv = cache.inv_std[ch];
            for item in 0..n {
                let base = (item * c + ch) * inner;
                for i in base..base + inner {
                    dx.data_mut()[i] = match cache.mode {
                        Mode::Eval => grad.data()[i] * gm * inv,
                        Mode::Train => {
                            gm * inv / count * (count * grad.data()[i] - sum_dy - cache.xhat.data()[i] * sum_dy_xhat)
                        }
                    };
                }
            }
        }
        Ok(dx)
    }

    fn params(&self) -> Vec<&Param<F>> {
        vec![&self.state.gamma, &self.state.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.state.gamma, &mut self.state.beta]
    }

    fn buffers(&self) -> Vec<(String, Tensor<F>)> {
        let flag = if self.state.initialized { F::one() } else { F::zero() };
        vec![
            (format!("{}.running_mean", self.name), self.state.running_mean.clone()),
            (format!("{}.running_var", self.name), self.state.running_var.clone()),
            (format!("{}.initialized", self.name), Tensor::full(&[1], flag)),
        ]
    }

    fn load_buffer(&mut self, name: &str, value: &Tensor<F>) -> Result<bool> {
        let Some(suffix) = name.strip_prefix(&self.name).and_then(|s| s.strip_prefix('.')) else {
            return Ok(false);
        };
        let target = match suffix {
            "running_mean" => &mut self.state.running_mean,
            "running_var" => &mut self.state.running_var,
            "initialized" => {
                self.state.initialized = value.data().first().is_some_and(|v| *v > F::zero());
                return Ok(true);
            }
            _ => return Ok(false),
        };
        target.check_same_shape(value, name)?;
        *target = value.clone();
        Ok(true)
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Batch normalization of group features `[N, C, G, H, W]` with an explicit state.
pub fn group_batchnorm<F: Scalar>(f: &Tensor<F>, state: &mut BatchNormState<F>, mode: Mode) -> Result<Tensor<F>> {
    let mut layer = GroupBatchNorm {
        name: "batchnorm".to_string(),
        state: state.clone(),
        cache: None,
    };
    let out = layer.forward(f, Ctx { mode, cache: false })?;
    *state = layer.state;
    Ok(out)
}
