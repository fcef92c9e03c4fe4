//! Layer-level checks used by both the module tests and the acceptance report.

use gerseg::dihedral::GroupElement;
use gerseg::glayers::{
    group_hidden_conv, group_input_conv, group_skip, skip_backward, Ctx, DownsampleMethod, GroupBatchNorm, GroupConv,
    GroupDownsample, KernelG, KernelZ2, Layer, Mode, OutputPool, Relu, SkipMode, Upsample, UpsampleMode,
};
use gerseg::tensor::{ConvSpec, Tensor};
use gerseg::Result;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{feature_action, hidden_oracle, lifting_oracle, max_abs_diff, random_tensor};

/// Random conv instances against the literal sums. Returns (instances, worst error).
pub fn conv_oracle_agreement(instances: usize, seed: u64) -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for n in 0..instances {
        let c_in = rng.gen_range(1..=3);
        let c_out = rng.gen_range(1..=3);
        let k = [1, 3][rng.gen_range(0..2)];
        let h = rng.gen_range(k..=9);
        let w = rng.gen_range(k..=9);
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=k / 2);
        let spec = ConvSpec::new(k, stride, pad);
        let bias = rng.gen_bool(0.5).then(|| random_tensor(&[c_out], &mut rng));
        let b = bias.as_ref().map(|b| b.data());
        if n % 2 == 0 {
            let x = random_tensor(&[c_in, h, w], &mut rng);
            let wt = random_tensor(&[c_out, c_in, k, k], &mut rng);
            let want = lifting_oracle(&x, &wt, b, stride, pad);
            let got = group_input_conv(&x, &KernelZ2::new(wt, bias.clone()).unwrap(), spec).unwrap();
            worst = worst.max(max_abs_diff(&got, &want));
        } else {
            let x = random_tensor(&[c_in, 8, h, w], &mut rng);
            let wt = random_tensor(&[c_out, c_in, 8, k, k], &mut rng);
            let want = hidden_oracle(&x, &wt, b, stride, pad);
            let got = group_hidden_conv(&x, &KernelG::new(wt, bias.clone()).unwrap(), spec).unwrap();
            worst = worst.max(max_abs_diff(&got, &want));
        }
    }
    (instances, worst)
}

/// Skip connection as a one-input layer over the channel-stacked pair.
pub struct SkipPair {
    pub mode: SkipMode,
    pub c_a: usize,
}

impl Layer<f64> for SkipPair {
    fn name(&self) -> &str {
        match self.mode {
            SkipMode::Add => "skip_add",
            SkipMode::Concat => "skip_concat",
        }
    }

    fn forward(&mut self, x: &Tensor<f64>, _ctx: Ctx) -> Result<Tensor<f64>> {
        let c_b = x.dim(1) - self.c_a;
        let parts = x.split(1, &[self.c_a, c_b])?;
        group_skip(&parts[0], &parts[1], self.mode)
    }

    fn backward(&mut self, grad: &Tensor<f64>) -> Result<Tensor<f64>> {
        let (ga, gb) = skip_backward(grad, self.mode, self.c_a)?;
        Tensor::concat(&[&ga, &gb], 1)
    }
}

pub struct Case {
    pub name: &'static str,
    pub layer: Box<dyn Layer<f64>>,
    pub input: Vec<usize>,
    pub mode: Mode,
    /// Sampling on a stride-2 or interpolated grid is not expected to commute with D4 exactly.
    pub exempt: bool,
    /// Keeps inputs away from the ReLU kink for finite differences.
    pub away_from_zero: bool,
}

/// Every group-layer type, small enough for exhaustive checks.
pub fn layer_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 8;
    let g5 = |c: usize| vec![2, c, 8, n, n];
    let mut bn_eval = GroupBatchNorm::<f64>::new("bn_eval", 3);
    bn_eval.state.running_mean = random_tensor(&[3], &mut rng);
    bn_eval.state.running_var = Tensor::from_fn(&[3], |_| rng.gen_range(0.5..2.0));
    bn_eval.state.initialized = true;
    let mut bn_train = GroupBatchNorm::<f64>::new("bn_train", 3);
    for p in [&mut bn_train.state.gamma, &mut bn_train.state.beta] {
        p.value = random_tensor(&[3], &mut rng);
    }
    let mut lifting = GroupConv::new("lifting", 2, 3, 1, 8, ConvSpec::same(3), true, &mut rng).unwrap();
    let mut hidden = GroupConv::new("hidden", 3, 2, 8, 8, ConvSpec::same(3), true, &mut rng).unwrap();
    let mut hidden1 = GroupConv::new("hidden_1x1", 3, 2, 8, 8, ConvSpec::same(1), true, &mut rng).unwrap();
    for c in [&mut lifting, &mut hidden, &mut hidden1] {
        if let Some(b) = c.bias_mut() {
            b.value = random_tensor(b.value.shape(), &mut rng);
        }
    }
    let case = |name, layer: Box<dyn Layer<f64>>, input, mode, exempt| Case {
        name,
        layer,
        input,
        mode,
        exempt,
        away_from_zero: false,
    };
    let mut cases = vec![
        case(
            "group_input_conv",
            Box::new(lifting),
            vec![2, 2, 1, n, n],
            Mode::Train,
            false,
        ),
        case("group_hidden_conv", Box::new(hidden), g5(3), Mode::Train, false),
        case("group_hidden_conv_1x1", Box::new(hidden1), g5(3), Mode::Train, false),
        case("batchnorm_train", Box::new(bn_train), g5(3), Mode::Train, false),
        case("batchnorm_eval", Box::new(bn_eval), g5(3), Mode::Eval, false),
        case(
            "upsample_nearest",
            Box::new(Upsample::new("up", UpsampleMode::Nearest)),
            g5(2),
            Mode::Train,
            false,
        ),
        case(
            "downsample_conv_avgpool",
            Box::new(GroupDownsample::new("ds", 2, 3, 8, DownsampleMethod::ConvThenAvgpool, &mut rng).unwrap()),
            g5(2),
            Mode::Train,
            false,
        ),
        case(
            "skip_add",
            Box::new(SkipPair {
                mode: SkipMode::Add,
                c_a: 2,
            }),
            g5(4),
            Mode::Train,
            false,
        ),
        case(
            "skip_concat",
            Box::new(SkipPair {
                mode: SkipMode::Concat,
                c_a: 1,
            }),
            g5(3),
            Mode::Train,
            false,
        ),
        case(
            "output_pool",
            Box::new(OutputPool::new("pool")),
            g5(2),
            Mode::Train,
            false,
        ),
        case(
            "upsample_bilinear",
            Box::new(Upsample::new("up", UpsampleMode::Bilinear)),
            g5(2),
            Mode::Train,
            true,
        ),
        case(
            "downsample_strided",
            Box::new(GroupDownsample::new("ds", 2, 3, 8, DownsampleMethod::StridedConv, &mut rng).unwrap()),
            g5(2),
            Mode::Train,
            true,
        ),
    ];
    cases.push(Case {
        name: "relu",
        layer: Box::new(Relu::new("relu")),
        input: g5(2),
        mode: Mode::Train,
        exempt: false,
        away_from_zero: true,
    });
    cases
}

fn draw_input(case: &Case, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut x = random_tensor(&case.input, rng);
    if case.away_from_zero {
        for v in x.data_mut() {
            *v = v.signum() * (v.abs() + 0.01);
        }
    }
    x
}

pub struct EquivarianceResult {
    pub name: &'static str,
    pub exempt: bool,
    pub inputs: usize,
    pub max_abs: f64,
}

/// `layer(g·x)` against `g·layer(x)` for all eight elements on `inputs` random inputs.
pub fn layer_equivariance(inputs: usize, seed: u64) -> Vec<EquivarianceResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut out = Vec::new();
    for mut case in layer_cases(seed) {
        let ctx = Ctx {
            mode: case.mode,
            cache: false,
        };
        let mut worst = 0.0f64;
        for _ in 0..inputs {
            let x = draw_input(&case, &mut rng);
            let y = case.layer.forward(&x, ctx).unwrap();
            for g in GroupElement::ALL {
                let lhs = case.layer.forward(&feature_action(g, &x), ctx).unwrap();
                worst = worst.max(max_abs_diff(&lhs, &feature_action(g, &y)));
            }
        }
        out.push(EquivarianceResult {
            name: case.name,
            exempt: case.exempt,
            inputs,
            max_abs: worst,
        });
    }
    out
}

pub const STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

pub struct GradResult {
    pub name: String,
    pub probes: usize,
    pub max_rel: f64,
}

/// Central differences of `Σ r·layer(x)` against backward, per parameter tensor and for the input.
pub fn layer_gradchecks(probes: usize, seed: u64, floor: f64) -> Vec<GradResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c);
    let mut out = Vec::new();
    for mut case in layer_cases(seed) {
        let x = draw_input(&case, &mut rng);
        let layer = case.layer.as_mut();
        let cached = Ctx {
            mode: case.mode,
            cache: true,
        };
        let plain = Ctx {
            mode: case.mode,
            cache: false,
        };
        let y = layer.forward(&x, cached).unwrap();
        let r = random_tensor(y.shape(), &mut rng);
        for p in layer.params_mut() {
            p.zero_grad();
        }
        let gx = layer.backward(&r).unwrap();
        layer.clear_cache();
        let objective = |layer: &mut dyn Layer<f64>, x: &Tensor<f64>| -> f64 {
            let y = layer.forward(x, plain).unwrap();
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };

        let n_params = layer.params().len();
        for pi in 0..n_params {
            let (name, len, grad) = {
                let p = &layer.params()[pi];
                (p.name.clone(), p.value.len(), p.grad.clone())
            };
            let picks: Vec<usize> = if len <= probes {
                (0..len).collect()
            } else {
                sample(&mut rng, len, probes).into_vec()
            };
            let mut worst = 0.0f64;
            for &i in &picks {
                let orig = layer.params()[pi].value.data()[i];
                layer.params_mut()[pi].value.data_mut()[i] = orig + STEP;
                let lp = objective(layer, &x);
                layer.params_mut()[pi].value.data_mut()[i] = orig - STEP;
                let lm = objective(layer, &x);
                layer.params_mut()[pi].value.data_mut()[i] = orig;
                worst = worst.max(rel_err(grad.data()[i], (lp - lm) / (2.0 * STEP), floor));
            }
            out.push(GradResult {
                name: format!("{}:{}", case.name, name),
                probes: picks.len(),
                max_rel: worst,
            });
        }

        let mut worst = 0.0f64;
        let mut xp = x.clone();
        for i in sample(&mut rng, x.len(), probes.min(x.len())) {
            let orig = x.data()[i];
            xp.data_mut()[i] = orig + STEP;
            let lp = objective(layer, &xp);
            xp.data_mut()[i] = orig - STEP;
            let lm = objective(layer, &xp);
            xp.data_mut()[i] = orig;
            worst = worst.max(rel_err(gx.data()[i], (lp - lm) / (2.0 * STEP), floor));
        }
        out.push(GradResult {
            name: format!("{}:input", case.name),
            probes: probes.min(x.len()),
            max_rel: worst,
        });
    }
    out
}
