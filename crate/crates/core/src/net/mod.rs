//! The segmentation U-Net in group and regular form.

mod blocks;
mod checkpoint;
mod config;
mod gradcheck;
mod verify;

pub use checkpoint::{
    load, load_with_state, read_checkpoint, save, save_with_state, CheckpointData, FORMAT_VERSION, MAGIC,
};
pub use config::{GroupMode, NetConfig, INV_SQRT8};
pub use gradcheck::{gradcheck, relative_error, Corruption, GradRow, FD_STEP, REL_FLOOR};
pub use verify::{equivariance_report, EquivarianceRow};

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::glayers::{
    group_skip, skip_backward, Ctx, GroupBatchNorm, GroupConv, GroupDownsample, Layer, OutputPool, Param, Relu,
    Upsample,
};
use crate::tensor::{ConvSpec, Scalar, Tensor};
use blocks::{ResBlock, Seq};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    InputConv,
    BatchNorm,
    Relu,
    ResBlock,
    Downsample,
    Projection,
    Upsample,
    Skip,
    ClassHead,
    OutputPool,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerKind::InputConv => "input_conv",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::ResBlock => "res_block",
            LayerKind::Downsample => "downsample",
            LayerKind::Projection => "projection",
            LayerKind::Upsample => "upsample",
            LayerKind::Skip => "skip",
            LayerKind::ClassHead => "class_head",
            LayerKind::OutputPool => "output_pool",
        })
    }
}

/// One entry of the layer graph, in execution order.
///
/// `level` is the number of halvings the layer's input has been through;
/// `level_out` is the same for its output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerDesc {
    pub name: String,
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    pub g_in: usize,
    pub g_out: usize,
    pub level: usize,
    pub level_out: usize,
    pub params: usize,
}

impl LayerDesc {
    /// `([C, G, H, W] in, [C, G, H, W] out)` for a network input of `h × w`.
    pub fn shapes(&self, h: usize, w: usize) -> ([usize; 4], [usize; 4]) {
        (
            [self.c_in, self.g_in, h >> self.level, w >> self.level],
            [self.c_out, self.g_out, h >> self.level_out, w >> self.level_out],
        )
    }
}

struct DecoderLevel<F: Scalar> {
    proj: GroupConv<F>,
    up: Upsample,
    blocks: Seq<F>,
}

/// A built network: parameters, running statistics, and forward caches.
pub struct Network<F: Scalar = f32> {
    config: NetConfig,
    widths: Vec<usize>,
    stem: Seq<F>,
    encoder: Vec<Seq<F>>,
    down: Vec<Seq<F>>,
    decoder: Vec<DecoderLevel<F>>,
    head: GroupConv<F>,
    pool: Option<OutputPool>,
    descriptors: Vec<LayerDesc>,
    input_shape: Option<Vec<usize>>,
}

fn conv_params<F: Scalar>(c: &GroupConv<F>) -> usize {
    c.params().iter().map(|p| p.value.len()).sum()
}

impl<F: Scalar> Network<F> {
    pub fn build(config: &NetConfig) -> Result<Self> {
        let widths = config.widths()?;
        let g = config.group_size();
        let stages = config.stages;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut desc = Vec::new();
        let mut note = |name: &str, kind, c: (usize, usize), gs: (usize, usize), lv: (usize, usize), params| {
            desc.push(LayerDesc {
                name: name.to_string(),
                kind,
                c_in: c.0,
                c_out: c.1,
                g_in: gs.0,
                g_out: gs.1,
                level: lv.0,
                level_out: lv.1,
                params,
            });
        };
        let bn_params = |c: usize| 2 * c;

        let mut stem = Seq::new("stem");
        let conv = GroupConv::new(
            "stem.conv",
            config.in_channels,
            widths[0],
            1,
            g,
            ConvSpec::same(3),
            false,
            &mut rng,
        )?;
        note(
            "stem.conv",
            LayerKind::InputConv,
            (config.in_channels, widths[0]),
            (1, g),
            (0, 0),
            conv_params(&conv),
        );
        stem.push(conv);
        stem.push(GroupBatchNorm::new("stem.bn", widths[0]));
        note(
            "stem.bn",
            LayerKind::BatchNorm,
            (widths[0], widths[0]),
            (g, g),
            (0, 0),
            bn_params(widths[0]),
        );
        stem.push(Relu::new("stem.relu"));
        note("stem.relu", LayerKind::Relu, (widths[0], widths[0]), (g, g), (0, 0), 0);

        let mut encoder = Vec::new();
        let mut down = Vec::new();
        for s in 0..stages {
            let c = widths[s];
            let mut seq = Seq::new(format!("enc{s}"));
            for b in 0..config.blocks_per_stage {
                let name = format!("enc{s}.block{b}");
                let block = ResBlock::new(&name, c, c, g, &mut rng)?;
                note(
                    &name,
                    LayerKind::ResBlock,
                    (c, c),
                    (g, g),
                    (s, s),
                    block.params().iter().map(|p| p.value.len()).sum(),
                );
                seq.push(block);
            }
            encoder.push(seq);
            if s + 1 < stages {
                let c2 = widths[s + 1];
                let name = format!("down{s}");
                let mut seq = Seq::new(name.clone());
                let ds = GroupDownsample::new(format!("{name}.ds"), c, c2, g, config.downsample, &mut rng)?;
                note(
                    &format!("{name}.ds"),
                    LayerKind::Downsample,
                    (c, c2),
                    (g, g),
                    (s, s + 1),
                    conv_params(&ds.conv),
                );
                seq.push(ds);
                seq.push(GroupBatchNorm::new(format!("{name}.bn"), c2));
                note(
                    &format!("{name}.bn"),
                    LayerKind::BatchNorm,
                    (c2, c2),
                    (g, g),
                    (s + 1, s + 1),
                    bn_params(c2),
                );
                seq.push(Relu::new(format!("{name}.relu")));
                note(
                    &format!("{name}.relu"),
                    LayerKind::Relu,
                    (c2, c2),
                    (g, g),
                    (s + 1, s + 1),
                    0,
                );
                down.push(seq);
            }
        }

        let mut decoder: Vec<Option<DecoderLevel<F>>> = (0..stages.saturating_sub(1)).map(|_| None).collect();
        for s in (0..stages.saturating_sub(1)).rev() {
            let (c, c_deep) = (widths[s], widths[s + 1]);
            let pname = format!("dec{s}.proj");
            let proj = GroupConv::new(&pname, c_deep, c, g, g, ConvSpec::same(1), true, &mut rng)?;
            note(
                &pname,
                LayerKind::Projection,
                (c_deep, c),
                (g, g),
                (s + 1, s + 1),
                conv_params(&proj),
            );
            let up = Upsample::new(format!("dec{s}.up"), config.upsample_mode);
            note(
                &format!("dec{s}.up"),
                LayerKind::Upsample,
                (c, c),
                (g, g),
                (s + 1, s),
                0,
            );
            let joined = match config.skip_mode {
                crate::glayers::SkipMode::Add => c,
                crate::glayers::SkipMode::Concat => 2 * c,
            };
            note(&format!("dec{s}.skip"), LayerKind::Skip, (c, joined), (g, g), (s, s), 0);
            let mut seq = Seq::new(format!("dec{s}"));
            for b in 0..config.blocks_per_stage {
                let name = format!("dec{s}.block{b}");
                let c_in = if b == 0 { joined } else { c };
                let block = ResBlock::new(&name, c_in, c, g, &mut rng)?;
                note(
                    &name,
                    LayerKind::ResBlock,
                    (c_in, c),
                    (g, g),
                    (s, s),
                    block.params().iter().map(|p| p.value.len()).sum(),
                );
                seq.push(block);
            }
            decoder[s] = Some(DecoderLevel { proj, up, blocks: seq });
        }
        let decoder = decoder.into_iter().map(|d| d.expect("every level built")).collect();

        let head = GroupConv::new(
            "head",
            widths[0],
            config.n_classes,
            g,
            g,
            ConvSpec::same(1),
            true,
            &mut rng,
        )?;
        note(
            "head",
            LayerKind::ClassHead,
            (widths[0], config.n_classes),
            (g, g),
            (0, 0),
            conv_params(&head),
        );
        let pool = (g > 1).then(|| {
            note(
                "pool",
                LayerKind::OutputPool,
                (config.n_classes, config.n_classes),
                (g, 1),
                (0, 0),
                0,
            );
            OutputPool::new("pool")
        });

        let net = Network {
            config: config.clone(),
            widths,
            stem,
            encoder,
            down,
            decoder,
            head,
            pool,
            descriptors: desc,
            input_shape: None,
        };
        net.check_graph()?;
        Ok(net)
    }

    /// Walks the descriptor list and checks that consecutive layers agree on shape.
    fn check_graph(&self) -> Result<()> {
        let mut cur: Option<(usize, usize, usize)> = None;
        let mut skips = Vec::new();
        for d in &self.descriptors {
            if let Some((c, g, lv)) = cur {
                let expect_c = if d.kind == LayerKind::Skip { c } else { d.c_in };
                if (c, g, lv) != (expect_c, d.g_in, d.level) {
                    return shape_err(format!("graph check failed at {}: got ({c}, {g}, {lv})", d.name));
                }
            }
            match d.kind {
                LayerKind::Downsample => skips.push((d.c_in, d.g_in, d.level)),
                LayerKind::Skip => {
                    let enc = skips
                        .pop()
                        .ok_or_else(|| Error::Shape(format!("{} has no encoder partner", d.name)))?;
                    if enc != (d.c_in, d.g_in, d.level) {
                        return shape_err(format!("{} joins mismatched features", d.name));
                    }
                }
                _ => {}
            }
            cur = Some((d.c_out, d.g_out, d.level_out));
        }
        if !skips.is_empty() {
            return shape_err("unconsumed encoder skips");
        }
        Ok(())
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn descriptors(&self) -> &[LayerDesc] {
        &self.descriptors
    }

    /// Number of stored trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = *shape else {
            return shape_err(format!("network input must be [N, C, H, W], got {shape:?}"));
        };
        let m = self.config.stride_product();
        if c != self.config.in_channels {
            return shape_err(format!("expected {} input channels, got {c}", self.config.in_channels));
        }
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return shape_err(format!("input {h}x{w} is not divisible by {m}"));
        }
        Ok(())
    }

    /// `[N, C_in, H, W]` images to `[N, n_classes, H, W]` logits.
    pub fn forward(&mut self, x: &Tensor<F>, ctx: Ctx) -> Result<Tensor<F>> {
        self.check_input(x.shape())?;
        let [n, c, h, w] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
        let mut f = self.stem.forward(&x.clone().reshape(&[n, c, 1, h, w])?, ctx)?;
        let last = self.config.stages - 1;
        let mut skips = Vec::with_capacity(last);
        for s in 0..=last {
            f = self.encoder[s].forward(&f, ctx)?;
            if s < last {
                skips.push(f.clone());
                f = self.down[s].forward(&f, ctx)?;
            }
        }
        for s in (0..last).rev() {
            let level = &mut self.decoder[s];
            let u = level.up.forward(&level.proj.forward(&f, ctx)?, ctx)?;
            f = level
                .blocks
                .forward(&group_skip(&skips[s], &u, self.config.skip_mode)?, ctx)?;
        }
        f = self.head.forward(&f, ctx)?;
        if let Some(p) = &mut self.pool {
            f = Layer::<F>::forward(p, &f, ctx)?;
        }
        self.input_shape = ctx.cache.then(|| x.shape().to_vec());
        f.reshape(&[n, self.config.n_classes, h, w])
    }

    /// Eval-mode forward without caches.
    pub fn predict(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.forward(x, Ctx::EVAL)
    }

    /// Backpropagates a logit gradient; parameter gradients accumulate.
    pub fn backward(&mut self, grad: &Tensor<F>) -> Result<Tensor<F>> {
        let in_shape = self
            .input_shape
            .clone()
            .ok_or_else(|| Error::MissingCache("network".into()))?;
        let [n, _, h, w] = [in_shape[0], in_shape[1], in_shape[2], in_shape[3]];
        let k = self.config.n_classes;
        if grad.shape() != [n, k, h, w] {
            return shape_err(format!(
                "logit gradient {:?} does not match [{n}, {k}, {h}, {w}]",
                grad.shape()
            ));
        }
        let mut g = grad.clone().reshape(&[n, k, 1, h, w])?;
        if let Some(p) = &mut self.pool {
            g = Layer::<F>::backward(p, &g)?;
        }
        g = self.head.backward(&g)?;
        let last = self.config.stages - 1;
        let mut skip_grads = Vec::with_capacity(last);
        for s in 0..last {
            let level = &mut self.decoder[s];
            g = level.blocks.backward(&g)?;
            let (gs, gu) = skip_backward(&g, self.config.skip_mode, self.widths[s])?;
            skip_grads.push(gs);
            g = level.proj.backward(&Layer::<F>::backward(&mut level.up, &gu)?)?;
        }
        for s in (0..=last).rev() {
            if s < last {
                g = self.down[s].backward(&g)?;
                g.add_assign(&skip_grads[s])?;
            }
            g = self.encoder[s].backward(&g)?;
        }
        g = self.stem.backward(&g)?;
        g.reshape(&in_shape)
    }

    fn parts(&self) -> Vec<&dyn Layer<F>> {
        let mut v: Vec<&dyn Layer<F>> = vec![&self.stem];
        for s in 0..self.config.stages {
            v.push(&self.encoder[s]);
            if let Some(d) = self.down.get(s) {
                v.push(d);
            }
        }
        for level in self.decoder.iter().rev() {
            v.push(&level.proj);
            v.push(&level.blocks);
        }
        v.push(&self.head);
        v
    }

    fn parts_mut(&mut self) -> Vec<&mut dyn Layer<F>> {
        let mut v: Vec<&mut dyn Layer<F>> = vec![&mut self.stem];
        let mut down = self.down.iter_mut();
        for enc in self.encoder.iter_mut() {
            v.push(enc);
            if let Some(d) = down.next() {
                v.push(d);
            }
        }
        for level in self.decoder.iter_mut().rev() {
            v.push(&mut level.proj);
            v.push(&mut level.up);
            v.push(&mut level.blocks);
        }
        v.push(&mut self.head);
        if let Some(p) = &mut self.pool {
            v.push(p);
        }
        v
    }

    /// Trainable parameters in a fixed order (execution order of their layers).
    pub fn params(&self) -> Vec<&Param<F>> {
        self.parts().into_iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        self.parts_mut().into_iter().flat_map(|l| l.params_mut()).collect()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }

    /// Batch-norm running statistics, named `<layer>.running_mean` etc.
    pub fn buffers(&self) -> Vec<(String, Tensor<F>)> {
        self.parts().into_iter().flat_map(|l| l.buffers()).collect()
    }

    pub fn load_buffer(&mut self, name: &str, value: &Tensor<F>) -> Result<bool> {
        for l in self.parts_mut() {
            if l.load_buffer(name, value)? {
                return Ok(true);
            }
        }
        Ok(false)
    }

    pub fn clear_cache(&mut self) {
        self.parts_mut().into_iter().for_each(|l| l.clear_cache());
        self.input_shape = None;
    }

    /// Multiplies every trainable tensor by `s` (zero gives the bias-only network).
    pub fn scale_params(&mut self, s: F) {
        for p in self.params_mut() {
            p.value = p.value.scale(s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glayers::{DownsampleMethod, SkipMode};

    fn tiny(group_mode: GroupMode) -> NetConfig {
        NetConfig {
            base_width: 2,
            stages: 2,
            blocks_per_stage: 1,
            group_mode,
            ..NetConfig::default()
        }
    }

    fn count(net: &Network<f64>, kind: LayerKind) -> usize {
        net.descriptors().iter().filter(|d| d.kind == kind).count()
    }

    #[test]
    fn degenerate_config_has_minimal_graph() {
        let cfg = NetConfig {
            base_width: 4,
            stages: 1,
            blocks_per_stage: 1,
            ..NetConfig::default()
        };
        let net: Network<f64> = Network::build(&cfg).unwrap();
        assert_eq!(count(&net, LayerKind::InputConv), 1);
        assert_eq!(count(&net, LayerKind::ResBlock), 1);
        assert_eq!(count(&net, LayerKind::ClassHead), 1);
        assert_eq!(count(&net, LayerKind::OutputPool), 1);
        assert_eq!(count(&net, LayerKind::Downsample), 0);
        assert_eq!(count(&net, LayerKind::Upsample), 0);
    }

    #[test]
    fn descriptor_params_add_up() {
        for mode in [GroupMode::Group, GroupMode::Regular] {
            for skip in [SkipMode::Add, SkipMode::Concat] {
                let cfg = NetConfig {
                    skip_mode: skip,
                    ..tiny(mode)
                };
                let net: Network<f64> = Network::build(&cfg).unwrap();
                let total: usize = net.descriptors().iter().map(|d| d.params).sum();
                assert_eq!(total, net.param_count());
            }
        }
        let reg: Network<f64> = Network::build(&tiny(GroupMode::Regular)).unwrap();
        assert_eq!(count(&reg, LayerKind::OutputPool), 0);
    }

    #[test]
    fn forward_shapes() {
        for mode in [GroupMode::Group, GroupMode::Regular] {
            for skip in [SkipMode::Add, SkipMode::Concat] {
                for ds in [DownsampleMethod::StridedConv, DownsampleMethod::ConvThenAvgpool] {
                    let cfg = NetConfig {
                        skip_mode: skip,
                        downsample: ds,
                        n_classes: 3,
                        ..tiny(mode)
                    };
                    let mut net: Network<f64> = Network::build(&cfg).unwrap();
                    let x = Tensor::from_fn(&[2, 1, 8, 6], |i| (i as f64 * 0.37).sin());
                    let y = net.forward(&x, Ctx::TRAIN).unwrap();
                    assert_eq!(y.shape(), [2, 3, 8, 6]);
                    let gx = net.backward(&Tensor::full(y.shape(), 0.1)).unwrap();
                    assert_eq!(gx.shape(), x.shape());
                }
            }
        }
    }

    #[test]
    fn rejects_indivisible_inputs() {
        let mut net: Network<f64> = Network::build(&tiny(GroupMode::Group)).unwrap();
        assert!(net.forward(&Tensor::zeros(&[1, 1, 7, 8]), Ctx::TRAIN).is_err());
        assert!(net.forward(&Tensor::zeros(&[1, 2, 8, 8]), Ctx::TRAIN).is_err());
        assert!(net.forward(&Tensor::zeros(&[1, 8, 8]), Ctx::TRAIN).is_err());
    }

    #[test]
    fn eval_before_training_stats_fails() {
        let mut net: Network<f64> = Network::build(&tiny(GroupMode::Group)).unwrap();
        let x = Tensor::zeros(&[1, 1, 8, 8]);
        assert!(matches!(net.predict(&x), Err(Error::UninitializedStats(_))));
        net.forward(&x, Ctx::TRAIN).unwrap();
        net.predict(&x).unwrap();
    }

    #[test]
    fn zero_weights_give_constant_logits() {
        let mut net: Network<f64> = Network::build(&tiny(GroupMode::Group)).unwrap();
        net.scale_params(0.0);
        for p in net.params_mut() {
            if p.name == "head.bias" {
                p.value = Tensor::from_vec(&[2], vec![0.25, -1.5]).unwrap();
            }
        }
        let x = Tensor::from_fn(&[1, 1, 8, 8], |i| i as f64);
        let y = net.forward(&x, Ctx::TRAIN).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            assert_eq!(*v, if i < 64 { 0.25 } else { -1.5 });
        }
    }

    #[test]
    fn batch_items_are_independent_in_eval() {
        let mut net: Network<f64> = Network::build(&tiny(GroupMode::Group)).unwrap();
        let x = Tensor::from_fn(&[2, 1, 8, 8], |i| ((i * 7919) % 13) as f64 / 13.0);
        net.forward(&x, Ctx::TRAIN).unwrap();
        let both = net.predict(&x).unwrap();
        let one = net
            .predict(&x.index_first(1).unwrap().reshape(&[1, 1, 8, 8]).unwrap())
            .unwrap();
        assert_eq!(&both.data()[both.len() / 2..], one.data());
    }

    #[test]
    fn same_seed_same_weights() {
        let a: Network<f32> = Network::build(&tiny(GroupMode::Group)).unwrap();
        let b: Network<f32> = Network::build(&tiny(GroupMode::Group)).unwrap();
        let c: Network<f32> = Network::build(&NetConfig {
            init_seed: 1,
            ..tiny(GroupMode::Group)
        })
        .unwrap();
        let flat = |n: &Network<f32>| {
            n.params()
                .iter()
                .flat_map(|p| p.value.data().to_vec())
                .collect::<Vec<_>>()
        };
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
        let names: Vec<_> = a.params().iter().map(|p| p.name.clone()).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
    }
}
