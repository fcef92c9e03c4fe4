use rand::Rng;

use super::conv::GroupConv;
use super::kernel::KernelG;
use super::{expect_rank5, Ctx, Layer, Param};
use crate::dihedral::ORDER;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{
    avgpool2x2, avgpool2x2_backward, upsample_bilinear2x, upsample_bilinear2x_backward, upsample_nearest2x,
    upsample_nearest2x_backward, ConvSpec, Scalar, Tensor,
};

macro_rules! text_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl ::std::fmt::Display for $ty {
            fn fmt(&self, f: &mut ::std::fmt::Formatter<'_>) -> ::std::fmt::Result {
                f.write_str(match self { $($ty::$variant => $text),+ })
            }
        }

        impl ::std::str::FromStr for $ty {
            type Err = $crate::error::Error;
            fn from_str(s: &str) -> $crate::error::Result<Self> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    _ => Err($crate::error::Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " `{}`"), s
                    ))),
                }
            }
        }
    };
}
pub(crate) use text_enum;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}
text_enum!(UpsampleMode { Nearest => "nearest", Bilinear => "bilinear" });

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipMode {
    Add,
    Concat,
}
text_enum!(SkipMode { Add => "add", Concat => "concat" });

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DownsampleMethod {
    StridedConv,
    ConvThenAvgpool,
}
text_enum!(DownsampleMethod { StridedConv => "strided_conv", ConvThenAvgpool => "conv_then_avgpool" });

thread_local! {
    static SIGNS: std::cell::RefCell<Option<Vec<bool>>> = const { std::cell::RefCell::new(None) };
}

/// Runs `f` and returns, alongside its result, the sign of every input that
/// passed through a [`Relu`] on this thread in the meantime.
pub fn record_relu_signs<R>(f: impl FnOnce() -> R) -> (R, Vec<bool>) {
    let prev = SIGNS.with(|s| s.borrow_mut().replace(Vec::new()));
    let r = f();
    let signs = SIGNS
        .with(|s| std::mem::replace(&mut *s.borrow_mut(), prev))
        .unwrap_or_default();
    (r, signs)
}

/// Pointwise `max(v, 0)`.
pub struct Relu {
    name: String,
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new(name: impl Into<String>) -> Self {
        Relu {
            name: name.into(),
            mask: None,
        }
    }
}

impl<F: Scalar> Layer<F> for Relu {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor<F>, ctx: Ctx) -> Result<Tensor<F>> {
        self.mask = ctx.cache.then(|| x.data().iter().map(|&v| v > F::zero()).collect());
        SIGNS.with(|s| {
            if let Some(rec) = s.borrow_mut().as_mut() {
                rec.extend(x.data().iter().map(|&v| v > F::zero()));
            }
        });
        Ok(x.relu())
    }

    fn backward(&mut self, grad: &Tensor<F>) -> Result<Tensor<F>> {
        let mask = self
            .mask
            .as_ref()
            .ok_or_else(|| Error::MissingCache(self.name.clone()))?;
        if mask.len() != grad.len() {
            return shape_err(format!("{}: gradient size mismatch", self.name));
        }
        let mut out = grad.clone();
        for (v, &m) in out.data_mut().iter_mut().zip(mask) {
            if !m {
                *v = F::zero();
            }
        }
        Ok(out)
    }

    fn clear_cache(&mut self) {
        self.mask = None;
    }
}

pub fn group_relu<F: Scalar>(f: &Tensor<F>) -> Tensor<F> {
    f.relu()
}

/// Upsamples every orientation plane independently by 2×.
pub struct Upsample {
    name: String,
    pub mode: UpsampleMode,
    seen_forward: bool,
}

impl Upsample {
    pub fn new(name: impl Into<String>, mode: UpsampleMode) -> Self {
        Upsample {
            name: name.into(),
            mode,
            seen_forward: false,
        }
    }
}

impl<F: Scalar> Layer<F> for Upsample {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor<F>, ctx: Ctx) -> Result<Tensor<F>> {
        self.seen_forward = ctx.cache;
        group_upsample(x, self.mode)
    }

    fn backward(&mut self, grad: &Tensor<F>) -> Result<Tensor<F>> {
        if !self.seen_forward {
            return Err(Error::MissingCache(self.name.clone()));
        }
        match self.mode {
            UpsampleMode::Nearest => upsample_nearest2x_backward(grad),
            UpsampleMode::Bilinear => upsample_bilinear2x_backward(grad),
        }
    }

    fn clear_cache(&mut self) {
        self.seen_forward = false;
    }
}

pub fn group_upsample<F: Scalar>(f: &Tensor<F>, mode: UpsampleMode) -> Result<Tensor<F>> {
    match mode {
        UpsampleMode::Nearest => upsample_nearest2x(f),
        UpsampleMode::Bilinear => upsample_bilinear2x(f),
    }
}

/// Joins encoder and decoder features orientation by orientation along the channel axis
/// (axis 1 of `[N, C, G, H, W]`, axis 0 of unbatched `[C, G, H, W]`).
pub fn group_skip<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, mode: SkipMode) -> Result<Tensor<F>> {
    let axis = channel_axis(a)?;
    match mode {
        SkipMode::Add => a.add(b),
        SkipMode::Concat => Tensor::concat(&[a, b], axis),
    }
}

/// Splits a skip-connection gradient back onto its two inputs.
pub fn skip_backward<F: Scalar>(grad: &Tensor<F>, mode: SkipMode, c_a: usize) -> Result<(Tensor<F>, Tensor<F>)> {
    match mode {
        SkipMode::Add => Ok((grad.clone(), grad.clone())),
        SkipMode::Concat => {
            let axis = channel_axis(grad)?;
            let c = grad.shape()[axis];
            if c_a > c {
                return shape_err("skip split exceeds channel count");
            }
            let mut parts = grad.split(axis, &[c_a, c - c_a])?;
            let b = parts.pop().expect("two parts");
            let a = parts.pop().expect("two parts");
            Ok((a, b))
        }
    }
}

fn channel_axis<F: Scalar>(t: &Tensor<F>) -> Result<usize> {
    match t.rank() {
        5 => Ok(1),
        4 => Ok(0),
        _ => shape_err(format!("skip expects [N,C,G,H,W] or [C,G,H,W], got {:?}", t.shape())),
    }
}

/// Halves the resolution with a group hidden conv, either strided or followed by 2×2 average pooling.
pub struct GroupDownsample<F: Scalar> {
    name: String,
    pub method: DownsampleMethod,
    pub conv: GroupConv<F>,
    pooled_from: Option<Vec<usize>>,
}

impl<F: Scalar> GroupDownsample<F> {
    pub fn new(
        name: impl Into<String>,
        c_in: usize,
        c_out: usize,
        group: usize,
        method: DownsampleMethod,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let name = name.into();
        let spec = match method {
            DownsampleMethod::StridedConv => ConvSpec::new(3, 2, 1),
            DownsampleMethod::ConvThenAvgpool => ConvSpec::same(3),
        };
        Ok(GroupDownsample {
            conv: GroupConv::new(format!("{name}.conv"), c_in, c_out, group, group, spec, false, rng)?,
            name,
            method,
            pooled_from: None,
        })
    }
}

impl<F: Scalar> Layer<F> for GroupDownsample<F> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor<F>, ctx: Ctx) -> Result<Tensor<F>> {
        let [_, _, _, h, w] = expect_rank5(x, &self.name)?;
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err(format!("{}: downsampling needs even extents, got {h}x{w}", self.name));
        }
        let y = self.conv.forward(x, ctx)?;
        match self.method {
            DownsampleMethod::StridedConv => Ok(y),
            DownsampleMethod::ConvThenAvgpool => {
                self.pooled_from = ctx.cache.then(|| y.shape().to_vec());
                avgpool2x2(&y)
            }
        }
    }

    fn backward(&mut self, grad: &Tensor<F>) -> Result<Tensor<F>> {
        let g = match self.method {
            DownsampleMethod::StridedConv => grad.clone(),
            DownsampleMethod::ConvThenAvgpool => {
                if self.pooled_from.is_none() {
                    return Err(Error::MissingCache(self.name.clone()));
                }
                avgpool2x2_backward(grad)?
            }
        };
        self.conv.backward(&g)
    }

    fn params(&self) -> Vec<&Param<F>> {
        self.conv.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        self.conv.params_mut()
    }

    fn clear_cache(&mut self) {
        self.pooled_from = None;
        self.conv.clear_cache();
    }
}

/// Single-item downsampling of `f [C, 8, H, W]` with an explicit kernel.
pub fn group_downsample<F: Scalar>(f: &Tensor<F>, method: DownsampleMethod, kernel: &KernelG<F>) -> Result<Tensor<F>> {
    let (h, w) = (f.dim(-2), f.dim(-1));
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err(format!("downsampling needs even extents, got {h}x{w}"));
    }
    let k = kernel.size();
    match method {
        DownsampleMethod::StridedConv => super::group_hidden_conv(f, kernel, ConvSpec::new(k, 2, k / 2)),
        DownsampleMethod::ConvThenAvgpool => avgpool2x2(&super::group_hidden_conv(f, kernel, ConvSpec::same(k))?),
    }
}

/// Orientation average `[N, C, 8, H, W] → [N, C, 1, H, W]`; the last layer of the group network.
pub struct OutputPool {
    name: String,
    seen_forward: bool,
}

impl OutputPool {
    pub fn new(name: impl Into<String>) -> Self {
        OutputPool {
            name: name.into(),
            seen_forward: false,
        }
    }
}

impl<F: Scalar> Layer<F> for OutputPool {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor<F>, ctx: Ctx) -> Result<Tensor<F>> {
        let [n, c, g, h, w] = expect_rank5(x, &self.name)?;
        if g != ORDER {
            return shape_err(format!("{}: expected 8 orientations, got {g}", self.name));
        }
        self.seen_forward = ctx.cache;
        x.reduce_mean(2)?.reshape(&[n, c, 1, h, w])
    }

    fn backward(&mut self, grad: &Tensor<F>) -> Result<Tensor<F>> {
        if !self.seen_forward {
            return Err(Error::MissingCache(self.name.clone()));
        }
        let [n, c, _, h, w] = expect_rank5(grad, &self.name)?;
        let plane = h * w;
        let eighth = F::one() / F::from_usize(ORDER).unwrap();
        let mut out = Tensor::zeros(&[n, c, ORDER, h, w]);
        for nc in 0..n * c {
            let src = &grad.data()[nc * plane..(nc + 1) * plane];
            for g in 0..ORDER {
                let start = (nc * ORDER + g) * plane;
                for (d, &s) in out.data_mut()[start..start + plane].iter_mut().zip(src) {
                    *d = s * eighth;
                }
            }
        }
        Ok(out)
    }

    fn clear_cache(&mut self) {
        self.seen_forward = false;
    }
}

/// `out(c, x) = (1/8) Σ_h f(c, h, x)` for `f [C, 8, H, W]`.
pub fn group_output_pool<F: Scalar>(f: &Tensor<F>) -> Result<Tensor<F>> {
    if f.rank() != 4 || f.dim(1) != ORDER {
        return shape_err(format!("group_output_pool expects [C, 8, H, W], got {:?}", f.shape()));
    }
    f.reduce_mean(1)
}
