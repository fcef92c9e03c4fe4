use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::kernel::{KernelG, KernelZ2};
use super::{expect_rank5, Ctx, Layer, Param};
use crate::dihedral::{GroupElement, ORDER};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{ConvGeometry, ConvSpec, Scalar, Tensor};

/// Gather table that materializes all orientation copies of a canonical filter
/// bank `[C_out, C_in, G_in, k, k]` as one planar bank
/// `[C_out·G_out, C_in·G_in, k, k]`.
///
/// Entry `e` of the planar bank reads canonical weight `indices[e]`:
/// output slot `(o, g)` and input slot `(c, h)` take
/// `w(o, c, g⁻¹∘h, g⁻¹·y)`. With `G_out = 1` the table is the identity.
pub fn expansion_indices(c_out: usize, c_in: usize, in_group: usize, out_group: usize, k: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(c_out * out_group * c_in * in_group * k * k);
    for o in 0..c_out {
        for g in 0..out_group {
            let g_inv = GroupElement::from_index(g).inverse();
            for c in 0..c_in {
                for h in 0..in_group {
                    let h_src = if in_group == ORDER {
                        g_inv.compose(GroupElement::from_index(h)).index()
                    } else {
                        0
                    };
                    for dy in 0..k {
                        for dx in 0..k {
                            let (sy, sx) = g_inv.map_pixel(dy, dx, k, k);
                            let src = (((o * c_in + c) * in_group + h_src) * k + sy) * k + sx;
                            idx.push(src as u32);
                        }
                    }
                }
            }
        }
    }
    idx
}

fn expand<F: Scalar>(canonical: &[F], indices: &[u32]) -> Vec<F> {
    indices.iter().map(|&i| canonical[i as usize]).collect()
}

struct ConvCache<F: Scalar> {
    input: Tensor<F>,
    bank: Vec<F>,
    geo: ConvGeometry,
}

/// Group convolution layer with one canonical filter per (output, input) channel pair.
///
/// * `in_group = 1, out_group = 8`: Z²→G lifting (group input layer)
/// * `in_group = 8, out_group = 8`: G→G (group hidden layer)
/// * `in_group = 1, out_group = 1`: plain planar convolution
pub struct GroupConv<F: Scalar> {
    name: String,
    c_in: usize,
    c_out: usize,
    in_group: usize,
    out_group: usize,
    spec: ConvSpec,
    weight: Param<F>,
    bias: Option<Param<F>>,
    gather: Vec<u32>,
    cache: Option<ConvCache<F>>,
}

impl<F: Scalar> GroupConv<F> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        c_in: usize,
        c_out: usize,
        in_group: usize,
        out_group: usize,
        spec: ConvSpec,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        spec.validate()?;
        if !matches!((in_group, out_group), (1, 1) | (1, ORDER) | (ORDER, ORDER)) {
            return Err(Error::Config(format!(
                "unsupported group sizes {in_group}->{out_group}"
            )));
        }
        if c_in == 0 || c_out == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        let name = name.into();
        let k = spec.kernel_size;
        let fan_in = (c_in * in_group * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let weight = Tensor::from_fn(&[c_out, c_in, in_group, k, k], |_| {
            F::from_f64_lossy(normal.sample(rng))
        });
        Ok(GroupConv {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros(&[c_out]))),
            gather: expansion_indices(c_out, c_in, in_group, out_group, k),
            name,
            c_in,
            c_out,
            in_group,
            out_group,
            spec,
            cache: None,
        })
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn in_group(&self) -> usize {
        self.in_group
    }

    pub fn out_group(&self) -> usize {
        self.out_group
    }

    pub fn spec(&self) -> ConvSpec {
        self.spec
    }

    pub fn weight(&self) -> &Param<F> {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut Param<F> {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> Option<&mut Param<F>> {
        self.bias.as_mut()
    }

    /// All orientation copies of the filter bank as a planar `[C_out·G_out, C_in·G_in, k, k]` tensor.
    pub fn expanded_bank(&self) -> Tensor<F> {
        let k = self.spec.kernel_size;
        Tensor::from_vec(
            &[self.c_out * self.out_group, self.c_in * self.in_group, k, k],
            expand(self.weight.value.data(), &self.gather),
        )
        .expect("gather table matches bank shape")
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *input {
            [n, c, g, h, w] if c == self.c_in && g == self.in_group => {
                let (ho, wo) = self.spec.output_size(h, w)?;
                Ok(vec![n, self.c_out, self.out_group, ho, wo])
            }
            _ => shape_err(format!(
                "{}: expected [N, {}, {}, H, W], got {input:?}",
                self.name, self.c_in, self.in_group
            )),
        }
    }
}

impl<F: Scalar> Layer<F> for GroupConv<F> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor<F>, ctx: Ctx) -> Result<Tensor<F>> {
        let out_shape = self.output_shape(x.shape())?;
        let [_, _, _, h, w] = expect_rank5(x, &self.name)?;
        let geo = ConvGeometry::new(self.c_in * self.in_group, h, w, self.c_out * self.out_group, self.spec)?;
        let bank = expand(self.weight.value.data(), &self.gather);
        let mut out = Tensor::zeros(&out_shape);
        let in_item = geo.c_in * h * w;
        let npix = geo.ho * geo.wo;
        let out_item = geo.c_out * npix;
        if out_item > 0 {
            out.data_mut()
                .par_chunks_mut(out_item)
                .zip(x.data().par_chunks(in_item))
                .for_each_init(Vec::new, |scratch, (o, i)| {
                    geo.forward_item(i, &bank, o, scratch);
                });
        }
        if let Some(b) = self.bias.as_ref().filter(|_| out_item > 0) {
            let bias = b.value.data();
            for item in out.data_mut().chunks_mut(out_item) {
                for (slot, plane) in item.chunks_mut(npix).enumerate() {
                    let v = bias[slot / self.out_group];
                    plane.iter_mut().for_each(|p| *p += v);
                }
            }
        }
        out.debug_check_finite(&self.name)?;
        self.cache = ctx.cache.then(|| ConvCache {
            input: x.clone(),
            bank,
            geo,
        });
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor<F>) -> Result<Tensor<F>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::MissingCache(self.name.clone()))?;
        let geo = cache.geo;
        let n = cache.input.dim(0);
        let npix = geo.ho * geo.wo;
        let out_item = geo.c_out * npix;
        if grad.shape() != [n, self.c_out, self.out_group, geo.ho, geo.wo] {
            return shape_err(format!(
                "{}: gradient {:?} does not match output",
                self.name,
                grad.shape()
            ));
        }
        let in_item = geo.c_in * geo.h * geo.w;
        let mut dx = Tensor::zeros(cache.input.shape());
        let bank = &cache.bank;
        let partials: Vec<Vec<F>> = if out_item == 0 || in_item == 0 {
            Vec::new()
        } else {
            dx.data_mut()
                .par_chunks_mut(in_item)
                .zip(cache.input.data().par_chunks(in_item))
                .zip(grad.data().par_chunks(out_item))
                .map_init(Vec::new, |scratch, ((dxi, xi), dyi)| {
                    let mut dw = vec![F::zero(); bank.len()];
                    geo.backward_item(xi, bank, dyi, &mut dw, Some(dxi), scratch);
                    dw
                })
                .collect()
        };
        // fixed item order keeps the reduction independent of thread count
        let mut dbank = vec![F::zero(); bank.len()];
        for p in &partials {
            for (a, &b) in dbank.iter_mut().zip(p) {
                *a += b;
            }
        }
        let wg = self.weight.grad.data_mut();
        for (e, &src) in self.gather.iter().enumerate() {
            wg[src as usize] += dbank[e];
        }
        if let Some(b) = self.bias.as_mut().filter(|_| out_item > 0) {
            let bg = b.grad.data_mut();
            for item in grad.data().chunks(out_item) {
                for (slot, plane) in item.chunks(npix).enumerate() {
                    bg[slot / self.out_group] += plane.iter().copied().sum::<F>();
                }
            }
        }
        Ok(dx)
    }

    fn params(&self) -> Vec<&Param<F>> {
        let mut v = vec![&self.weight];
        v.extend(self.bias.as_ref());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v = vec![&mut self.weight];
        v.extend(self.bias.as_mut());
        v
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

fn add_bias<F: Scalar>(out: &mut Tensor<F>, bias: &Option<Tensor<F>>, per_channel: usize) {
    if let Some(b) = bias {
        let plane = out.len() / (b.len() * per_channel).max(1);
        for (slot, p) in out.data_mut().chunks_mut(plane.max(1)).enumerate() {
            let v = b.data()[slot / per_channel];
            p.iter_mut().for_each(|x| *x += v);
        }
    }
}

/// Z²→G correlation of `image [C_in, H, W]` with the eight transforms of `kernel`.
///
/// Output plane `g` is `correlate2d(image, transform_kernel_z2(g, kernel)) + bias`.
pub fn group_input_conv<F: Scalar>(image: &Tensor<F>, kernel: &KernelZ2<F>, spec: ConvSpec) -> Result<Tensor<F>> {
    kernel.validate()?;
    if kernel.size() != spec.kernel_size {
        return shape_err("kernel size disagrees with conv spec");
    }
    let (c_out, c_in, k) = (kernel.c_out(), kernel.c_in(), kernel.size());
    let idx = expansion_indices(c_out, c_in, 1, ORDER, k);
    let bank = Tensor::from_vec(&[c_out * ORDER, c_in, k, k], expand(kernel.weights.data(), &idx))?;
    let mut out = crate::tensor::correlate2d(image, &bank, spec)?;
    let (ho, wo) = (out.dim(1), out.dim(2));
    add_bias(&mut out, &kernel.bias, ORDER);
    out.reshape(&[c_out, ORDER, ho, wo])
}

/// G→G correlation of `f [C_in, 8, H, W]` with `kernel`: one planar correlation
/// over the `C_in·8` flattened input with the permuted-and-rotated filter bank.
pub fn group_hidden_conv<F: Scalar>(f: &Tensor<F>, kernel: &KernelG<F>, spec: ConvSpec) -> Result<Tensor<F>> {
    kernel.validate()?;
    if kernel.size() != spec.kernel_size {
        return shape_err("kernel size disagrees with conv spec");
    }
    let (c_out, c_in, k) = (kernel.c_out(), kernel.c_in(), kernel.size());
    match *f.shape() {
        [c, g, _, _] if c == c_in && g == ORDER => {}
        _ => {
            return shape_err(format!(
                "group_hidden_conv expects [{c_in}, 8, H, W], got {:?}",
                f.shape()
            ))
        }
    }
    let idx = expansion_indices(c_out, c_in, ORDER, ORDER, k);
    let bank = Tensor::from_vec(
        &[c_out * ORDER, c_in * ORDER, k, k],
        expand(kernel.weights.data(), &idx),
    )?;
    let flat = f.clone().reshape(&[c_in * ORDER, f.dim(2), f.dim(3)])?;
    let mut out = crate::tensor::correlate2d(&flat, &bank, spec)?;
    let (ho, wo) = (out.dim(1), out.dim(2));
    add_bias(&mut out, &kernel.bias, ORDER);
    out.reshape(&[c_out, ORDER, ho, wo])
}
