use rand::Rng;

use crate::error::Result;
use crate::glayers::{Ctx, GroupBatchNorm, GroupConv, Layer, Param, Relu};
use crate::tensor::{ConvSpec, Scalar, Tensor};

pub(crate) type BoxedLayer<F> = Box<dyn Layer<F> + Send>;

/// Layers applied one after another.
pub(crate) struct Seq<F: Scalar> {
    name: String,
    pub layers: Vec<BoxedLayer<F>>,
}

impl<F: Scalar> Seq<F> {
    pub fn new(name: impl Into<String>) -> Self {
        Seq {
            name: name.into(),
            layers: Vec::new(),
        }
    }

    pub fn push(&mut self, layer: impl Layer<F> + Send + 'static) {
        self.layers.push(Box::new(layer));
    }
}

impl<F: Scalar> Layer<F> for Seq<F> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor<F>, ctx: Ctx) -> Result<Tensor<F>> {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward(&h, ctx)?;
        }
        Ok(h)
    }

    fn backward(&mut self, grad: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = grad.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g)?;
        }
        Ok(g)
    }

    fn params(&self) -> Vec<&Param<F>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    fn buffers(&self) -> Vec<(String, Tensor<F>)> {
        self.layers.iter().flat_map(|l| l.buffers()).collect()
    }

    fn load_buffer(&mut self, name: &str, value: &Tensor<F>) -> Result<bool> {
        for l in &mut self.layers {
            if l.load_buffer(name, value)? {
                return Ok(true);
            }
        }
        Ok(false)
    }

    fn clear_cache(&mut self) {
        self.layers.iter_mut().for_each(|l| l.clear_cache());
    }
}

/// conv → bn → relu → conv → bn, plus a shortcut, then relu.
///
/// The shortcut is the identity when widths agree and a 1×1 group conv otherwise.
pub(crate) struct ResBlock<F: Scalar> {
    name: String,
    body: Seq<F>,
    shortcut: Option<GroupConv<F>>,
    out_relu: Relu,
}

impl<F: Scalar> ResBlock<F> {
    pub fn new(name: &str, c_in: usize, c_out: usize, group: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut body = Seq::new(format!("{name}.body"));
        body.push(GroupConv::new(
            format!("{name}.conv1"),
            c_in,
            c_out,
            group,
            group,
            ConvSpec::same(3),
            false,
            rng,
        )?);
        body.push(GroupBatchNorm::new(format!("{name}.bn1"), c_out));
        body.push(Relu::new(format!("{name}.relu1")));
        body.push(GroupConv::new(
            format!("{name}.conv2"),
            c_out,
            c_out,
            group,
            group,
            ConvSpec::same(3),
            false,
            rng,
        )?);
        body.push(GroupBatchNorm::new(format!("{name}.bn2"), c_out));
        let shortcut = if c_in == c_out {
            None
        } else {
            Some(GroupConv::new(
                format!("{name}.shortcut"),
                c_in,
                c_out,
                group,
                group,
                ConvSpec::same(1),
                false,
                rng,
            )?)
        };
        Ok(ResBlock {
            name: name.to_string(),
            body,
            shortcut,
            out_relu: Relu::new(format!("{name}.relu_out")),
        })
    }
}

impl<F: Scalar> Layer<F> for ResBlock<F> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, x: &Tensor<F>, ctx: Ctx) -> Result<Tensor<F>> {
        let y = self.body.forward(x, ctx)?;
        let s = match &mut self.shortcut {
            Some(conv) => conv.forward(x, ctx)?,
            None => x.clone(),
        };
        self.out_relu.forward(&y.add(&s)?, ctx)
    }

    fn backward(&mut self, grad: &Tensor<F>) -> Result<Tensor<F>> {
        let g = Layer::<F>::backward(&mut self.out_relu, grad)?;
        let mut dx = self.body.backward(&g)?;
        match &mut self.shortcut {
            Some(conv) => dx.add_assign(&conv.backward(&g)?)?,
            None => dx.add_assign(&g)?,
        }
        Ok(dx)
    }

    fn params(&self) -> Vec<&Param<F>> {
        let mut v = self.body.params();
        if let Some(c) = &self.shortcut {
            v.extend(c.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v = self.body.params_mut();
        if let Some(c) = &mut self.shortcut {
            v.extend(c.params_mut());
        }
        v
    }

    fn buffers(&self) -> Vec<(String, Tensor<F>)> {
        self.body.buffers()
    }

    fn load_buffer(&mut self, name: &str, value: &Tensor<F>) -> Result<bool> {
        self.body.load_buffer(name, value)
    }

    fn clear_cache(&mut self) {
        self.body.clear_cache();
        if let Some(c) = &mut self.shortcut {
            c.clear_cache();
        }
        Layer::<F>::clear_cache(&mut self.out_relu);
    }
}
