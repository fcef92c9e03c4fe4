use crate::dihedral::{act_on_group_feature, act_on_plane, GroupElement, ORDER};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Filter bank of a Z²→G layer: `weights [C_out, C_in, k, k]`, one bias per output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelZ2<F: Scalar = f64> {
    pub weights: Tensor<F>,
    pub bias: Option<Tensor<F>>,
}

/// Filter bank of a G→G layer: `weights [C_out, C_in, 8, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelG<F: Scalar = f64> {
    pub weights: Tensor<F>,
    pub bias: Option<Tensor<F>>,
}

fn check_square_odd(k0: usize, k1: usize) -> Result<usize> {
    if k0 != k1 {
        return shape_err(format!("kernel must be square, got {k0}x{k1}"));
    }
    if k0 % 2 == 0 {
        return Err(Error::UnsupportedKernelSize(k0));
    }
    Ok(k0)
}

fn check_bias<F: Scalar>(bias: &Option<Tensor<F>>, c_out: usize) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [c_out] => {
            shape_err(format!("bias {:?} does not match {c_out} output channels", b.shape()))
        }
        _ => Ok(()),
    }
}

impl<F: Scalar> KernelZ2<F> {
    pub fn new(weights: Tensor<F>, bias: Option<Tensor<F>>) -> Result<Self> {
        let k = KernelZ2 { weights, bias };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        match *self.weights.shape() {
            [c_out, _, k0, k1] => {
                check_square_odd(k0, k1)?;
                check_bias(&self.bias, c_out)
            }
            _ => shape_err(format!(
                "KernelZ2 weights must be [C_out, C_in, k, k], got {:?}",
                self.weights.shape()
            )),
        }
    }

    pub fn c_out(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn size(&self) -> usize {
        self.weights.shape()[2]
    }
}

impl<F: Scalar> KernelG<F> {
    pub fn new(weights: Tensor<F>, bias: Option<Tensor<F>>) -> Result<Self> {
        let k = KernelG { weights, bias };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        match *self.weights.shape() {
            [c_out, _, g, k0, k1] if g == ORDER => {
                check_square_odd(k0, k1)?;
                check_bias(&self.bias, c_out)
            }
            _ => shape_err(format!(
                "KernelG weights must be [C_out, C_in, 8, k, k], got {:?}",
                self.weights.shape()
            )),
        }
    }

    pub fn c_out(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn size(&self) -> usize {
        self.weights.shape()[3]
    }
}

/// `out(o, c, y) = w(o, c, g⁻¹·y)` about the kernel centre.
pub fn transform_kernel_z2<F: Scalar>(g: GroupElement, w: &KernelZ2<F>) -> Result<KernelZ2<F>> {
    w.validate()?;
    Ok(KernelZ2 {
        weights: act_on_plane(g, &w.weights)?,
        bias: w.bias.clone(),
    })
}

/// `out(o, c, h, y) = w(o, c, g⁻¹∘h, g⁻¹·y)`: spatial transform plus a
/// permutation of the filter's orientation axis.
pub fn transform_kernel_g<F: Scalar>(g: GroupElement, w: &KernelG<F>) -> Result<KernelG<F>> {
    w.validate()?;
    Ok(KernelG {
        weights: act_on_group_feature(g, &w.weights)?,
        bias: w.bias.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn symmetric_kernel_is_fixed() {
        let mut w = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let k = KernelZ2::new(w, None).unwrap();
        for g in GroupElement::ALL {
            assert_eq!(transform_kernel_z2(g, &k).unwrap(), k);
        }
    }

    #[test]
    fn single_tap_moves_with_the_quarter_turn() {
        let mut w = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        w.data_mut()[5] = 1.0; // (1, 2)
        let k = KernelZ2::new(w, None).unwrap();
        let t = transform_kernel_z2(GroupElement::new(1, false), &k).unwrap();
        let hot: Vec<usize> = (0..9).filter(|&i| t.weights.data()[i] != 0.0).collect();
        assert_eq!(hot, vec![1]); // (0, 1)
    }

    #[test]
    fn norms_preserved_and_orbit_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..1000 {
            let w = Tensor::<f64>::from_fn(&[2, 1, 3, 3], |_| rng.gen_range(-1.0..1.0));
            let k = KernelZ2::new(w, None).unwrap();
            // summed in sorted order so equal multisets give bit-equal norms
            let sorted = |t: &Tensor<f64>| {
                let mut v = t.data().to_vec();
                v.sort_by(f64::total_cmp);
                v
            };
            let l1 = |v: &[f64]| v.iter().map(|x| x.abs()).sum::<f64>();
            let l2 = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
            let base = sorted(&k.weights);
            for g in GroupElement::ALL {
                let t = sorted(&transform_kernel_z2(g, &k).unwrap().weights);
                assert_eq!(t, base);
                assert_eq!(l1(&t), l1(&base));
                assert_eq!(l2(&t), l2(&base));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let generic = KernelZ2::new(Tensor::<f64>::from_fn(&[1, 1, 3, 3], |_| rng.gen()), None).unwrap();
        let orbit = |k: &KernelZ2<f64>| {
            let mut v: Vec<Vec<u64>> = GroupElement::ALL
                .iter()
                .map(|&g| {
                    transform_kernel_z2(g, k)
                        .unwrap()
                        .weights
                        .data()
                        .iter()
                        .map(|x| x.to_bits())
                        .collect()
                })
                .collect();
            v.sort();
            v.dedup();
            v.len()
        };
        assert_eq!(orbit(&generic), 8);
        // symmetric under the vertical mirror only: orbit of size 4
        let w = Tensor::from_vec(&[1, 1, 3, 3], vec![1., 2., 1., 3., 4., 3., 5., 6., 5.]).unwrap();
        assert_eq!(orbit(&KernelZ2::new(w, None).unwrap()), 4);
    }

    #[test]
    fn group_kernel_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let w = Tensor::<f64>::from_fn(&[2, 3, 8, 3, 3], |_| rng.gen());
        let k = KernelG::new(w, None).unwrap();
        assert_eq!(transform_kernel_g(GroupElement::IDENTITY, &k).unwrap(), k);
        for a in GroupElement::ALL {
            for b in GroupElement::ALL {
                let lhs = transform_kernel_g(a, &transform_kernel_g(b, &k).unwrap()).unwrap();
                assert_eq!(lhs, transform_kernel_g(a.compose(b), &k).unwrap());
            }
        }
        // delta at (identity, centre): w(g⁻¹∘h) is hot where g⁻¹∘h = e, i.e. at h = g
        let mut d = Tensor::<f64>::zeros(&[1, 1, 8, 3, 3]);
        d.data_mut()[4] = 1.0;
        let delta = KernelG::new(d, None).unwrap();
        for g in GroupElement::ALL {
            let t = transform_kernel_g(g, &delta).unwrap();
            let hot: Vec<usize> = (0..72).filter(|&i| t.weights.data()[i] != 0.0).collect();
            assert_eq!(hot, vec![g.index() * 9 + 4]);
        }
    }

    #[test]
    fn even_kernels_rejected() {
        let w = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        assert!(matches!(KernelZ2::new(w, None), Err(Error::UnsupportedKernelSize(2))));
        let w = Tensor::<f64>::zeros(&[1, 1, 8, 4, 4]);
        assert!(matches!(KernelG::new(w, None), Err(Error::UnsupportedKernelSize(4))));
        let bad = KernelZ2 {
            weights: Tensor::<f64>::zeros(&[1, 1, 2, 2]),
            bias: None,
        };
        assert!(transform_kernel_z2(GroupElement::IDENTITY, &bad).is_err());
    }
}
