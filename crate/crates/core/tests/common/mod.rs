//! Reference implementations shared by the integration tests. Nothing here
//! calls into the crate's group law or convolution code.

#![allow(dead_code)]

use gerseg::dihedral::GroupElement;
use gerseg::evalmetrics::BinaryMask;
use gerseg::tensor::Tensor;
use rand::Rng;

/// D4 as integer 2×2 matrices acting on centred (row, col) offsets.
pub type Mat = [[i64; 2]; 2];

const QUARTER: Mat = [[0, -1], [1, 0]]; // (u, v) -> (-v, u): counter-clockwise on screen
const FLIP: Mat = [[1, 0], [0, -1]]; // (u, v) -> (u, -v): mirror the columns
const ID: Mat = [[1, 0], [0, 1]];

pub fn mat_mul(a: Mat, b: Mat) -> Mat {
    let mut m = [[0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            m[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    m
}

pub fn mat_of(g: GroupElement) -> Mat {
    let mut m = ID;
    for _ in 0..g.rot() {
        m = mat_mul(QUARTER, m);
    }
    if g.mirror() {
        m = mat_mul(FLIP, m);
    }
    m
}

/// Index in `mirror * 4 + rot` order, found by search over the matrix list.
pub fn index_of(m: Mat) -> usize {
    (0..8)
        .find(|&i| mat_of(GroupElement::from_index(i)) == m)
        .expect("matrix is in D4")
}

pub fn mat_inv(m: Mat) -> Mat {
    // orthogonal: inverse is the transpose
    [[m[0][0], m[1][0]], [m[0][1], m[1][1]]]
}

/// Applies `m` to an offset given in doubled coordinates (so half-integer centres stay exact).
fn apply2(m: Mat, u2: i64, v2: i64) -> (i64, i64) {
    (m[0][0] * u2 + m[0][1] * v2, m[1][0] * u2 + m[1][1] * v2)
}

/// Where pixel `(i, j)` of a square `n × n` grid goes under `m`.
pub fn move_pixel(m: Mat, i: usize, j: usize, n: usize) -> (usize, usize) {
    let c = n as i64 - 1;
    let (u, v) = apply2(m, 2 * i as i64 - c, 2 * j as i64 - c);
    (((u + c) / 2) as usize, ((v + c) / 2) as usize)
}

/// `out(g·p) = in(p)` on the trailing square planes of any tensor.
pub fn plane_action(g: GroupElement, x: &Tensor<f64>) -> Tensor<f64> {
    let n = x.dim(-1);
    assert_eq!(x.dim(-2), n, "oracle handles square planes only");
    let m = mat_of(g);
    let plane = n * n;
    let mut out = Tensor::zeros(x.shape());
    for p in 0..x.len() / plane {
        for i in 0..n {
            for j in 0..n {
                let (a, b) = move_pixel(m, i, j, n);
                out.data_mut()[p * plane + a * n + b] = x.data()[p * plane + i * n + j];
            }
        }
    }
    out
}

/// Regular action on `[..., C, G, H, W]`: `out(c, g∘h, g·p) = in(c, h, p)` for `G = 8`,
/// spatial only for `G = 1`.
pub fn feature_action(g: GroupElement, x: &Tensor<f64>) -> Tensor<f64> {
    let spatial = plane_action(g, x);
    let gs = x.dim(-3);
    if gs == 1 {
        return spatial;
    }
    assert_eq!(gs, 8);
    let n = x.dim(-1);
    let plane = n * n;
    let mg = mat_of(g);
    let mut out = Tensor::zeros(x.shape());
    for c in 0..x.len() / (8 * plane) {
        for h in 0..8 {
            let gh = index_of(mat_mul(mg, mat_of(GroupElement::from_index(h))));
            let src = &spatial.data()[(c * 8 + h) * plane..(c * 8 + h + 1) * plane];
            out.data_mut()[(c * 8 + gh) * plane..(c * 8 + gh + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

fn at(x: &Tensor<f64>, base: usize, h: usize, w: usize, i: i64, j: i64) -> f64 {
    if i < 0 || j < 0 || i >= h as i64 || j >= w as i64 {
        0.0
    } else {
        x.data()[base + i as usize * w + j as usize]
    }
}

/// Filter tap `(a, b)` of a `k × k` filter read through `g⁻¹`.
fn pulled_tap(minv: Mat, a: usize, b: usize, k: usize) -> (usize, usize) {
    move_pixel(minv, a, b, k)
}

/// Z²→G correlation written as the literal sum
/// `out[o, g, i, j] = b[o] + Σ_c Σ_(a,b) x[c, i·s - p + a, j·s - p + b] · w[o, c, g⁻¹·(a, b)]`.
pub fn lifting_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (c_in, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
    let (c_out, k) = (w.dim(0), w.dim(-1));
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[c_out, 8, ho, wo]);
    for o in 0..c_out {
        for g in 0..8 {
            let minv = mat_inv(mat_of(GroupElement::from_index(g)));
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = bias.map_or(0.0, |b| b[o]);
                    for c in 0..c_in {
                        for a in 0..k {
                            for b in 0..k {
                                let (ta, tb) = pulled_tap(minv, a, b, k);
                                let wv = w.data()[((o * c_in + c) * k + ta) * k + tb];
                                let xi = (i * stride + a) as i64 - pad as i64;
                                let xj = (j * stride + b) as i64 - pad as i64;
                                s += wv * at(x, c * h * wd, h, wd, xi, xj);
                            }
                        }
                    }
                    out.data_mut()[((o * 8 + g) * ho + i) * wo + j] = s;
                }
            }
        }
    }
    out
}

/// G→G correlation written as the literal sum
/// `out[o, g, i, j] = b[o] + Σ_c Σ_h Σ_(a,b) x[c, h, ·] · w[o, c, g⁻¹∘h, g⁻¹·(a, b)]`.
pub fn hidden_oracle(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&[f64]>, stride: usize, pad: usize) -> Tensor<f64> {
    let (c_in, h, wd) = (x.dim(0), x.dim(2), x.dim(3));
    let (c_out, k) = (w.dim(0), w.dim(-1));
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[c_out, 8, ho, wo]);
    for o in 0..c_out {
        for g in 0..8 {
            let minv = mat_inv(mat_of(GroupElement::from_index(g)));
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = bias.map_or(0.0, |b| b[o]);
                    for c in 0..c_in {
                        for hh in 0..8 {
                            let rel = index_of(mat_mul(minv, mat_of(GroupElement::from_index(hh))));
                            for a in 0..k {
                                for b in 0..k {
                                    let (ta, tb) = pulled_tap(minv, a, b, k);
                                    let wv = w.data()[(((o * c_in + c) * 8 + rel) * k + ta) * k + tb];
                                    let xi = (i * stride + a) as i64 - pad as i64;
                                    let xj = (j * stride + b) as i64 - pad as i64;
                                    s += wv * at(x, (c * 8 + hh) * h * wd, h, wd, xi, xj);
                                }
                            }
                        }
                    }
                    out.data_mut()[((o * 8 + g) * ho + i) * wo + j] = s;
                }
            }
        }
    }
    out
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn random_mask(h: usize, w: usize, density: f64, rng: &mut impl Rng) -> BinaryMask {
    BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(density))
}

/// Symmetric Hausdorff distance by comparing every pair of foreground pixels.
pub fn hausdorff_brute(a: &BinaryMask, b: &BinaryMask) -> Option<f64> {
    let pts = |m: &BinaryMask| -> Vec<(i64, i64)> {
        let mut v = Vec::new();
        for r in 0..m.height() {
            for c in 0..m.width() {
                if m.get(r, c) {
                    v.push((r as i64, c as i64));
                }
            }
        }
        v
    };
    let (pa, pb) = (pts(a), pts(b));
    if pa.is_empty() || pb.is_empty() {
        return None;
    }
    let directed = |from: &[(i64, i64)], to: &[(i64, i64)]| {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| (p.0 - q.0).pow(2) + (p.1 - q.1).pow(2))
                    .min()
                    .unwrap()
            })
            .max()
            .unwrap()
    };
    let d2 = directed(&pa, &pb).max(directed(&pb, &pa));
    Some((d2 as f64).sqrt())
}

pub fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
pub mod checks;
