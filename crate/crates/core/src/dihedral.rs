//! The dihedral group D4 and its actions on pixel grids, feature maps, and filters.
//!
//! An element `(rot, mirror)` acts on a pixel grid by rotating `rot` quarter
//! turns counter-clockwise about the grid centre and then, if `mirror` is set,
//! reflecting the columns. The group law is read off that coordinate action
//! (see [`CayleyTable::derive`]) rather than written by hand.
//!
//! Group-axis index of an element: `mirror * 4 + rot`.

use std::fmt;
use std::sync::OnceLock;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const ORDER: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupElement {
    rot: u8,
    mirror: bool,
}

impl GroupElement {
    pub const IDENTITY: GroupElement = GroupElement { rot: 0, mirror: false };

    pub const ALL: [GroupElement; ORDER] = {
        let mut all = [GroupElement::IDENTITY; ORDER];
        let mut i = 0;
        while i < ORDER {
            all[i] = GroupElement {
                rot: (i % 4) as u8,
                mirror: i >= 4,
            };
            i += 1;
        }
        all
    };

    pub fn new(rot: u8, mirror: bool) -> Self {
        GroupElement { rot: rot % 4, mirror }
    }

    pub fn from_index(index: usize) -> Self {
        Self::ALL[index % ORDER]
    }

    pub fn index(self) -> usize {
        self.mirror as usize * 4 + self.rot as usize
    }

    pub fn rot(self) -> u8 {
        self.rot
    }

    pub fn mirror(self) -> bool {
        self.mirror
    }

    /// `self ∘ other`: act with `other` first, then `self`.
    pub fn compose(self, other: GroupElement) -> GroupElement {
        let t = cayley();
        GroupElement::from_index(t.table[self.index()][other.index()] as usize)
    }

    pub fn inverse(self) -> GroupElement {
        GroupElement::from_index(cayley().inverse[self.index()] as usize)
    }

    /// Grid extents after acting on an `h × w` grid.
    pub fn output_dims(self, dims: (usize, usize)) -> (usize, usize) {
        if self.rot % 2 == 1 {
            (dims.1, dims.0)
        } else {
            dims
        }
    }

    /// Image of pixel `(row, col)` of an `h × w` grid; no bounds checks.
    #[inline]
    pub fn map_pixel(self, row: usize, col: usize, h: usize, w: usize) -> (usize, usize) {
        let (mut r, mut c, mut hh, mut ww) = (row, col, h, w);
        for _ in 0..self.rot {
            // quarter turn counter-clockwise: (r, c) in h×w -> (w-1-c, r) in w×h
            let nr = ww - 1 - c;
            c = r;
            r = nr;
            std::mem::swap(&mut hh, &mut ww);
        }
        if self.mirror {
            c = ww - 1 - c;
        }
        (r, c)
    }

    /// Checked coordinate action. Returns the mapped pixel and the new grid extents.
    pub fn act_on_coord(self, p: (usize, usize), dims: (usize, usize)) -> Result<((usize, usize), (usize, usize))> {
        if p.0 >= dims.0 || p.1 >= dims.1 {
            return Err(Error::Precondition(format!(
                "pixel {p:?} outside a {}x{} grid",
                dims.0, dims.1
            )));
        }
        Ok((self.map_pixel(p.0, p.1, dims.0, dims.1), self.output_dims(dims)))
    }
}

impl fmt::Display for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}{}", self.rot, if self.mirror { "m" } else { "" })
    }
}

/// Multiplication table and inverses of D4 in group-axis index order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CayleyTable {
    pub table: [[u8; ORDER]; ORDER],
    pub inverse: [u8; ORDER],
}

impl CayleyTable {
    /// Builds the table by matching `a(b(p))` on every pixel of a 4×4 grid
    /// against the actions of all eight candidates.
    pub fn derive() -> CayleyTable {
        const N: usize = 4;
        let apply = |g: GroupElement, p: (usize, usize)| g.map_pixel(p.0, p.1, N, N);
        let pixels: Vec<(usize, usize)> = (0..N * N).map(|i| (i / N, i % N)).collect();
        let mut table = [[0u8; ORDER]; ORDER];
        for a in GroupElement::ALL {
            for b in GroupElement::ALL {
                let target: Vec<_> = pixels.iter().map(|&p| apply(a, apply(b, p))).collect();
                let matches: Vec<_> = GroupElement::ALL
                    .iter()
                    .filter(|g| pixels.iter().map(|&p| apply(**g, p)).eq(target.iter().copied()))
                    .collect();
                assert_eq!(matches.len(), 1, "D4 acts faithfully on a 4x4 grid");
                table[a.index()][b.index()] = matches[0].index() as u8;
            }
        }
        let mut inverse = [0u8; ORDER];
        for g in 0..ORDER {
            inverse[g] = (0..ORDER)
                .find(|&h| table[g][h] == 0)
                .expect("every element has an inverse") as u8;
        }
        CayleyTable { table, inverse }
    }
}

pub fn cayley() -> &'static CayleyTable {
    static TABLE: OnceLock<CayleyTable> = OnceLock::new();
    TABLE.get_or_init(CayleyTable::derive)
}

/// Transform every trailing `H × W` plane: `out(g·p) = in(p)`.
///
/// For odd rotations the two trailing extents swap.
pub fn act_on_plane<F: Scalar>(g: GroupElement, f: &Tensor<F>) -> Result<Tensor<F>> {
    if f.rank() < 2 {
        return shape_err(format!("act_on_plane needs >= 2 axes, got {:?}", f.shape()));
    }
    let (h, w) = (f.dim(-2), f.dim(-1));
    let (ho, wo) = g.output_dims((h, w));
    let mut shape = f.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = ho;
    shape[r - 1] = wo;
    let mut out = Tensor::zeros(&shape);
    let plane = h * w;
    if plane == 0 {
        return Ok(out);
    }
    let index = pixel_permutation(g, h, w);
    for (src, dst) in f.data().chunks(plane).zip(out.data_mut().chunks_mut(plane)) {
        for (s, &d) in src.iter().zip(&index) {
            dst[d] = *s;
        }
    }
    Ok(out)
}

/// `perm[i*w + j]` is the flat output index of input pixel `(i, j)`.
fn pixel_permutation(g: GroupElement, h: usize, w: usize) -> Vec<usize> {
    let (_, wo) = g.output_dims((h, w));
    (0..h * w)
        .map(|i| {
            let (r, c) = g.map_pixel(i / w, i % w, h, w);
            r * wo + c
        })
        .collect()
}

/// Regular-representation action on `[..., C, 8, H, W]`:
/// `out(c, g∘h, g·p) = in(c, h, p)`.
pub fn act_on_group_feature<F: Scalar>(g: GroupElement, f: &Tensor<F>) -> Result<Tensor<F>> {
    if f.rank() < 3 || f.dim(-3) != ORDER {
        return shape_err(format!(
            "group feature maps need a group axis of length 8 before H, W; got {:?}",
            f.shape()
        ));
    }
    let (h, w) = (f.dim(-2), f.dim(-1));
    if g.rot % 2 == 1 && h != w {
        return shape_err(format!(
            "odd rotation of a non-square {h}x{w} group feature map changes its shape"
        ));
    }
    let plane = h * w;
    let mut out = Tensor::zeros(f.shape());
    if plane == 0 {
        return Ok(out);
    }
    let index = pixel_permutation(g, h, w);
    let block = ORDER * plane;
    for (src, dst) in f.data().chunks(block).zip(out.data_mut().chunks_mut(block)) {
        for h_idx in 0..ORDER {
            let target = g.compose(GroupElement::from_index(h_idx)).index();
            let s = &src[h_idx * plane..(h_idx + 1) * plane];
            let d = &mut dst[target * plane..(target + 1) * plane];
            for (v, &i) in s.iter().zip(&index) {
                d[i] = *v;
            }
        }
    }
    Ok(out)
}

/// Action on stacked feature maps `[..., C, G, H, W]` with `G ∈ {1, 8}`.
///
/// `G = 1` maps carry no orientation axis and are transformed spatially only.
pub fn act_on_features<F: Scalar>(g: GroupElement, f: &Tensor<F>) -> Result<Tensor<F>> {
    if f.rank() >= 3 && f.dim(-3) == ORDER {
        act_on_group_feature(g, f)
    } else {
        act_on_plane(g, f)
    }
}
