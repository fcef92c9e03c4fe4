//! Overlap metrics and exact Hausdorff distance for binary masks.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::dihedral::GroupElement;
use crate::error::{shape_err, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != h * w {
            return shape_err(format!("mask of {h}x{w} needs {} values, got {}", h * w, bits.len()));
        }
        Ok(BinaryMask { h, w, bits })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        BinaryMask {
            h,
            w,
            bits: vec![false; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                bits.push(f(r, c));
            }
        }
        BinaryMask { h, w, bits }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.w + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.w + c] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    /// Class labels (0 or 1) in row-major order.
    pub fn labels(&self) -> Vec<usize> {
        self.bits.iter().map(|&b| b as usize).collect()
    }

    pub fn transform(&self, g: GroupElement) -> BinaryMask {
        let (h2, w2) = g.output_dims((self.h, self.w));
        let mut out = BinaryMask::zeros(h2, w2);
        for r in 0..self.h {
            for c in 0..self.w {
                let (r2, c2) = g.map_pixel(r, c, self.h, self.w);
                out.set(r2, c2, self.get(r, c));
            }
        }
        out
    }

    fn check_same(&self, other: &BinaryMask) -> Result<()> {
        if (self.h, self.w) != (other.h, other.w) {
            return shape_err(format!("masks are {}x{} and {}x{}", self.h, self.w, other.h, other.w));
        }
        Ok(())
    }
}

/// Confusion counts of a prediction against ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    pub fn from_masks(pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        pred.check_same(gt)?;
        let mut c = Counts::default();
        for (&p, &g) in pred.bits.iter().zip(&gt.bits) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }

    fn ratio(num: u64, den: u64) -> Option<f64> {
        (den > 0).then(|| num as f64 / den as f64)
    }

    /// Dice, with 1 when both masks are empty.
    pub fn dice(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        Counts::ratio(2 * self.tp, den).unwrap_or(1.0)
    }

    pub fn jaccard(&self) -> f64 {
        Counts::ratio(self.tp, self.tp + self.fp + self.fn_).unwrap_or(1.0)
    }

    /// Undefined when nothing is predicted.
    pub fn precision(&self) -> Option<f64> {
        Counts::ratio(self.tp, self.tp + self.fp)
    }

    /// Undefined when the ground truth is empty.
    pub fn recall(&self) -> Option<f64> {
        Counts::ratio(self.tp, self.tp + self.fn_)
    }

    /// Undefined when every pixel is foreground in the ground truth.
    pub fn specificity(&self) -> Option<f64> {
        Counts::ratio(self.tn, self.tn + self.fp)
    }

    fn report(&self, hausdorff: Option<f64>) -> MetricReport {
        let dice = self.dice();
        MetricReport {
            dice,
            hausdorff,
            jaccard: self.jaccard(),
            precision: self.precision(),
            specificity: self.specificity(),
            // F1 of precision and recall is Dice for binary masks
            f1: dice,
            counts: *self,
        }
    }
}

/// Per-case metrics. `None` marks a value that is undefined for the case.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub dice: f64,
    pub hausdorff: Option<f64>,
    pub jaccard: f64,
    pub precision: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: f64,
    pub counts: Counts,
}

/// Every metric except Hausdorff, which is left `None`.
pub fn overlap_metrics(pred: &BinaryMask, gt: &BinaryMask) -> Result<MetricReport> {
    Ok(Counts::from_masks(pred, gt)?.report(None))
}

pub fn evaluate(pred: &BinaryMask, gt: &BinaryMask) -> Result<MetricReport> {
    let counts = Counts::from_masks(pred, gt)?;
    Ok(counts.report(hausdorff(pred, gt)?))
}

/// Squared Euclidean distance from every pixel to the nearest foreground pixel
/// of `mask`, or `None` everywhere when the mask is empty.
///
/// Separable lower-envelope transform (Felzenszwalb and Huttenlocher) with
/// parabola intersections compared as exact fractions.
pub fn squared_distance_transform(mask: &BinaryMask) -> Option<Vec<u64>> {
    if mask.is_empty() {
        return None;
    }
    let (h, w) = (mask.h, mask.w);
    // column pass: distance to the nearest foreground pixel in the same column
    let mut col: Vec<Option<u64>> = vec![None; h * w];
    for c in 0..w {
        let mut last: Option<usize> = None;
        for r in 0..h {
            if mask.get(r, c) {
                last = Some(r);
            }
            col[r * w + c] = last.map(|l| (r - l) as u64);
        }
        let mut next: Option<usize> = None;
        for r in (0..h).rev() {
            if mask.get(r, c) {
                next = Some(r);
            }
            if let Some(n) = next {
                let d = (n - r) as u64;
                let slot = &mut col[r * w + c];
                *slot = Some(slot.map_or(d, |e| e.min(d)));
            }
        }
    }
    let mut out = vec![0u64; h * w];
    let mut f = Vec::with_capacity(w);
    for r in 0..h {
        f.clear();
        f.extend(col[r * w..(r + 1) * w].iter().map(|d| d.map(|d| d * d)));
        lower_envelope(&f, &mut out[r * w..(r + 1) * w]);
    }
    Some(out)
}

/// `out[q] = min_p f[p] + (q - p)²` over the finite entries of `f` (at least one must exist).
fn lower_envelope(f: &[Option<u64>], out: &mut [u64]) {
    let pts: Vec<(i64, i64)> = f
        .iter()
        .enumerate()
        .filter_map(|(p, v)| v.map(|v| (p as i64, v as i64)))
        .collect();
    // hull[k] holds parabola k; bound[k] is the left edge of its region as num/den
    let mut hull: Vec<(i64, i64)> = Vec::with_capacity(pts.len());
    let mut bound: Vec<Option<(i64, i64)>> = Vec::with_capacity(pts.len());
    for &(q, fq) in &pts {
        loop {
            let Some(&(p, fp)) = hull.last() else {
                hull.push((q, fq));
                bound.push(None);
                break;
            };
            // intersection of the parabolas at p and q
            let num = (fq + q * q) - (fp + p * p);
            let den = 2 * (q - p);
            match bound.last().copied().flatten() {
                Some((bn, bd)) if num * bd <= bn * den => {
                    hull.pop();
                    bound.pop();
                }
                _ => {
                    hull.push((q, fq));
                    bound.push(Some((num, den)));
                    break;
                }
            }
        }
    }
    let mut k = 0;
    for (x, o) in out.iter_mut().enumerate() {
        let x = x as i64;
        while k + 1 < hull.len() {
            let (bn, bd) = bound[k + 1].expect("inner bounds are finite");
            if bn < x * bd {
                k += 1;
            } else {
                break;
            }
        }
        let (p, fp) = hull[k];
        *o = (fp + (x - p) * (x - p)) as u64;
    }
}

/// Symmetric Hausdorff distance between foreground sets, in pixels.
/// `None` when either mask is empty.
pub fn hausdorff(pred: &BinaryMask, gt: &BinaryMask) -> Result<Option<f64>> {
    pred.check_same(gt)?;
    let (Some(dt_pred), Some(dt_gt)) = (squared_distance_transform(pred), squared_distance_transform(gt)) else {
        return Ok(None);
    };
    let directed = |a: &BinaryMask, dt_b: &[u64]| -> u64 {
        a.bits
            .iter()
            .zip(dt_b)
            .filter(|(b, _)| **b)
            .map(|(_, d)| *d)
            .max()
            .unwrap_or(0)
    };
    let sq = directed(pred, &dt_gt).max(directed(gt, &dt_pred));
    Ok(Some((sq as f64).sqrt()))
}

/// Mean of the defined values and how many there were.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeanOf {
    pub mean: Option<f64>,
    pub n: usize,
}

impl MeanOf {
    fn of(values: impl Iterator<Item = Option<f64>>) -> MeanOf {
        let mut sum = 0.0;
        let mut n = 0;
        for v in values.flatten() {
            sum += v;
            n += 1;
        }
        MeanOf {
            mean: (n > 0).then(|| sum / n as f64),
            n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MacroSummary {
    pub dice: MeanOf,
    pub hausdorff: MeanOf,
    pub jaccard: MeanOf,
    pub precision: MeanOf,
    pub specificity: MeanOf,
    pub f1: MeanOf,
}

/// Metrics of the pooled confusion counts. Hausdorff has no pooled form.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MicroSummary {
    pub dice: f64,
    pub jaccard: f64,
    pub precision: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: f64,
    pub counts: Counts,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub n_cases: usize,
    #[serde(rename = "macro")]
    pub macro_: MacroSummary,
    pub micro: MicroSummary,
}

pub fn dataset_aggregate(reports: &[MetricReport]) -> Summary {
    let m = |f: fn(&MetricReport) -> Option<f64>| MeanOf::of(reports.iter().map(f));
    let pooled = reports.iter().fold(Counts::default(), |a, r| a.add(r.counts));
    let dice = pooled.dice();
    Summary {
        n_cases: reports.len(),
        macro_: MacroSummary {
            dice: m(|r| Some(r.dice)),
            hausdorff: m(|r| r.hausdorff),
            jaccard: m(|r| Some(r.jaccard)),
            precision: m(|r| r.precision),
            specificity: m(|r| r.specificity),
            f1: m(|r| Some(r.f1)),
        },
        micro: MicroSummary {
            dice,
            jaccard: pooled.jaccard(),
            precision: pooled.precision(),
            specificity: pooled.specificity(),
            f1: dice,
            counts: pooled,
        },
    }
}

#[derive(Serialize)]
struct CaseLine<'a> {
    id: &'a str,
    #[serde(flatten)]
    report: &'a MetricReport,
}

/// One JSON object per case.
pub fn write_jsonl(path: &Path, cases: &[(String, MetricReport)]) -> Result<()> {
    let mut out = Vec::new();
    for (id, report) in cases {
        serde_json::to_writer(&mut out, &CaseLine { id, report })?;
        out.push(b'\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub const SUMMARY_HEADER: &str = "aggregation,dice,hausdorff,jaccard,precision,specificity,f1";

fn cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// Macro and micro rows; empty cells for undefined values.
pub fn summary_csv(s: &Summary) -> String {
    let m = &s.macro_;
    let u = &s.micro;
    let mut out = String::new();
    out.push_str(SUMMARY_HEADER);
    out.push('\n');
    let rows = [
        (
            "macro",
            [
                m.dice.mean,
                m.hausdorff.mean,
                m.jaccard.mean,
                m.precision.mean,
                m.specificity.mean,
                m.f1.mean,
            ],
        ),
        (
            "micro",
            [
                Some(u.dice),
                None,
                Some(u.jaccard),
                u.precision,
                u.specificity,
                Some(u.f1),
            ],
        ),
    ];
    for (name, vals) in rows {
        let cells: Vec<String> = vals.iter().map(|v| cell(*v)).collect();
        out.push_str(name);
        out.push(',');
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn write_summary_csv(path: &Path, s: &Summary) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(summary_csv(s).as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> BinaryMask {
        BinaryMask::from_fn(h, w, |r, c| on.contains(&(r, c)))
    }

    #[test]
    fn identical_nonempty_masks() {
        let m = mask(4, 4, &[(1, 1), (2, 2)]);
        let r = evaluate(&m, &m).unwrap();
        assert_eq!((r.dice, r.jaccard, r.precision, r.f1), (1.0, 1.0, Some(1.0), 1.0));
        assert_eq!(r.hausdorff, Some(0.0));
    }

    #[test]
    fn disjoint_masks() {
        let r = evaluate(&mask(4, 4, &[(0, 0)]), &mask(4, 4, &[(3, 3)])).unwrap();
        assert_eq!((r.dice, r.jaccard), (0.0, 0.0));
        assert_eq!(r.hausdorff, Some(18f64.sqrt()));
    }

    #[test]
    fn hand_counted_case() {
        let pred = mask(4, 4, &[(0, 0), (0, 1)]);
        let gt = mask(4, 4, &[(0, 1), (1, 1)]);
        let r = overlap_metrics(&pred, &gt).unwrap();
        assert_eq!(r.dice, 0.5);
        assert!((r.jaccard - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.precision, Some(0.5));
        // 16 pixels: tp 1, fp 1, fn 1, tn 13
        assert_eq!(r.specificity, Some(13.0 / 14.0));
        assert_eq!(r.hausdorff, None);
    }

    #[test]
    fn empty_conventions() {
        let e = BinaryMask::zeros(3, 3);
        let one = mask(3, 3, &[(1, 1)]);
        let r = evaluate(&e, &e).unwrap();
        assert_eq!((r.dice, r.jaccard, r.precision, r.hausdorff), (1.0, 1.0, None, None));
        let r = evaluate(&e, &one).unwrap();
        assert_eq!((r.dice, r.hausdorff, r.precision), (0.0, None, None));
        let r = evaluate(&one, &e).unwrap();
        assert_eq!((r.dice, r.hausdorff, r.precision), (0.0, None, Some(0.0)));
    }

    #[test]
    fn three_four_five() {
        let r = hausdorff(&mask(5, 5, &[(0, 0)]), &mask(5, 5, &[(3, 4)])).unwrap();
        assert_eq!(r, Some(5.0));
    }

    #[test]
    fn precision_and_specificity_are_asymmetric() {
        let a = mask(4, 4, &[(0, 0), (0, 1), (0, 2)]);
        let b = mask(4, 4, &[(0, 0)]);
        let ab = overlap_metrics(&a, &b).unwrap();
        let ba = overlap_metrics(&b, &a).unwrap();
        assert_eq!(ab.dice, ba.dice);
        assert_ne!(ab.precision, ba.precision);
        assert_ne!(ab.specificity, ba.specificity);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(evaluate(&BinaryMask::zeros(2, 3), &BinaryMask::zeros(3, 2)).is_err());
        assert!(BinaryMask::new(2, 2, vec![true]).is_err());
    }

    #[test]
    fn aggregation() {
        let big = mask(4, 4, &[(0, 0), (0, 1), (0, 2), (0, 3), (1, 0), (1, 1)]);
        let small = mask(4, 4, &[(3, 3)]);
        let a = evaluate(&big, &big).unwrap();
        let s = dataset_aggregate(std::slice::from_ref(&a));
        assert_eq!(s.macro_.dice.mean, Some(a.dice));
        assert_eq!(s.micro.dice, a.dice);
        let s2 = dataset_aggregate(&[a.clone(), a.clone()]);
        assert_eq!(s2.macro_.dice.mean, Some(1.0));
        // imbalanced pair: a perfect big case and a missed small one
        let b = evaluate(&BinaryMask::zeros(4, 4), &small).unwrap();
        let s = dataset_aggregate(&[a, b]);
        assert_eq!(s.macro_.dice.mean, Some(0.5));
        assert!((s.micro.dice - 12.0 / 13.0).abs() < 1e-15);
        assert_eq!(s.macro_.hausdorff.n, 1);
        let csv = summary_csv(&s);
        assert!(csv.starts_with("aggregation,dice,hausdorff,jaccard,precision,specificity,f1\n"));
        assert_eq!(csv.lines().count(), 3);
    }
}
