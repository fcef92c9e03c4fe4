//! Loss, optimizer, augmentation, and the training loop.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dihedral::{act_on_plane, GroupElement};
use crate::error::{shape_err, Error, Result};
use crate::evalmetrics::{BinaryMask, Counts};
use crate::glayers::{Ctx, Param};
use crate::kv;
use crate::net::{read_checkpoint, save_with_state, CheckpointData, Network};
use crate::synthdata::Sample;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub max_epochs: usize,
    /// Epochs without a validation-Dice improvement before stopping.
    pub early_stop_patience: usize,
    pub lr_decay: f64,
    /// Epochs without improvement before each learning-rate decay.
    pub lr_plateau: usize,
    pub seed: u64,
    pub augment: bool,
    /// Leading share of the training split that is actually used.
    pub train_subset: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            lr0: 2e-4,
            max_epochs: 300,
            early_stop_patience: 25,
            lr_decay: 0.5,
            lr_plateau: 10,
            seed: 0,
            augment: true,
            train_subset: 1.0,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 9] = [
        "batch_size",
        "lr0",
        "max_epochs",
        "early_stop_patience",
        "lr_decay",
        "lr_plateau",
        "seed",
        "augment",
        "train_subset",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.lr_plateau == 0 {
            return Err(Error::Config(
                "batch_size, max_epochs, and lr_plateau must be positive".into(),
            ));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::Config("lr0 must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("lr_decay must be in (0, 1]".into()));
        }
        if !(self.train_subset > 0.0 && self.train_subset <= 1.0) {
            return Err(Error::Config("train_subset must be in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "batch_size" => self.batch_size = kv::value(key, v)?,
            "lr0" => self.lr0 = kv::value(key, v)?,
            "max_epochs" => self.max_epochs = kv::value(key, v)?,
            "early_stop_patience" => self.early_stop_patience = kv::value(key, v)?,
            "lr_decay" => self.lr_decay = kv::value(key, v)?,
            "lr_plateau" => self.lr_plateau = kv::value(key, v)?,
            "seed" => self.seed = kv::value(key, v)?,
            "augment" => self.augment = kv::flag(key, v)?,
            "train_subset" => self.train_subset = kv::value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("batch_size", self.batch_size.to_string()),
            ("lr0", self.lr0.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("early_stop_patience", self.early_stop_patience.to_string()),
            ("lr_decay", self.lr_decay.to_string()),
            ("lr_plateau", self.lr_plateau.to_string()),
            ("seed", self.seed.to_string()),
            ("augment", kv::on_off(self.augment)),
            ("train_subset", self.train_subset.to_string()),
        ]
    }
}

/// Mean pixel cross-entropy of `[N, K, H, W]` logits against per-item labels,
/// and its gradient `(softmax - onehot) / (N·H·W)`.
pub fn cross_entropy_loss<F: Scalar>(logits: &Tensor<F>, labels: &[usize]) -> Result<(f64, Tensor<F>)> {
    let &[n, k, h, w] = logits.shape() else {
        return shape_err(format!("logits must be [N, K, H, W], got {:?}", logits.shape()));
    };
    let npix = h * w;
    if labels.len() != n * npix {
        return shape_err(format!("{} labels for {} pixels", labels.len(), n * npix));
    }
    let total = (n * npix) as f64;
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    let x = logits.data();
    let mut p = vec![0.0f64; k];
    for item in 0..n {
        let base = item * k * npix;
        for px in 0..npix {
            let label = labels[item * npix + px];
            if label >= k {
                return Err(Error::Label {
                    label,
                    pixel: item * npix + px,
                    n_classes: k,
                });
            }
            let at = |c: usize| base + c * npix + px;
            let m = (0..k)
                .map(|c| x[at(c)].to_f64_lossy())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (c, pc) in p.iter_mut().enumerate() {
                *pc = (x[at(c)].to_f64_lossy() - m).exp();
                z += *pc;
            }
            loss += z.ln() - (x[at(label)].to_f64_lossy() - m);
            for (c, pc) in p.iter().enumerate() {
                let onehot = if c == label { 1.0 } else { 0.0 };
                grad.data_mut()[at(c)] = F::from_f64_lossy((pc / z - onehot) / total);
            }
        }
    }
    Ok((loss / total, grad))
}

#[derive(Clone, Debug)]
pub struct AdamState<F: Scalar> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &[&Param<F>]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter from its accumulated gradient.
pub fn adam_step<F: Scalar>(params: &mut [&mut Param<F>], state: &mut AdamState<F>, lr: f64) -> Result<()> {
    if params.len() != state.m.len() {
        return shape_err(format!("{} params but {} moment tensors", params.len(), state.m.len()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2) = (F::from_f64_lossy(state.beta1), F::from_f64_lossy(state.beta2));
    let (one_b1, one_b2) = (
        F::from_f64_lossy(1.0 - state.beta1),
        F::from_f64_lossy(1.0 - state.beta2),
    );
    let (c1, c2) = (F::from_f64_lossy(c1), F::from_f64_lossy(c2));
    let (lr, eps) = (F::from_f64_lossy(lr), F::from_f64_lossy(state.eps));
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        p.value.check_same_shape(m, &p.name)?;
        let g = p.grad.data();
        for (((w, mi), vi), &gi) in p.value.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g) {
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Affine map of the image's intensity range onto `[-1.6, 1.6]`; constant images map to 0.
pub fn normalize<F: Scalar>(image: &Tensor<F>) -> Tensor<F> {
    let lo = image
        .data()
        .iter()
        .map(|v| v.to_f64_lossy())
        .fold(f64::INFINITY, f64::min);
    let hi = image
        .data()
        .iter()
        .map(|v| v.to_f64_lossy())
        .fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Tensor::zeros(image.shape());
    }
    let s = 3.2 / (hi - lo);
    image.map(|v| F::from_f64_lossy((v.to_f64_lossy() - lo) * s - 1.6))
}

/// One random geometric transform: a grid symmetry followed by scale, aspect, and shift.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub element: GroupElement,
    pub scale: f64,
    /// Height stretch relative to width.
    pub aspect: f64,
    /// Shift in pixels, `(rows, cols)`.
    pub shift: (f64, f64),
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        element: GroupElement::IDENTITY,
        scale: 1.0,
        aspect: 1.0,
        shift: (0.0, 0.0),
    };

    /// Symmetry uniform over the eight elements; scale, aspect, and shift within ±10%.
    pub fn sample(rng: &mut impl Rng, size: usize) -> Self {
        let s = size as f64;
        AugmentDraw {
            element: GroupElement::from_index(rng.gen_range(0..8)),
            scale: rng.gen_range(0.9..=1.1),
            aspect: rng.gen_range(0.9..=1.1),
            shift: (rng.gen_range(-0.1..=0.1) * s, rng.gen_range(-0.1..=0.1) * s),
        }
    }

    pub fn rotation_only(self) -> Self {
        AugmentDraw {
            element: self.element,
            ..AugmentDraw::IDENTITY
        }
    }
}

/// Applies `draw` to a `[C, H, W]` image and its mask. Resampling is nearest
/// neighbour around the centre with zero fill outside the source.
pub fn apply_augment<F: Scalar>(
    draw: &AugmentDraw,
    image: &Tensor<F>,
    mask: &BinaryMask,
) -> Result<(Tensor<F>, BinaryMask)> {
    let &[c, h, w] = image.shape() else {
        return shape_err(format!("augment expects [C, H, W], got {:?}", image.shape()));
    };
    if h != w || (mask.height(), mask.width()) != (h, w) {
        return shape_err("augment needs a square image and a matching mask");
    }
    let img = act_on_plane(draw.element, image)?;
    let msk = mask.transform(draw.element);
    let sy = draw.scale * draw.aspect.sqrt();
    let sx = draw.scale / draw.aspect.sqrt();
    if sy == 1.0 && sx == 1.0 && draw.shift == (0.0, 0.0) {
        return Ok((img, msk));
    }
    let centre = (h as f64 - 1.0) / 2.0;
    let mut out = Tensor::zeros(image.shape());
    let mut out_mask = BinaryMask::zeros(h, w);
    let npix = h * w;
    for r in 0..h {
        let src_r = ((r as f64 - centre - draw.shift.0) / sy + centre).round();
        for col in 0..w {
            let src_c = ((col as f64 - centre - draw.shift.1) / sx + centre).round();
            if src_r < 0.0 || src_c < 0.0 || src_r >= h as f64 || src_c >= w as f64 {
                continue;
            }
            let (sr, sc) = (src_r as usize, src_c as usize);
            for ch in 0..c {
                out.data_mut()[ch * npix + r * w + col] = img.data()[ch * npix + sr * w + sc];
            }
            out_mask.set(r, col, msk.get(sr, sc));
        }
    }
    Ok((out, out_mask))
}

/// Draws and applies an augmentation; with `enabled` false the inputs are returned unchanged.
pub fn augment<F: Scalar>(
    image: &Tensor<F>,
    mask: &BinaryMask,
    rng: &mut impl Rng,
    enabled: bool,
) -> Result<(Tensor<F>, BinaryMask)> {
    if !enabled {
        return Ok((image.clone(), mask.clone()));
    }
    let draw = AugmentDraw::sample(rng, image.dim(-1));
    apply_augment(&draw, image, mask)
}

fn rng_for(seed: u64, a: u64, b: u64, tag: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (i, v) in [seed, a, b, tag].iter().enumerate() {
        key[i * 8..(i + 1) * 8].copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Augmentation randomness of one training item in one epoch.
pub fn item_rng(seed: u64, item: usize, epoch: usize) -> ChaCha8Rng {
    rng_for(seed, item as u64, epoch as u64, 1)
}

fn epoch_order(seed: u64, n: usize, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, u64::MAX, epoch as u64, 2));
    idx
}

/// Normalized images `[N, C, H, W]`.
fn image_batch<F: Scalar>(images: &[Tensor<F>]) -> Result<Tensor<F>> {
    Tensor::stack(images)
}

/// Foreground masks (any class other than 0) predicted for raw images.
pub fn predict_masks<F: Scalar>(
    net: &mut Network<F>,
    images: &[&Tensor<f32>],
    batch: usize,
) -> Result<Vec<BinaryMask>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let xs: Vec<Tensor<F>> = chunk.iter().map(|im| normalize(&im.cast::<F>())).collect();
        let logits = net.predict(&image_batch(&xs)?)?;
        let &[n, k, h, w] = logits.shape() else {
            unreachable!("network output is rank 4")
        };
        let npix = h * w;
        for item in 0..n {
            let base = item * k * npix;
            let bits = (0..npix)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..k {
                        if logits.data()[base + c * npix + p] > logits.data()[base + best * npix + p] {
                            best = c;
                        }
                    }
                    best != 0
                })
                .collect();
            out.push(BinaryMask::new(h, w, bits)?);
        }
    }
    Ok(out)
}

/// Macro-mean Dice of the network's predictions over `samples`.
pub fn mean_dice<F: Scalar>(net: &mut Network<F>, samples: &[Sample], batch: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no samples to score".into()));
    }
    let images: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.image).collect();
    let preds = predict_masks(net, &images, batch)?;
    let mut sum = 0.0;
    for (p, s) in preds.iter().zip(samples) {
        sum += Counts::from_masks(p, &s.mask)?.dice();
    }
    Ok(sum / samples.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub val_dice: f64,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "epoch,step,loss,val_dice,lr";

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.epoch, r.step, r.loss, r.val_dice, r.lr).expect("string write");
    }
    s
}

pub fn parse_log_csv(text: &str) -> Result<Vec<EpochLog>> {
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::Config("training log has an unexpected header".into()));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let [e, st, l, d, lr] = f[..] else {
                return Err(Error::Config(format!("bad training log line `{line}`")));
            };
            Ok(EpochLog {
                epoch: kv::value("epoch", e)?,
                step: kv::value("step", st)?,
                loss: kv::value("loss", l)?,
                val_dice: kv::value("val_dice", d)?,
                lr: kv::value("lr", lr)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions<'a> {
    /// Where `train_log.csv`, `last.ckpt`, and `best.ckpt` go.
    pub out_dir: Option<&'a Path>,
    /// Continue from `out_dir/last.ckpt` when it exists.
    pub resume: bool,
    /// Return after this many finished epochs, as if interrupted.
    pub stop_after_epochs: Option<usize>,
    /// Hard cap on optimizer steps.
    pub max_steps: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub log: Vec<EpochLog>,
    pub best_val_dice: f64,
    pub best_epoch: usize,
    pub steps: u64,
    pub stopped_early: bool,
    /// Loss of every optimizer step run in this call.
    pub step_losses: Vec<f64>,
}

struct Progress {
    epoch: usize,
    lr: f64,
    best_val_dice: f64,
    best_epoch: usize,
    bad_epochs: usize,
    plateau: usize,
    done: bool,
    stopped_early: bool,
}

impl Progress {
    fn pairs(&self, step: u64) -> Vec<(String, String)> {
        vec![
            ("epoch".into(), self.epoch.to_string()),
            ("step".into(), step.to_string()),
            ("lr".into(), self.lr.to_string()),
            ("best_val_dice".into(), self.best_val_dice.to_string()),
            ("best_epoch".into(), self.best_epoch.to_string()),
            ("bad_epochs".into(), self.bad_epochs.to_string()),
            ("plateau".into(), self.plateau.to_string()),
            ("done".into(), kv::on_off(self.done)),
            ("stopped_early".into(), kv::on_off(self.stopped_early)),
        ]
    }

    fn from_state(state: &[(String, String)]) -> Result<(Self, u64)> {
        let get = |k: &str| {
            state
                .iter()
                .find(|(n, _)| n == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no training state `{k}`")))
        };
        Ok((
            Progress {
                epoch: kv::value("epoch", get("epoch")?)?,
                lr: kv::value("lr", get("lr")?)?,
                best_val_dice: kv::value("best_val_dice", get("best_val_dice")?)?,
                best_epoch: kv::value("best_epoch", get("best_epoch")?)?,
                bad_epochs: kv::value("bad_epochs", get("bad_epochs")?)?,
                plateau: kv::value("plateau", get("plateau")?)?,
                done: kv::flag("done", get("done")?)?,
                stopped_early: kv::flag("stopped_early", get("stopped_early")?)?,
            },
            kv::value("step", get("step")?)?,
        ))
    }
}

fn grad_norms<F: Scalar>(net: &Network<F>) -> String {
    let mut s = String::new();
    for p in net.params() {
        let n = p
            .grad
            .data()
            .iter()
            .map(|v| v.to_f64_lossy().powi(2))
            .sum::<f64>()
            .sqrt();
        writeln!(s, "  {}: {n}", p.name).expect("string write");
    }
    s
}

/// Writes the diagnostic dump and builds the error to return.
fn diverged<F: Scalar>(net: &Network<F>, head: &str, out_dir: Option<&Path>) -> Result<Error> {
    let msg = format!("{head}\ngradient norms:\n{}", grad_norms(net));
    if let Some(d) = out_dir {
        fs::write(d.join("diverged.txt"), &msg)?;
    }
    Ok(Error::Diverged(msg))
}

fn adam_tensors<F: Scalar>(net: &Network<F>, adam: &AdamState<F>) -> Vec<(String, Tensor<f32>)> {
    let mut v = Vec::new();
    for ((p, m), s) in net.params().iter().zip(&adam.m).zip(&adam.v) {
        v.push((format!("adam.m/{}", p.name), m.cast()));
        v.push((format!("adam.v/{}", p.name), s.cast()));
    }
    v
}

fn restore_adam<F: Scalar>(net: &Network<F>, data: &CheckpointData, step: u64) -> Result<AdamState<F>> {
    let mut adam = AdamState::new(&net.params());
    for (i, p) in net.params().iter().enumerate() {
        for (prefix, slot) in [("adam.m/", &mut adam.m[i]), ("adam.v/", &mut adam.v[i])] {
            let name = format!("{prefix}{}", p.name);
            let t = data
                .tensor(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor `{name}`")))?;
            slot.check_same_shape(&t.cast(), &name)?;
            *slot = t.cast();
        }
    }
    adam.step = step;
    Ok(adam)
}

fn snapshot<F: Scalar>(net: &Network<F>) -> Vec<Tensor<F>> {
    let mut v: Vec<Tensor<F>> = net.params().iter().map(|p| p.value.clone()).collect();
    v.extend(net.buffers().into_iter().map(|(_, t)| t));
    v
}

fn restore<F: Scalar>(net: &mut Network<F>, snap: &[Tensor<F>]) -> Result<()> {
    let n = {
        let mut params = net.params_mut();
        for (p, t) in params.iter_mut().zip(snap) {
            p.value = t.clone();
        }
        params.len()
    };
    let names: Vec<String> = net.buffers().into_iter().map(|(n, _)| n).collect();
    for (name, t) in names.iter().zip(&snap[n..]) {
        net.load_buffer(name, t)?;
    }
    Ok(())
}

/// Trains `net` on `train`, picking the epoch with the best validation Dice.
/// On return the network holds the best weights.
pub fn fit<F: Scalar>(
    net: &mut Network<F>,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    opts: &FitOptions,
) -> Result<FitReport> {
    cfg.validate()?;
    let n_used = ((train.len() as f64 * cfg.train_subset).round() as usize).clamp(1.min(train.len()), train.len());
    let train = &train[..n_used];
    if train.is_empty() {
        return Err(Error::EmptyDataset("training split is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptyDataset("validation split is empty".into()));
    }
    let last_path = opts.out_dir.map(|d| d.join("last.ckpt"));
    let best_path = opts.out_dir.map(|d| d.join("best.ckpt"));
    let log_path = opts.out_dir.map(|d| d.join("train_log.csv"));
    if let Some(d) = opts.out_dir {
        fs::create_dir_all(d)?;
    }

    let mut adam = AdamState::new(&net.params());
    let mut step = 0u64;
    let mut log = Vec::new();
    let mut prog = Progress {
        epoch: 0,
        lr: cfg.lr0,
        best_val_dice: f64::NEG_INFINITY,
        best_epoch: 0,
        bad_epochs: 0,
        plateau: 0,
        done: false,
        stopped_early: false,
    };
    let mut best: Option<Vec<Tensor<F>>> = None;
    if let (true, Some(last)) = (opts.resume, &last_path) {
        if last.exists() {
            let data = read_checkpoint(last)?;
            net.load_from(&data)?;
            let (p, s) = Progress::from_state(&data.state()?)?;
            adam = restore_adam(net, &data, s)?;
            prog = p;
            step = s;
            log = parse_log_csv(&fs::read_to_string(log_path.as_ref().expect("paired with last.ckpt"))?)?;
            log.truncate(prog.epoch);
            let mut best_net = Network::<F>::build(net.config())?;
            best_net.load_from(&read_checkpoint(best_path.as_ref().expect("paired with last.ckpt"))?)?;
            best = Some(snapshot(&best_net));
        }
    }

    let mut step_losses = Vec::new();
    let size = train[0].image.dim(-1);
    while !prog.done && prog.epoch < cfg.max_epochs {
        let epoch = prog.epoch;
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for chunk in epoch_order(cfg.seed, train.len(), epoch).chunks(cfg.batch_size) {
            if opts.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let mut xs = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len() * size * size);
            for &i in chunk {
                let img = normalize(&train[i].image.cast::<F>());
                let (img, mask) = augment(&img, &train[i].mask, &mut item_rng(cfg.seed, i, epoch), cfg.augment)?;
                xs.push(img);
                labels.extend(mask.labels());
            }
            let x = image_batch(&xs)?;
            net.zero_grad();
            let outcome = net.forward(&x, Ctx::TRAIN).and_then(|logits| {
                let (loss, g) = cross_entropy_loss(&logits, &labels)?;
                if loss.is_finite() {
                    net.backward(&g)?;
                }
                Ok(loss)
            });
            let loss = match outcome {
                Ok(l) if l.is_finite() => l,
                Ok(_) | Err(Error::NonFinite(_)) => {
                    return Err(diverged(
                        net,
                        &format!("non-finite loss at epoch {epoch}, step {step}, lr {}", prog.lr),
                        opts.out_dir,
                    )?);
                }
                Err(e) => return Err(e),
            };
            adam_step(&mut net.params_mut(), &mut adam, prog.lr)?;
            step += 1;
            loss_sum += loss;
            n_batches += 1;
            step_losses.push(loss);
        }
        let val_dice = match mean_dice(net, val, cfg.batch_size) {
            Err(Error::NonFinite(what)) => {
                let head = format!(
                    "non-finite validation output ({what}) after epoch {epoch}, step {step}, lr {}",
                    prog.lr
                );
                return Err(diverged(net, &head, opts.out_dir)?);
            }
            r => r?,
        };
        log.push(EpochLog {
            epoch,
            step,
            loss: if n_batches > 0 {
                loss_sum / n_batches as f64
            } else {
                f64::NAN
            },
            val_dice,
            lr: prog.lr,
        });
        if val_dice > prog.best_val_dice {
            prog.best_val_dice = val_dice;
            prog.best_epoch = epoch;
            prog.bad_epochs = 0;
            prog.plateau = 0;
            best = Some(snapshot(net));
            if let Some(p) = &best_path {
                crate::net::save(net, p)?;
            }
        } else {
            prog.bad_epochs += 1;
            prog.plateau += 1;
            if prog.plateau >= cfg.lr_plateau {
                prog.lr *= cfg.lr_decay;
                prog.plateau = 0;
            }
            if prog.bad_epochs > cfg.early_stop_patience {
                prog.done = true;
                prog.stopped_early = true;
            }
        }
        prog.epoch += 1;
        if opts.max_steps.is_some_and(|m| step >= m) {
            prog.done = true;
        }
        if let (Some(last), Some(lp)) = (&last_path, &log_path) {
            fs::write(lp, log_csv(&log))?;
            save_with_state(net, last, &prog.pairs(step), adam_tensors(net, &adam))?;
        }
        if opts.stop_after_epochs.is_some_and(|s| prog.epoch >= s) && !prog.done {
            break;
        }
    }
    if let Some(b) = &best {
        restore(net, b)?;
    }
    Ok(FitReport {
        log,
        best_val_dice: prog.best_val_dice,
        best_epoch: prog.best_epoch,
        steps: step,
        stopped_early: prog.stopped_early,
        step_losses,
    })
}
