//! The `gerseg` command line: gen, train, eval, verify, gradcheck, info, dump-config.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Arg, ArgAction, ArgMatches, Command};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evalmetrics::{dataset_aggregate, evaluate, summary_csv, write_jsonl, write_summary_csv};
use crate::glayers::{Ctx, Mode};
use crate::kv;
use crate::net::{self, equivariance_report, gradcheck, Corruption, EquivarianceRow, NetConfig, Network};
use crate::synthdata::{self, read_mask_pgm, read_split, write_corpus, write_pgm, SynthConfig};
use crate::tensor::{Scalar, Tensor};
use crate::train::{fit, predict_masks, FitOptions, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILED: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

crate::glayers::text_enum!(Precision { F32 => "f32", F64 => "f64" });

/// Everything a command can be configured with, as one flat key space.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub corpus_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Empty means `out_dir/best.ckpt`.
    pub checkpoint: String,
    pub eval_split: String,
    /// Directory of `{id}.mask.pgm` predictions to score instead of running the network.
    pub pred_dir: String,
    pub verify_size: usize,
    pub verify_seed: u64,
    pub verify_precision: Precision,
    pub gradcheck_size: usize,
    pub gradcheck_probes: usize,
    pub gradcheck_seed: u64,
    /// Layer whose analytic gradient is deliberately spoiled (negative control).
    pub gradcheck_corrupt: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            net: NetConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            corpus_dir: PathBuf::from("corpus"),
            out_dir: PathBuf::from("run"),
            checkpoint: String::new(),
            eval_split: "test".into(),
            pred_dir: String::new(),
            verify_size: 64,
            verify_seed: 0,
            verify_precision: Precision::F64,
            gradcheck_size: 8,
            gradcheck_probes: 100,
            gradcheck_seed: 0,
            gradcheck_corrupt: String::new(),
        }
    }
}

const RUN_KEYS: [&str; 12] = [
    "corpus_dir",
    "out_dir",
    "checkpoint",
    "eval_split",
    "pred_dir",
    "verify_size",
    "verify_seed",
    "verify_precision",
    "gradcheck_size",
    "gradcheck_probes",
    "gradcheck_seed",
    "gradcheck_corrupt",
];

impl RunConfig {
    pub fn keys() -> Vec<&'static str> {
        let mut k: Vec<&'static str> = NetConfig::KEYS.to_vec();
        k.extend(TrainConfig::KEYS);
        k.extend(SynthConfig::KEYS);
        k.extend(RUN_KEYS);
        k
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        if self.net.set(key, v)? || self.train.set(key, v)? || self.synth.set(key, v)? {
            return Ok(());
        }
        match key {
            "corpus_dir" => self.corpus_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "checkpoint" => self.checkpoint = v.to_string(),
            "eval_split" => self.eval_split = v.to_string(),
            "pred_dir" => self.pred_dir = v.to_string(),
            "verify_size" => self.verify_size = kv::value(key, v)?,
            "verify_seed" => self.verify_seed = kv::value(key, v)?,
            "verify_precision" => self.verify_precision = v.parse()?,
            "gradcheck_size" => self.gradcheck_size = kv::value(key, v)?,
            "gradcheck_probes" => self.gradcheck_probes = kv::value(key, v)?,
            "gradcheck_seed" => self.gradcheck_seed = kv::value(key, v)?,
            "gradcheck_corrupt" => self.gradcheck_corrupt = v.to_string(),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut p = self.net.pairs();
        p.extend(self.train.pairs());
        p.extend(self.synth.pairs());
        p.extend([
            ("corpus_dir", self.corpus_dir.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("checkpoint", self.checkpoint.clone()),
            ("eval_split", self.eval_split.clone()),
            ("pred_dir", self.pred_dir.clone()),
            ("verify_size", self.verify_size.to_string()),
            ("verify_seed", self.verify_seed.to_string()),
            ("verify_precision", self.verify_precision.to_string()),
            ("gradcheck_size", self.gradcheck_size.to_string()),
            ("gradcheck_probes", self.gradcheck_probes.to_string()),
            ("gradcheck_seed", self.gradcheck_seed.to_string()),
            ("gradcheck_corrupt", self.gradcheck_corrupt.clone()),
        ]);
        p
    }

    pub fn to_text(&self) -> String {
        kv::render(&self.pairs())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in kv::parse(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.verify_size == 0 || self.gradcheck_size == 0 || self.gradcheck_probes == 0 {
            return Err(Error::Config(
                "verify_size, gradcheck_size, and gradcheck_probes must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        if self.checkpoint.is_empty() {
            self.out_dir.join("best.ckpt")
        } else {
            PathBuf::from(&self.checkpoint)
        }
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().fold(String::new(), |mut s, b| {
            write!(s, "{b:02x}").expect("string write");
            s
        })
    }
}

fn kebab(key: &str) -> String {
    key.replace('_', "-")
}

fn command() -> Command {
    let mut common = vec![
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("flat `key = value` config file"),
        Arg::new("threads")
            .long("threads")
            .value_name("N")
            .value_parser(clap::value_parser!(usize))
            .help("worker threads (default: $GERSEG_THREADS, else 1)"),
    ];
    for key in RunConfig::keys() {
        common.push(
            Arg::new(key)
                .long(kebab(key))
                .value_name("VALUE")
                .help(format!("override `{key}`")),
        );
    }
    let sub = |name: &'static str, about: &'static str| Command::new(name).about(about).args(common.clone());
    Command::new("gerseg")
        .about("D4-equivariant segmentation U-Net: data, training, evaluation, and checks")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(sub("gen", "generate the synthetic corpus into corpus_dir"))
        .subcommand(
            sub("train", "train a network on corpus_dir").arg(
                Arg::new("resume")
                    .long("resume")
                    .action(ArgAction::SetTrue)
                    .help("continue from out_dir/last.ckpt"),
            ),
        )
        .subcommand(sub("eval", "score a checkpoint (or pred_dir masks) on eval_split"))
        .subcommand(
            sub(
                "verify",
                "rotate-then-predict vs predict-then-rotate for all 8 symmetries",
            )
            .arg(
                Arg::new("random-weights")
                    .long("random-weights")
                    .action(ArgAction::SetTrue)
                    .help("check a freshly initialized network instead of a checkpoint"),
            )
            .arg(
                Arg::new("heatmap")
                    .long("heatmap")
                    .action(ArgAction::SetTrue)
                    .help("write per-element discrepancy maps as PGM into out_dir"),
            ),
        )
        .subcommand(sub("gradcheck", "finite-difference check of every trainable layer"))
        .subcommand(sub("info", "describe a checkpoint's layers and parameter count"))
        .subcommand(sub("dump-config", "print the merged configuration"))
}

fn merged_config(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(path) => RunConfig::from_text(&fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    for key in RunConfig::keys() {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn thread_count(m: &ArgMatches) -> Result<usize> {
    if let Some(n) = m.get_one::<usize>("threads") {
        return Ok((*n).max(1));
    }
    match std::env::var("GERSEG_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(|n| n.max(1))
            .map_err(|_| Error::Config(format!("GERSEG_THREADS=`{v}` is not a thread count"))),
        Err(_) => Ok(1),
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config_hash: String,
    config: String,
    gerseg_version: &'static str,
    threads: usize,
}

/// `run.json` beside a command's outputs: the command, the merged config, and its hash.
fn write_manifest(dir: &Path, cfg: &RunConfig, command: &str, threads: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    let m = RunManifest {
        command,
        config_hash: cfg.hash(),
        config: cfg.to_text(),
        gerseg_version: env!("CARGO_PKG_VERSION"),
        threads,
    };
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(())
}

/// Outcome of a command that ran to completion.
pub struct Outcome {
    pub stdout: String,
    pub passed: bool,
}

impl Outcome {
    fn ok(stdout: String) -> Self {
        Outcome { stdout, passed: true }
    }
}

fn load_checkpoint<F: Scalar>(cfg: &RunConfig) -> Result<Network<F>> {
    let path = cfg.checkpoint_path();
    net::load(&path).map_err(|e| match e {
        Error::Io(io) => Error::Checkpoint(format!("{}: {io}", path.display())),
        e => e,
    })
}

fn cmd_gen(cfg: &RunConfig) -> Result<Outcome> {
    let samples = synthdata::generate(&cfg.synth)?;
    let parts = synthdata::split(samples.len(), cfg.synth.train_frac, cfg.synth.data_seed);
    fs::create_dir_all(&cfg.corpus_dir)?;
    write_corpus(&cfg.corpus_dir, &samples, &parts)?;
    let manifest = fs::read(cfg.corpus_dir.join("manifest.tsv"))?;
    let hash = Sha256::digest(&manifest);
    Ok(Outcome::ok(format!(
        "generated {} samples: train {} / val {} / test {}\nmanifest sha256 {}\n",
        samples.len(),
        parts.train.len(),
        parts.val.len(),
        parts.test.len(),
        hash.iter().map(|b| format!("{b:02x}")).collect::<String>()
    )))
}

fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<Outcome> {
    let train = read_split(&cfg.corpus_dir, "train")?;
    let val = read_split(&cfg.corpus_dir, "val")?;
    let mut net: Network<f32> = Network::build(&cfg.net)?;
    let opts = FitOptions {
        out_dir: Some(&cfg.out_dir),
        resume,
        ..FitOptions::default()
    };
    let report = fit(&mut net, &train, &val, &cfg.train, &opts)?;
    Ok(Outcome::ok(format!(
        "{} network, {} parameters\nepochs {} steps {} best val dice {:.6} at epoch {}{}\n",
        cfg.net.group_mode,
        net.param_count(),
        report.log.len(),
        report.steps,
        report.best_val_dice,
        report.best_epoch,
        if report.stopped_early { " (early stop)" } else { "" }
    )))
}

fn cmd_eval(cfg: &RunConfig) -> Result<Outcome> {
    let samples = read_split(&cfg.corpus_dir, &cfg.eval_split)?;
    let preds = if cfg.pred_dir.is_empty() {
        let mut net: Network<f32> = load_checkpoint(cfg)?;
        let images: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.image).collect();
        predict_masks(&mut net, &images, cfg.train.batch_size)?
    } else {
        let dir = Path::new(&cfg.pred_dir);
        samples
            .iter()
            .map(|s| read_mask_pgm(&dir.join(format!("{}.mask.pgm", s.id))))
            .collect::<Result<Vec<_>>>()?
    };
    let mut cases = Vec::with_capacity(samples.len());
    for (p, s) in preds.iter().zip(&samples) {
        cases.push((s.id.clone(), evaluate(p, &s.mask)?));
    }
    let reports: Vec<_> = cases.iter().map(|(_, r)| r.clone()).collect();
    let summary = dataset_aggregate(&reports);
    fs::create_dir_all(&cfg.out_dir)?;
    let split = &cfg.eval_split;
    write_jsonl(&cfg.out_dir.join(format!("eval_{split}.jsonl")), &cases)?;
    write_summary_csv(&cfg.out_dir.join(format!("eval_{split}_summary.csv")), &summary)?;
    Ok(Outcome::ok(format!(
        "{} cases on `{split}`\n{}",
        cases.len(),
        summary_csv(&summary)
    )))
}

pub const VERIFY_HEADER: &str = "element\tmax_abs\tmax_rel\tmask_diff_px";
/// Absolute tolerance for 64-bit verification.
pub const VERIFY_TOL_F64: f64 = 1e-10;
/// Relative tolerance for 32-bit verification.
pub const VERIFY_TOL_F32: f64 = 1e-4;

pub fn verify_tsv(rows: &[EquivarianceRow]) -> String {
    let mut s = format!("{VERIFY_HEADER}\n");
    for r in rows {
        writeln!(s, "{}\t{:e}\t{:e}\t{}", r.element, r.max_abs, r.max_rel, r.mask_diff_px).expect("string write");
    }
    s
}

fn verify_with<F: Scalar>(cfg: &RunConfig, random: bool) -> Result<Vec<EquivarianceRow>> {
    let (mut net, ctx) = if random {
        // per-image batch statistics: untrained running statistics are not meaningful
        (
            Network::<F>::build(&cfg.net)?,
            Ctx {
                mode: Mode::Train,
                cache: false,
            },
        )
    } else {
        (load_checkpoint::<F>(cfg)?, Ctx::EVAL)
    };
    let s = cfg.verify_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.verify_seed);
    let image = Tensor::from_fn(&[1, net.config().in_channels, s, s], |_| {
        F::from_f64_lossy(rng.gen_range(-1.6..1.6))
    });
    equivariance_report(&mut net, &image, ctx)
}

fn cmd_verify(cfg: &RunConfig, random: bool, heatmap: bool) -> Result<Outcome> {
    let rows = match cfg.verify_precision {
        Precision::F64 => verify_with::<f64>(cfg, random)?,
        Precision::F32 => verify_with::<f32>(cfg, random)?,
    };
    let within = |r: &EquivarianceRow| match cfg.verify_precision {
        Precision::F64 => r.max_abs <= VERIFY_TOL_F64,
        Precision::F32 => r.max_rel <= VERIFY_TOL_F32,
    };
    let passed = rows.iter().all(within);
    let tsv = verify_tsv(&rows);
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("verify.tsv"), &tsv)?;
    if heatmap {
        for r in &rows {
            let data: Vec<f32> = r.heatmap.data().iter().map(|v| *v as f32).collect();
            let hi = data.iter().copied().fold(0.0f32, f32::max);
            let (h, w) = (r.heatmap.dim(0), r.heatmap.dim(1));
            write_pgm(
                &cfg.out_dir.join(format!("heatmap_{}.pgm", r.element)),
                h,
                w,
                &data,
                0.0,
                hi,
            )?;
        }
    }
    Ok(Outcome { stdout: tsv, passed })
}

pub const GRADCHECK_HEADER: &str = "layer\tprobes\tkinks\tmax_rel_err\tmax_abs_err\tstatus";
pub const GRADCHECK_TOL: f64 = 1e-5;

fn cmd_gradcheck(cfg: &RunConfig) -> Result<Outcome> {
    let mut net: Network<f64> = Network::build(&cfg.net)?;
    let s = cfg.gradcheck_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.gradcheck_seed);
    let x = Tensor::from_fn(&[2, cfg.net.in_channels, s, s], |_| rng.gen_range(-1.6..1.6));
    let labels: Vec<usize> = (0..2 * s * s).map(|_| rng.gen_range(0..cfg.net.n_classes)).collect();
    let corrupt = Corruption {
        layer: (!cfg.gradcheck_corrupt.is_empty()).then(|| cfg.gradcheck_corrupt.clone()),
    };
    if let Some(l) = &corrupt.layer {
        if !net
            .params()
            .iter()
            .any(|p| p.name.rsplit_once('.').map(|x| x.0) == Some(l.as_str()))
        {
            return Err(Error::Config(format!(
                "gradcheck_corrupt names no trainable layer: `{l}`"
            )));
        }
    }
    let rows = gradcheck(
        &mut net,
        &x,
        &labels,
        cfg.gradcheck_probes,
        cfg.gradcheck_seed,
        &corrupt,
    )?;
    let mut out = format!("{GRADCHECK_HEADER}\n");
    let mut passed = true;
    for r in &rows {
        let ok = r.max_rel_err <= GRADCHECK_TOL;
        passed &= ok;
        writeln!(
            out,
            "{}\t{}\t{}\t{:e}\t{:e}\t{}",
            r.layer,
            r.probes,
            r.kinks,
            r.max_rel_err,
            r.max_abs_err,
            if ok { "pass" } else { "FAIL" }
        )
        .expect("string write");
    }
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("gradcheck.tsv"), &out)?;
    Ok(Outcome { stdout: out, passed })
}

pub fn describe<F: Scalar>(net: &Network<F>, size: usize) -> String {
    let c = net.config();
    let mut s = String::new();
    writeln!(s, "mode\t{}", c.group_mode).expect("string write");
    writeln!(s, "width_scale\t{}", c.width_scale).expect("string write");
    writeln!(s, "widths\t{:?}", net.widths()).expect("string write");
    writeln!(s, "params\t{}", net.param_count()).expect("string write");
    writeln!(s, "layer\tkind\tin\tout\tparams").expect("string write");
    for d in net.descriptors() {
        let (i, o) = d.shapes(size, size);
        writeln!(s, "{}\t{}\t{:?}\t{:?}\t{}", d.name, d.kind, i, o, d.params).expect("string write");
    }
    s
}

fn cmd_info(cfg: &RunConfig) -> Result<Outcome> {
    let net: Network<f32> = load_checkpoint(cfg)?;
    Ok(Outcome::ok(describe(&net, cfg.synth.image_size)))
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) | Error::Image(_) | Error::Checkpoint(_) | Error::Version { .. } | Error::Json(_) => EXIT_IO,
        Error::Diverged(_) | Error::NonFinite(_) => EXIT_FAILED,
        _ => EXIT_USAGE,
    }
}

/// Runs the command line and returns the process exit code.
/// Normal output goes to `out`, diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if code == EXIT_OK {
                write!(out, "{}", e.render())
            } else {
                write!(err, "{}", e.render())
            };
            return code;
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let start = Instant::now();
    let result = (|| -> Result<(RunConfig, usize, Outcome)> {
        let cfg = merged_config(sub)?;
        let threads = thread_count(sub)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        let outcome = pool.install(|| match name {
            "gen" => cmd_gen(&cfg),
            "train" => cmd_train(&cfg, sub.get_flag("resume")),
            "eval" => cmd_eval(&cfg),
            "verify" => cmd_verify(&cfg, sub.get_flag("random-weights"), sub.get_flag("heatmap")),
            "gradcheck" => cmd_gradcheck(&cfg),
            "info" => cmd_info(&cfg),
            "dump-config" => Ok(Outcome::ok(cfg.to_text())),
            _ => unreachable!("clap rejects unknown subcommands"),
        })?;
        Ok((cfg, threads, outcome))
    })();
    match result {
        Ok((cfg, threads, outcome)) => {
            let _ = out.write_all(outcome.stdout.as_bytes());
            let manifest_dir = match name {
                "gen" => Some(&cfg.corpus_dir),
                "info" | "dump-config" => None,
                _ => Some(&cfg.out_dir),
            };
            if let Some(dir) = manifest_dir {
                let _ = writeln!(err, "{name}: {:.1} s", start.elapsed().as_secs_f64());
                if let Err(e) = write_manifest(dir, &cfg, name, threads) {
                    let _ = writeln!(err, "error: {e}");
                    return exit_code(&e);
                }
            }
            if outcome.passed {
                EXIT_OK
            } else {
                let _ = writeln!(err, "{name}: check failed");
                EXIT_FAILED
            }
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::GroupMode;

    #[test]
    fn every_key_roundtrips() {
        let cfg = RunConfig::default();
        let text = cfg.to_text();
        assert_eq!(RunConfig::from_text(&text).unwrap(), cfg);
        let keys: Vec<String> = kv::parse(&text).unwrap().into_iter().map(|(k, _)| k).collect();
        assert_eq!(keys, RunConfig::keys());
        let mut sorted = keys.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), keys.len());
        assert!(RunConfig::from_text("nonsense = 1\n").is_err());
    }

    #[test]
    fn group_mode_flag() {
        let mut cfg = RunConfig::default();
        cfg.set("group_mode", "regular").unwrap();
        assert_eq!(cfg.net.group_mode, GroupMode::Regular);
        assert!(cfg.set("group_mode", "other").is_err());
    }
}
