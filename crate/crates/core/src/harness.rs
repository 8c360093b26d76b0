//! Experiment plumbing behind the `tcnn` subcommands: configuration, run
//! directories, noise sweeps, the filter demo and op-count reports.
//!
//! # Config file grammar
//!
//! One `key = value` pair per line. Blank lines and anything after `#` are
//! ignored. Keys may appear at most once; unknown keys are errors.
//!
//! | key        | value                                  | default      |
//! |------------|----------------------------------------|--------------|
//! | dataset    | `mnist` or `cifar10`                   | `mnist`      |
//! | arch       | `conv-conv`, `minps-maxps`, `minpmax-maxpmin`, `minps-conv` | `conv-conv` |
//! | epochs     | positive integer                       | 10           |
//! | batch      | positive integer                       | 64           |
//! | lr         | positive float                         | 0.01         |
//! | momentum   | float in `[0, 1)`                      | 0.9          |
//! | seed       | unsigned integer                       | 1            |
//! | data_dir   | path                                   | `data`       |
//! | out_dir    | path                                   | `runs`       |
//! | noise      | comma list of `noiseN[:sigma]`         | empty        |
//! | wall_time  | `true` or `false`                      | `true`       |

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, DatasetKind};
use crate::error::{Error, Result};
use crate::layers::{conv_forward, ConvKind, ConvParams, TropicalMode};
use crate::network::{Architecture, Network};
use crate::noise::{NoiseKind, NoiseSpec};
use crate::ops::OpCounter;
use crate::pnm;
use crate::tensor::{PadSpec, Tensor};
use crate::train::{evaluate, train, EpochMetrics, EvalResult, TrainConfig, TrainOutcome};

pub const VERSION: &str = concat!("tcnn ", env!("CARGO_PKG_VERSION"));

/// Git's object id scheme (`blob <len>\0<content>`) with SHA-256.
pub fn content_hash(content: &str) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()));
    h.update(content);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} {} does not exist", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub arch: Architecture,
    pub train: TrainConfig,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub noise: Vec<NoiseSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetKind::Mnist,
            arch: Architecture::ConvConv,
            train: TrainConfig::default(),
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            noise: Vec::new(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("bad value {value:?} for {key}")))
}

impl ExperimentConfig {
    /// Sets one key. Noise specs always use the run seed, whichever of
    /// `seed` and `noise` is set first.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = value.parse()?,
            "arch" => self.arch = value.parse()?,
            "epochs" => self.train.epochs = parse_num(key, value)?,
            "batch" => self.train.batch_size = parse_num(key, value)?,
            "lr" => self.train.lr = parse_num(key, value)?,
            "momentum" => self.train.momentum = parse_num(key, value)?,
            "seed" => {
                self.train.seed = parse_num(key, value)?;
                for spec in &mut self.noise {
                    spec.seed = self.train.seed;
                }
            }
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "noise" => {
                self.noise = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| NoiseSpec::parse(s, self.train.seed))
                    .collect::<Result<_>>()?
            }
            "wall_time" => self.train.record_wall_time = parse_num(key, value)?,
            _ => return Err(Error::invalid(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a config file's text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("config line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::invalid(format!("config line {}: duplicate key {key:?}", n + 1)));
            }
            self.set(key, value.trim())
                .map_err(|e| Error::invalid(format!("config line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Fully resolved config in the file grammar; parsing it back gives an
    /// equal config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let noise: Vec<String> = self.noise.iter().map(NoiseSpec::label).collect();
        format!(
            "dataset = {}\narch = {}\nepochs = {}\nbatch = {}\nlr = {}\nmomentum = {}\nseed = {}\n\
             data_dir = {}\nout_dir = {}\nnoise = {}\nwall_time = {}\n",
            self.dataset,
            self.arch,
            t.epochs,
            t.batch_size,
            t.lr,
            t.momentum,
            t.seed,
            self.data_dir.display(),
            self.out_dir.display(),
            noise.join(","),
            t.record_wall_time
        )
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(run_name(self.dataset, self.arch, self.train.seed))
    }
}

pub fn run_name(dataset: DatasetKind, arch: Architecture, seed: u64) -> String {
    format!("{dataset}-{arch}-seed{seed}")
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub run_dir: PathBuf,
    pub outcome: TrainOutcome,
    /// Accuracy of the best checkpoint under each configured noise spec.
    pub noise: Vec<(NoiseSpec, EvalResult)>,
}

/// Trains on already-loaded data and writes `metrics.csv`, `best.ckpt` and
/// `manifest.txt` into [`ExperimentConfig::run_dir`].
pub fn train_on(
    cfg: &ExperimentConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainReport> {
    let net = Network::build(cfg.arch, cfg.dataset.image_dims(), &mut cfg.train.init_rng())?;
    let outcome = train(net, train_set, test_set, &cfg.train, on_epoch)?;
    let noise = cfg
        .noise
        .iter()
        .map(|spec| Ok((*spec, evaluate(&outcome.best_network, test_set, Some(spec))?)))
        .collect::<Result<Vec<_>>>()?;

    let run_dir = cfg.run_dir();
    create_dir(&run_dir)?;
    write_file(&run_dir.join("metrics.csv"), outcome.metrics.to_csv())?;
    Checkpoint {
        network: outcome.best_network.clone(),
        seed: cfg.train.seed,
        epoch: outcome.best_epoch,
        accuracy: outcome.best_accuracy,
    }
    .save(&run_dir.join("best.ckpt"))?;

    let mut manifest = format!(
        "# tcnn run manifest\nversion = {VERSION}\nversion_hash = {}\n",
        content_hash(VERSION)
    );
    manifest.push_str(&cfg.to_text());
    let final_test = outcome.metrics.rows.last().map_or(0.0, |r| r.accuracy);
    let _ = write!(
        manifest,
        "params = {}\nbest_epoch = {}\nbest_test_accuracy = {:.6}\nfinal_test_accuracy = {:.6}\n",
        outcome.best_network.param_count(),
        outcome.best_epoch,
        outcome.best_accuracy,
        final_test
    );
    for (name, ops) in outcome.best_network.layer_names().iter().zip(&outcome.metrics.layer_ops) {
        let _ = writeln!(manifest, "ops[{name}] = {ops}");
    }
    for (spec, r) in &noise {
        let _ = writeln!(manifest, "noise_accuracy[{}] = {:.6}", spec.label(), r.accuracy());
    }
    write_file(&run_dir.join("manifest.txt"), manifest)?;
    Ok(TrainReport { run_dir, outcome, noise })
}

/// Loads the configured dataset, then [`train_on`].
pub fn cmd_train(cfg: &ExperimentConfig, on_epoch: impl FnMut(&EpochMetrics)) -> Result<TrainReport> {
    cfg.train.validate()?;
    require_dir(&cfg.data_dir, "data directory")?;
    let (train_set, test_set) = cfg.dataset.load(&cfg.data_dir)?;
    train_on(cfg, &train_set, &test_set, on_epoch)
}

/// Loads a checkpoint and checks it against `dataset` when one is given.
pub fn load_checkpoint_for(path: &Path, dataset: Option<DatasetKind>) -> Result<(Checkpoint, DatasetKind)> {
    let ck = Checkpoint::load(path)?;
    let kind = DatasetKind::for_dims(ck.network.input_dims())?;
    if let Some(d) = dataset {
        if d != kind {
            return Err(Error::invalid(format!(
                "{} holds a {} network for {kind} but dataset {d} was requested",
                path.display(),
                ck.network.arch()
            )));
        }
    }
    Ok((ck, kind))
}

/// Clean accuracy followed by one result per noise spec.
pub fn evaluate_all(net: &Network, test: &Dataset, noise: &[NoiseSpec]) -> Result<Vec<(Option<NoiseSpec>, EvalResult)>> {
    let mut out = vec![(None, evaluate(net, test, None)?)];
    for spec in noise {
        out.push((Some(*spec), evaluate(net, test, Some(spec))?));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRow {
    pub arch: Architecture,
    pub clean: EvalResult,
    /// Delta of the zero-strength control, in percentage points.
    pub control: f64,
    /// Deltas (noisy − clean) in percentage points, one per spec.
    pub deltas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseTable {
    pub dataset: DatasetKind,
    pub seed: u64,
    pub specs: Vec<NoiseSpec>,
    pub rows: Vec<NoiseRow>,
}

fn delta_points(noisy: &EvalResult, clean: &EvalResult) -> f64 {
    (noisy.correct as f64 - clean.correct as f64) * 100.0 / clean.total as f64
}

fn pct(v: f64) -> String {
    // avoid printing "-0.00%"
    let v = if v.abs() < 0.005 { 0.0 } else { v };
    format!("{v:.2}%")
}

pub fn noise_sweep(nets: &[Network], test: &Dataset, specs: &[NoiseSpec], seed: u64) -> Result<NoiseTable> {
    let dataset = DatasetKind::for_dims(test.image_dims())?;
    let control = NoiseSpec::new(NoiseKind::Noise1, seed).with_sigma(0.0);
    let mut rows = Vec::with_capacity(nets.len());
    for net in nets {
        let clean = evaluate(net, test, None)?;
        let control = delta_points(&evaluate(net, test, Some(&control))?, &clean);
        let deltas = specs
            .iter()
            .map(|spec| Ok(delta_points(&evaluate(net, test, Some(spec))?, &clean)))
            .collect::<Result<Vec<_>>>()?;
        rows.push(NoiseRow {
            arch: net.arch(),
            clean,
            control,
            deltas,
        });
    }
    Ok(NoiseTable {
        dataset,
        seed,
        specs: specs.to_vec(),
        rows,
    })
}

impl NoiseTable {
    /// `arch,clean_accuracy,control,<spec>...`; deltas in percentage points.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("arch,clean_accuracy,control");
        for s in &self.specs {
            out.push(',');
            out.push_str(&s.label());
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{:.2},{:.2}", r.arch, r.clean.accuracy() * 100.0, r.control);
            for d in &r.deltas {
                let _ = write!(out, ",{d:.2}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut header = vec!["Architecture".to_string(), "Clean".into(), "Control".into()];
        header.extend(self.specs.iter().map(|s| {
            let mut l = s.label();
            l[..1].make_ascii_uppercase();
            l
        }));
        let mut cells: Vec<Vec<String>> = vec![header];
        for r in &self.rows {
            let mut row = vec![r.arch.structure().to_string(), pct(r.clean.accuracy() * 100.0), pct(r.control)];
            row.extend(r.deltas.iter().map(|&d| pct(d)));
            cells.push(row);
        }
        let widths: Vec<usize> =
            (0..cells[0].len()).map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        let mut out = format!(
            "Accuracy change under test-time noise ({}, {} test images, seed {})\n",
            self.dataset,
            self.rows.first().map_or(0, |r| r.clean.total),
            self.seed
        );
        for row in &cells {
            let line: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

/// Runs the sweep over the given checkpoints, or over
/// `<out_dir>/<dataset>-<arch>-seed<seed>/best.ckpt` for all four
/// architectures when `checkpoints` is empty. Writes
/// `noise-sweep-<dataset>-seed<seed>.{csv,txt}` into `out_dir`.
pub fn cmd_noise_sweep(
    dataset: DatasetKind,
    data_dir: &Path,
    out_dir: &Path,
    checkpoints: &[PathBuf],
    specs: &[NoiseSpec],
    seed: u64,
) -> Result<NoiseTable> {
    let paths: Vec<PathBuf> = if checkpoints.is_empty() {
        Architecture::ALL
            .iter()
            .map(|&a| out_dir.join(run_name(dataset, a, seed)).join("best.ckpt"))
            .collect()
    } else {
        checkpoints.to_vec()
    };
    for p in &paths {
        if !p.is_file() {
            return Err(Error::invalid(format!("missing checkpoint {}", p.display())));
        }
    }
    let nets = paths
        .iter()
        .map(|p| load_checkpoint_for(p, Some(dataset)).map(|(ck, _)| ck.network))
        .collect::<Result<Vec<_>>>()?;
    require_dir(data_dir, "data directory")?;
    let (_, test) = dataset.load(data_dir)?;
    let table = noise_sweep(&nets, &test, specs, seed)?;
    create_dir(out_dir)?;
    let stem = format!("noise-sweep-{dataset}-seed{seed}");
    write_file(&out_dir.join(format!("{stem}.csv")), table.to_csv())?;
    write_file(&out_dir.join(format!("{stem}.txt")), table.to_text())?;
    Ok(table)
}

pub const FILTER_MODES: [TropicalMode; 2] = [TropicalMode::MIN_P_S, TropicalMode::MAX_P_S];
pub const DEFAULT_FILTER_SCALES: [f64; 4] = [1.0, 0.5, 0.2, 0.1];

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    pub mode: TropicalMode,
    pub channel: usize,
    pub scale: f64,
    /// `[H', W', 1]` response of one output channel.
    pub image: Tensor,
}

/// Kernel bank `[k, k, c_in, scales.len()]` with entries uniform on
/// `[-1, 1]` times the scale of their output channel.
pub fn filter_bank(k: usize, c_in: usize, scales: &[f64], seed: u64) -> Result<Tensor> {
    if scales.is_empty() {
        return Err(Error::invalid("at least one scale is needed"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c_out = scales.len();
    Tensor::from_fn([k, k, c_in, c_out], |i| rng.random_range(-1.0..=1.0) * scales[i % c_out])
}

/// MinP-S and MaxP-S responses of `img` to one random kernel bank.
pub fn filter_demo(img: &Tensor, k: usize, scales: &[f64], seed: u64) -> Result<Vec<FilterOutput>> {
    let [h, w, c] = img.hwc()?;
    if k == 0 || k > h || k > w {
        return Err(Error::shape(format!("image {h}x{w} is smaller than the {k}x{k} kernel")));
    }
    let params = ConvParams::new(filter_bank(k, c, scales, seed)?, 1, PadSpec::NONE, None)?;
    let mut out = Vec::new();
    for mode in FILTER_MODES {
        let (y, _) = conv_forward(ConvKind::Tropical(mode), img, &params)?;
        let [ho, wo, co] = y.hwc()?;
        for (p, &scale) in scales.iter().enumerate().take(co) {
            let image = Tensor::from_fn([ho, wo, 1], |i| y.data()[i * co + p])?;
            out.push(FilterOutput {
                mode,
                channel: p,
                scale,
                image,
            });
        }
    }
    Ok(out)
}

/// Reads a P6 (or P5) image and writes one rescaled PGM per mode and output
/// channel into `out_dir`. Returns the written paths.
pub fn cmd_filter_demo(image: &Path, out_dir: &Path, k: usize, scales: &[f64], seed: u64) -> Result<Vec<PathBuf>> {
    let img = pnm::read_pnm(image)?;
    let outputs = filter_demo(&img, k, scales, seed)?;
    create_dir(out_dir)?;
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let mut paths = Vec::with_capacity(outputs.len());
    for o in &outputs {
        let name = format!("{stem}-{}-ch{}.pgm", o.mode.name().to_ascii_lowercase(), o.channel);
        let path = out_dir.join(name);
        let comment = format!(
            "{VERSION} filter-demo\nmode={} channel={} scale={} k={k} seed={seed}",
            o.mode, o.channel, o.scale
        );
        pnm::write_rescaled(&o.image, &path, Some(&comment))?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpRow {
    pub layer: String,
    pub closed_form: OpCounter,
    pub instrumented: OpCounter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub arch: Architecture,
    pub dataset: DatasetKind,
    pub rows: Vec<OpRow>,
}

/// Per-layer operation counts of one forward pass: closed form next to the
/// counters recorded while running a seeded random image.
pub fn opcount(arch: Architecture, dataset: DatasetKind, seed: u64) -> Result<OpReport> {
    let dims = dataset.image_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Network::build(arch, dims, &mut rng)?;
    let x = Tensor::from_fn(dims, |_| rng.random_range(0.0..1.0))?;
    let (_, cache) = net.forward(&x)?;
    let rows = net
        .layer_names()
        .into_iter()
        .zip(net.count_ops()?)
        .zip(cache.layer_ops())
        .map(|((layer, closed_form), &instrumented)| OpRow {
            layer,
            closed_form,
            instrumented,
        })
        .collect();
    Ok(OpReport { arch, dataset, rows })
}

impl OpReport {
    pub fn matches(&self) -> bool {
        self.rows.iter().all(|r| r.closed_form == r.instrumented)
    }

    pub fn total(&self) -> (OpCounter, OpCounter) {
        self.rows.iter().fold((OpCounter::ZERO, OpCounter::ZERO), |(a, b), r| {
            (a + r.closed_form, b + r.instrumented)
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} on {} (one forward pass)\n", self.arch.structure(), self.dataset);
        let _ = writeln!(
            out,
            "{:<22} {:>12} {:>12} {:>12}   {:>12} {:>12} {:>12}",
            "layer", "mults", "adds", "comparisons", "mults(live)", "adds(live)", "cmp(live)"
        );
        let (closed, live) = self.total();
        let total = OpRow {
            layer: "total".into(),
            closed_form: closed,
            instrumented: live,
        };
        for r in self.rows.iter().chain([&total]) {
            let _ = writeln!(
                out,
                "{:<22} {:>12} {:>12} {:>12}   {:>12} {:>12} {:>12}{}",
                r.layer,
                r.closed_form.mults,
                r.closed_form.adds,
                r.closed_form.comparisons,
                r.instrumented.mults,
                r.instrumented.adds,
                r.instrumented.comparisons,
                if r.closed_form == r.instrumented { "" } else { "  MISMATCH" }
            );
        }
        out
    }
}
