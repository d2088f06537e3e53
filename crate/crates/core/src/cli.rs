//! Command-line entry point.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::baselines::{build_method, Method, MethodId};
use crate::config::{RunConfig, CONFIG_FILE};
use crate::datagen::{generate, load_manifest, split, write_dataset, ImageSample};
use crate::metrics::{binarize, kde, kde_csv, read_scores_csv, BinaryMask, LocalizationReport};
use crate::model::ModelParams;
use crate::pgm::Gray8;
use crate::train::select_checkpoint;

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "INFOMASK_OUTPUT_ROOT";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const SELECTION_FILE: &str = "selection.txt";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Parser)]
#[command(name = "infomask", version, about = "Masked variational latent attention for weakly supervised localization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// `key=value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key (repeatable); applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Master seed; overrides both file and `--set`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default: `$INFOMASK_OUTPUT_ROOT/<command>`, or `runs/<command>`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset: PGM images plus train/val/test manifests.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one method; writes per-epoch checkpoints, logs and the selected checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory holding train.csv and val.csv.
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate a training run on a split; writes per-image scores, KDE curves and a summary.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Output directory of a `train` run.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Write per-image mask and overlay PGMs for a split.
    Localize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train and evaluate every configured method; writes one report per method and a summary table.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// KDE curves from per-image score CSVs.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        scores: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Localize { .. } => "localize",
            Command::Compare { .. } => "compare",
            Command::Report { .. } => "report",
        }
    }
}

fn output_dir(explicit: Option<&Path>, command: &str) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(command),
    }
}

fn prepare_out(common: &Common, command: &str, base: Option<&Path>) -> Result<(RunConfig, PathBuf)> {
    let cfg = match base {
        // a run directory's resolved config is the starting point; file and flags still apply on top
        Some(run) => {
            let mut cfg = read_run_config(run)?;
            if let Some(path) = &common.config {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                cfg.apply_text(&text)?;
            }
            for o in &common.overrides {
                let (k, v) = o.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got '{o}'"))?;
                cfg.set(k.trim(), v)?;
            }
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            cfg
        }
        None => RunConfig::resolve(common.config.as_deref(), &common.overrides, common.seed)?,
    };
    let out = output_dir(common.out.as_deref(), command);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join(CONFIG_FILE), cfg.to_kv())?;
    Ok((cfg, out))
}

fn read_run_config(run: &Path) -> Result<RunConfig> {
    let path = run.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = RunConfig::default();
    cfg.apply_text(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(cfg)
}

fn load_split(data: &Path, name: &str) -> Result<Vec<ImageSample>> {
    let path = data.join(format!("{name}.csv"));
    let samples = load_manifest(&path).with_context(|| format!("loading {}", path.display()))?;
    if samples.is_empty() {
        bail!("{} has no samples", path.display());
    }
    Ok(samples)
}

fn method_for(cfg: &RunConfig, id: MethodId) -> Result<Method> {
    Ok(build_method(cfg.method_spec(id)?, &cfg.base_train_config()?)?)
}

/// Selected checkpoint of a finished run.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub epoch: usize,
    pub threshold: f64,
    pub val_accuracy: f64,
    pub val_iop: f64,
}

impl Selection {
    fn to_kv(&self) -> String {
        format!(
            "epoch={}\nthreshold={}\nval_accuracy={}\nval_iop={}\n",
            self.epoch, self.threshold, self.val_accuracy, self.val_iop
        )
    }

    fn read(run: &Path) -> Result<Self> {
        let path = run.join(SELECTION_FILE);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let get = |key: &str| -> Result<String> {
            text.lines()
                .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .map(str::to_string)
                .with_context(|| format!("{}: missing key '{key}'", path.display()))
        };
        Ok(Self {
            epoch: get("epoch")?.parse()?,
            threshold: get("threshold")?.parse()?,
            val_accuracy: get("val_accuracy")?.parse()?,
            val_iop: get("val_iop")?.parse()?,
        })
    }
}

/// Trains `method` and writes checkpoints, logs, the selected checkpoint and
/// the selection record into `out`.
pub fn train_into(method: &Method, train: &[ImageSample], val: &[ImageSample], out: &Path) -> Result<Selection> {
    let outcome = method.train(train, val, Some(out))?;
    std::fs::write(out.join("train_log.csv"), outcome.log.steps_csv())?;
    std::fs::write(out.join("epoch_log.csv"), outcome.log.epochs_csv())?;
    if let Some(msg) = &outcome.diverged {
        let kept = outcome.checkpoints.last().map_or("none".to_string(), |c| format!("ckpt_{}", c.epoch));
        bail!("training diverged at {msg}; last finite checkpoint: {kept}");
    }
    let n = method.config().n_checkpoints.min(outcome.checkpoints.len());
    let best = select_checkpoint(&outcome.checkpoints, n)?;
    let threshold = best.threshold.with_context(|| {
        format!(
            "no validation threshold produced a non-empty mask within the FNR cap for epoch {}; inspect the masks",
            best.epoch
        )
    })?;
    best.params.save(&out.join(BEST_CHECKPOINT))?;
    let sel = Selection { epoch: best.epoch, threshold, val_accuracy: best.val_accuracy, val_iop: best.val_iop };
    std::fs::write(out.join(SELECTION_FILE), sel.to_kv())?;
    Ok(sel)
}

/// Writes the per-image scores, KDE curves and one-row summary of `report`.
pub fn write_report(report: &LocalizationReport, method: &str, out: &Path) -> Result<()> {
    std::fs::write(out.join("scores.csv"), report.per_image_csv())?;
    std::fs::write(out.join("kde.csv"), report.kde_csv())?;
    std::fs::write(out.join(SUMMARY_FILE), LocalizationReport::summary_table([(method, report)]))?;
    Ok(())
}

/// Pixels of `mask` with a 4-neighbour outside it (or on the image edge).
pub fn mask_boundary(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let (w, h) = (mask.width(), mask.height());
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let edge = x == 0 || y == 0 || x + 1 == w || y + 1 == h;
            if edge || !mask.get(x - 1, y) || !mask.get(x + 1, y) || !mask.get(x, y - 1) || !mask.get(x, y + 1) {
                out.push((x, y));
            }
        }
    }
    out
}

pub const OVERLAY_BOX: u8 = 255;
pub const OVERLAY_MASK: u8 = 200;

/// Grayscale copy of the image with the mask boundary (200) and the box border (255) burned in.
pub fn overlay(sample: &ImageSample, mask: &BinaryMask) -> Gray8 {
    let (w, h) = (sample.width(), sample.height());
    let mut img = Gray8::from_unit(w, h, sample.pixels());
    for (x, y) in mask_boundary(mask) {
        img.set(x, y, OVERLAY_MASK);
    }
    if let Some(b) = sample.bbox {
        for x in b.x0..=b.x1 {
            img.set(x, b.y0, OVERLAY_BOX);
            img.set(x, b.y1, OVERLAY_BOX);
        }
        for y in b.y0..=b.y1 {
            img.set(b.x0, y, OVERLAY_BOX);
            img.set(b.x1, y, OVERLAY_BOX);
        }
    }
    img
}

fn run_gen_data(common: &Common) -> Result<()> {
    let (cfg, out) = prepare_out(common, "gen-data", None)?;
    let total: usize = cfg.splits.iter().sum();
    if cfg.splits.contains(&0) {
        bail!("n_train, n_val and n_test must all be positive");
    }
    let samples = generate(total, &cfg.synth_config())?;
    let fractions = cfg.splits.map(|n| n as f64 / total as f64);
    let parts = split(&samples, fractions, cfg.seed)?;
    for (name, part) in SPLITS.iter().zip(&parts) {
        write_dataset(&out, &format!("{name}.csv"), &format!("{name}_"), part)?;
    }
    println!("wrote {total} images to {}", out.display());
    Ok(())
}

fn run_train(common: &Common, data: &Path) -> Result<()> {
    let (cfg, out) = prepare_out(common, "train", None)?;
    let method = method_for(&cfg, cfg.method)?;
    let train = load_split(data, "train")?;
    let val = load_split(data, "val")?;
    let sel = train_into(&method, &train, &val, &out)?;
    println!(
        "{}: selected epoch {} (val acc {:.4}, val IoP {:.4}, threshold {})",
        cfg.method, sel.epoch, sel.val_accuracy, sel.val_iop, sel.threshold
    );
    Ok(())
}

fn load_run(common: &Common, command: &str, run: &Path) -> Result<(RunConfig, PathBuf, Method, ModelParams, Selection)> {
    let (cfg, out) = prepare_out(common, command, Some(run))?;
    let method = method_for(&cfg, cfg.method)?;
    let params = ModelParams::load(&run.join(BEST_CHECKPOINT))?;
    let sel = Selection::read(run)?;
    Ok((cfg, out, method, params, sel))
}

fn run_eval(common: &Common, run: &Path, data: &Path, split_name: &str) -> Result<()> {
    let (cfg, out, method, params, sel) = load_run(common, "eval", run)?;
    let samples = load_split(data, split_name)?;
    let report = method.evaluate(&params, sel.threshold, &samples)?;
    write_report(&report, cfg.method.as_str(), &out)?;
    print!("{}", LocalizationReport::summary_table([(cfg.method.as_str(), &report)]));
    Ok(())
}

fn run_localize(common: &Common, run: &Path, data: &Path, split_name: &str) -> Result<()> {
    let (_, out, method, params, sel) = load_run(common, "localize", run)?;
    let samples = load_split(data, split_name)?;
    let inf = method.localize(&params, &samples)?;
    let (masks, overlays) = (out.join("masks"), out.join("overlays"));
    std::fs::create_dir_all(&masks)?;
    std::fs::create_dir_all(&overlays)?;
    for (i, (s, map)) in samples.iter().zip(&inf.maps).enumerate() {
        let (w, h) = (s.width(), s.height());
        std::fs::write(masks.join(format!("{i:05}_mask.pgm")), Gray8::from_unit(w, h, map).encode())?;
        let bin = binarize(map, w, h, sel.threshold);
        std::fs::write(overlays.join(format!("{i:05}_overlay.pgm")), overlay(s, &bin).encode())?;
    }
    println!("wrote {} masks and overlays to {}", samples.len(), out.display());
    Ok(())
}

fn run_compare(common: &Common, data: &Path) -> Result<()> {
    let (cfg, out) = prepare_out(common, "compare", None)?;
    if cfg.methods.is_empty() {
        bail!("config key 'methods' lists no methods");
    }
    let train = load_split(data, "train")?;
    let val = load_split(data, "val")?;
    let test = load_split(data, "test")?;
    let mut reports = Vec::new();
    for &id in &cfg.methods {
        let method = method_for(&cfg, id)?;
        let dir = out.join(id.as_str());
        std::fs::create_dir_all(&dir)?;
        let mut method_cfg = cfg.clone();
        method_cfg.method = id;
        std::fs::write(dir.join(CONFIG_FILE), method_cfg.to_kv())?;
        let sel = train_into(&method, &train, &val, &dir).with_context(|| format!("method {id}"))?;
        let params = ModelParams::load(&dir.join(BEST_CHECKPOINT))?;
        let report = method.evaluate(&params, sel.threshold, &test)?;
        write_report(&report, id.as_str(), &dir)?;
        reports.push((id, report));
    }
    let table = LocalizationReport::summary_table(reports.iter().map(|(id, r)| (id.as_str(), r)));
    std::fs::write(out.join(SUMMARY_FILE), &table)?;
    print!("{table}");
    Ok(())
}

fn run_report(scores: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let out = output_dir(out, "report");
    std::fs::create_dir_all(&out)?;
    for path in scores {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let columns = read_scores_csv(&text).with_context(|| format!("parsing {}", path.display()))?;
        let curves = columns
            .into_iter()
            .filter(|(_, v)| v.len() >= 2)
            .map(|(name, v)| Ok((name, kde(&v, None)?)))
            .collect::<Result<Vec<_>>>()?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("scores");
        let parent = path.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str());
        let name = match parent {
            Some(p) if !p.is_empty() => format!("{p}_{stem}_kde.csv"),
            _ => format!("{stem}_kde.csv"),
        };
        std::fs::write(out.join(&name), kde_csv(&curves))?;
        println!("wrote {}", out.join(name).display());
    }
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    log::debug!("running {}", cli.command.name());
    match &cli.command {
        Command::GenData { common } => run_gen_data(common),
        Command::Train { common, data } => run_train(common, data),
        Command::Eval { common, run, data, split } => run_eval(common, run, data, split),
        Command::Localize { common, run, data, split } => run_localize(common, run, data, split),
        Command::Compare { common, data } => run_compare(common, data),
        Command::Report { scores, out } => run_report(scores, out.as_deref()),
    }
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns the process exit status; failures print one diagnostic line.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            1
        }
    }
}
