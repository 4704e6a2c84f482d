//! Subcommands of the `aop3d` binary.

pub mod design;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use aop3d_annoserve::{load_classes, ServeConfig};
use aop3d_core::boengine::{read_trace_file, write_trial, Strategy};
use aop3d_core::instances::{
    extract_instances, feature_rows, read_crops, read_features_csv, write_crops,
    write_features_csv, DEFAULT_MARGIN,
};
use aop3d_core::metrics::{evaluate, IpqWeights, IqMode};
use aop3d_core::postproc::{apply_postprocessing, PostprocParams};
use aop3d_core::segopt::{optimize_segmentation_resume, BenchmarkSet, ScoreOptions, SegOptOptions};
use aop3d_core::semisup::{label_spread, pca_reduce, write_pseudo_labels, SeedFile, SpreadOptions};
use aop3d_core::synthgen::{corrupt_labels, generate_benchmark, CorruptionSpec, SynthConfig};
use aop3d_core::volume::{import_tiff, read_volume, write_volume, LabelVolume};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use design::{optimize_design, DesignSpaceSpec};

/// Marks errors that should exit with the usage status.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Parser, Debug)]
#[command(
    name = "aop3d",
    version,
    about = "Optimize and evaluate 3D instance segmentation pipelines"
)]
#[command(
    after_long_help = "Volumes use the .i3d container. Set AOP3D_THREADS to cap worker threads."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    Synth(SynthArgs),
    Corrupt(CorruptArgs),
    Eval(EvalArgs),
    Postprocess(PostprocessArgs),
    OptimizeSeg(OptimizeSegArgs),
    Extract(ExtractArgs),
    Features(FeaturesArgs),
    LabelSpread(LabelSpreadArgs),
    Annotate(AnnotateArgs),
    OptimizeDesign(OptimizeDesignArgs),
    ImportTiff(ImportTiffArgs),
}

/// Generate a synthetic intensity volume and its ground-truth labels.
#[derive(Args, Debug)]
#[command(
    after_long_help = "CONFIG (JSON): {\"shape\":[z,y,x], \"spacing\":[dz,dy,dx], \"count\":n, \
\"radius\":[min,max], \"axis_ratio\":[min,max], \"min_gap\":voxels, \"margin\":voxels, \
\"intensity\":{\"base\":..,\"background\":..,\"noise_sigma\":..,\"blur_sigma\":..}}. \
spacing, margin and intensity are optional; --seed replaces any seed in the file."
)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Intensity volume (.i3d).
    #[arg(long)]
    pub out_image: PathBuf,
    /// Label volume (.i3d).
    #[arg(long)]
    pub out_labels: PathBuf,
}

/// Apply a sequence of corruption operators to a label volume.
#[derive(Args, Debug)]
#[command(
    after_long_help = "SPEC (JSON): {\"ops\":[{\"op\":\"dilate\",\"radius\":2}, \
{\"op\":\"erode\",\"radius\":1}, {\"op\":\"split_plane\",\"fraction\":0.5,\"axis\":\"z\"}, \
{\"op\":\"merge_adjacent\",\"probability\":0.3}, {\"op\":\"hallucinate\",\"count\":3,\"radius\":2}, \
{\"op\":\"drop\",\"probability\":0.1}]}. Operators run in order; --seed replaces any seed in the file."
)]
pub struct CorruptArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Copy)]
pub struct ScoreArgs {
    /// IoU threshold for a true positive.
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    #[arg(long, default_value_t = 1.0)]
    pub k1: f64,
    #[arg(long, default_value_t = 1.0)]
    pub k2: f64,
    #[arg(long, default_value_t = 1.0)]
    pub k3: f64,
    #[arg(long, value_enum, default_value_t = IqModeArg::MatchedPredictions)]
    pub iq_mode: IqModeArg,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum IqModeArg {
    MatchedPredictions,
    PerAnnotation,
}

impl From<IqModeArg> for IqMode {
    fn from(m: IqModeArg) -> Self {
        match m {
            IqModeArg::MatchedPredictions => IqMode::MatchedPredictions,
            IqModeArg::PerAnnotation => IqMode::PerAnnotation,
        }
    }
}

impl ScoreArgs {
    fn options(&self) -> anyhow::Result<ScoreOptions> {
        Ok(ScoreOptions {
            k: IpqWeights::new(self.k1, self.k2, self.k3)?,
            tau: self.tau,
            iq_mode: self.iq_mode.into(),
        })
    }
}

/// Score a predicted label volume against ground truth; JSON on stdout.
#[derive(Args, Debug)]
#[command(
    after_long_help = "Output: {\"sq\",\"rq\",\"iq\",\"ipq\",\"pq\",\"counts\":{\"tp\",\"fp\",\"fn\",\"g\",\"p\"},\"iq_mode\"}. \
PQ is computed at max(tau, 0.5)."
)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[command(flatten)]
    pub score: ScoreArgs,
}

/// Apply morphology, merging and splitting to a label volume.
#[derive(Args, Debug)]
#[command(
    after_long_help = "PARAMS (JSON): {\"theta_ed\":int[-10,10], \"theta_co\":int[-5,5], \
\"theta_mc\",\"theta_ms\",\"theta_mr\",\"theta_ssigma\",\"theta_st\": real[0,1]}; missing fields are 0."
)]
pub struct PostprocessArgs {
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum StrategyArg {
    Bayes,
    Random,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Bayes => Strategy::Bayes,
            StrategyArg::Random => Strategy::Random,
        }
    }
}

/// Jointly choose the segmentation model and postprocessing parameters.
#[derive(Args, Debug)]
#[command(
    after_long_help = "BENCH (JSON): {\"images\":[{\"id\":\"img1\",\"gt\":\"gt1.i3d\"}], \
\"models\":{\"unet\":{\"img1\":\"unet/img1.i3d\"}}}; relative paths resolve against the manifest directory. \
The result JSON (best model, parameters, scores, baseline, trace) goes to --out or stdout. \
Trials are appended to --trace as JSON lines; --resume continues an interrupted trace."
)]
pub struct OptimizeSegArgs {
    #[arg(long)]
    pub bench: PathBuf,
    #[arg(long, default_value_t = 120)]
    pub budget: usize,
    #[arg(long, value_enum, default_value_t = StrategyArg::Bayes)]
    pub strategy: StrategyArg,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value = "trace.jsonl")]
    pub trace: PathBuf,
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub score: ScoreArgs,
}

/// Cut every instance of a segmentation into its own crop.
#[derive(Args, Debug)]
#[command(
    after_long_help = "Writes <out>/crops/<image-id>/<instance>/{intensity.i3d, mask.i3d, meta.json}. \
meta.json holds the clipped box, the tight box, the margin and the source shape."
)]
pub struct ExtractArgs {
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub image_id: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MARGIN)]
    pub margin: usize,
}

/// Compute geometric feature vectors for extracted crops.
#[derive(Args, Debug)]
#[command(
    after_long_help = "Output CSV columns: key (<image>/<id>), volume, surface_faces, extent_z, extent_y, \
extent_x, axis_major, axis_middle, axis_minor, elongation, sphericity, centroid_z, centroid_y, centroid_x, \
intensity_mean, intensity_std."
)]
pub struct FeaturesArgs {
    /// Directory containing crops/.
    #[arg(long)]
    pub crops: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Assign pseudo-labels to all instances from operator seeds.
#[derive(Args, Debug)]
#[command(
    after_long_help = "SEEDS (JSON): {\"labels\":{\"<image>/<id>\": class}}. Class ids run 0..C and every \
class needs a seed. Output CSV columns: key, label, confidence, seeded, unreachable. A summary goes to stderr."
)]
pub struct LabelSpreadArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub seeds: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Share of variance the PCA projection keeps.
    #[arg(long, default_value_t = 0.95)]
    pub variance: f64,
    #[arg(long, default_value_t = 0.99)]
    pub alpha: f64,
    /// RBF width; defaults to 1 / (2 median²) of pairwise distances.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, default_value_t = 10_000)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
}

/// Serve crops to an operator for labeling.
#[derive(Args, Debug)]
#[command(
    after_long_help = "CLASSES (JSON): [\"Schwann\",\"Myotube\",...] or [{\"id\":0,\"name\":..,\"hotkey\":\"1\"}]. \
Labels are appended to --labels-out as JSON lines and replayed on restart. \
API: GET /api/classes, /api/next, /api/progress, /api/seeds, /api/instances/{img}/{id}, \
/api/instances/{img}/{id}/slice/{z}?mode=raw|mask-overlay|distance&sigma=1; POST /api/instances/{img}/{id}/label {\"class\":n}. \
With --export-seeds the label log is converted to a seeds file and the command exits."
)]
pub struct AnnotateArgs {
    /// Directory containing crops/.
    #[arg(long)]
    pub crops: PathBuf,
    #[arg(long)]
    pub classes: PathBuf,
    #[arg(long)]
    pub labels_out: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    /// Built UI served at `/`.
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
    #[arg(long)]
    pub export_seeds: Option<PathBuf>,
}

/// Optimize a discrete design space against an external command.
#[derive(Args, Debug)]
#[command(
    after_long_help = "SPACE (JSON): {\"dims\":[{\"name\":\"head\",\"choices\":[\"slice\",\"volume\"]}, ...], \
\"command\":\"python train.py {config}\"}. {config} is replaced by the path of a JSON file holding the trial \
configuration; the command must print {\"objective\": number} as its last stdout line. \
Exit status 1 when every trial fails."
)]
pub struct OptimizeDesignArgs {
    #[arg(long)]
    pub space: PathBuf,
    /// Overrides the command in the space file.
    #[arg(long)]
    pub command: Option<String>,
    #[arg(long)]
    pub budget: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value = "design-trace.jsonl")]
    pub trace: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Convert an uncompressed baseline multi-page grayscale TIFF to .i3d.
#[derive(Args, Debug)]
pub struct ImportTiffArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json_to<T: Serialize>(value: &T, path: Option<&Path>) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => {
            std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))
        }
        None => {
            let mut out = std::io::stdout().lock();
            writeln!(out, "{text}")?;
            Ok(())
        }
    }
}

fn read_labels(path: &Path) -> anyhow::Result<LabelVolume> {
    read_volume(path)?.into_labels().with_context(|| path.display().to_string())
}

/// Caps rayon's global pool from `AOP3D_THREADS`.
pub fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("AOP3D_THREADS") {
        let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            UsageError(format!(
                "AOP3D_THREADS must be a positive integer, got `{v}`"
            ))
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Cmd::Synth(a) => {
            let mut cfg: SynthConfig = read_json(&a.config)?;
            cfg.seed = a.seed;
            let (img, labels) = generate_benchmark(&cfg)?;
            write_volume(&img.into(), &a.out_image)?;
            eprintln!("{} instances", labels.instance_count());
            write_volume(&labels.into(), &a.out_labels)?;
        }
        Cmd::Corrupt(a) => {
            let mut spec: CorruptionSpec = read_json(&a.spec)?;
            spec.seed = a.seed;
            let out = corrupt_labels(&read_labels(&a.gt)?, &spec)?;
            write_volume(&out.into(), &a.out)?;
        }
        Cmd::Eval(a) => {
            let (pred, gt) = (read_labels(&a.pred)?, read_labels(&a.gt)?);
            let s = a.score.options()?;
            write_json_to(&evaluate(&pred, &gt, s.tau, s.k, s.iq_mode)?, None)?;
        }
        Cmd::Postprocess(a) => {
            let params: PostprocParams = read_json(&a.params)?;
            let out = apply_postprocessing(&read_labels(&a.labels)?, &params)?;
            eprintln!("{} instances", out.instance_count());
            write_volume(&out.into(), &a.out)?;
        }
        Cmd::OptimizeSeg(a) => optimize_seg(a)?,
        Cmd::Extract(a) => {
            let labels = read_labels(&a.labels)?;
            let image = read_volume(&a.image)?.into_intensity()?;
            let crops = extract_instances(&a.image_id, &labels, &image, a.margin)?;
            write_crops(&a.out, &crops)?;
            eprintln!("{} crops", crops.len());
        }
        Cmd::Features(a) => {
            let rows = feature_rows(&read_crops(&a.crops)?)?;
            let f =
                File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
            write_features_csv(BufWriter::new(f), &rows)?;
        }
        Cmd::LabelSpread(a) => label_spread_cmd(a)?,
        Cmd::Annotate(a) => annotate(a)?,
        Cmd::OptimizeDesign(a) => {
            let spec: DesignSpaceSpec = read_json(&a.space)?;
            let Some(command) = a.command.or_else(|| spec.command.clone()) else {
                return Err(UsageError(
                    "no command: pass --command or set \"command\" in the space file".into(),
                )
                .into());
            };
            let trace = optimize_design(&spec, &command, a.budget, a.seed, Some(&a.trace))?;
            let failed = trace
                .trials
                .iter()
                .filter(|t| t.objective.is_none())
                .count();
            write_json_to(
                &DesignSummary {
                    best: trace.best.clone(),
                    trials: trace.trials.len(),
                    failed,
                },
                a.out.as_deref(),
            )?;
            if failed == trace.trials.len() {
                bail!("all {failed} trials failed; see {}", a.trace.display());
            }
        }
        Cmd::ImportTiff(a) => write_volume(&import_tiff(&a.input)?.into(), &a.out)?,
    }
    Ok(())
}

#[derive(Serialize)]
struct DesignSummary {
    best: Option<aop3d_core::boengine::Trial>,
    trials: usize,
    failed: usize,
}

fn optimize_seg(a: OptimizeSegArgs) -> anyhow::Result<()> {
    let bench = BenchmarkSet::from_manifest(&a.bench)?.load()?;
    let mut opts = SegOptOptions::new(a.budget, a.strategy.into(), a.seed);
    opts.score = a.score.options()?;
    let prior = if a.resume && a.trace.exists() {
        read_trace_file(&a.trace)?
    } else {
        Vec::new()
    };
    let mut sink = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(a.resume)
        .truncate(!a.resume)
        .open(&a.trace)
        .with_context(|| format!("opening {}", a.trace.display()))?;
    let resumed = prior.len();
    let result = optimize_segmentation_resume(&bench, &opts, prior, |t| {
        if t.iteration >= resumed {
            write_trial(&mut sink, t)?;
        }
        Ok(())
    })?;
    eprintln!(
        "best {} ipq {:.4} (baseline {:.4})",
        result.best_model, result.best_ipq, result.baseline_ipq
    );
    write_json_to(&result, a.out.as_deref())
}

fn label_spread_cmd(a: LabelSpreadArgs) -> anyhow::Result<()> {
    let f = File::open(&a.features).with_context(|| format!("opening {}", a.features.display()))?;
    let (_, rows) = read_features_csv(f)?;
    let seeds: SeedFile = read_json(&a.seeds)?;
    let keys: Vec<String> = rows.iter().map(|r| r.key.clone()).collect();
    let resolved = seeds.resolve(&keys)?;
    let values: Vec<Vec<f64>> = rows.into_iter().map(|r| r.values).collect();
    let reduced = pca_reduce(&values, a.variance)?;
    let opts = SpreadOptions {
        alpha: a.alpha,
        gamma: a.gamma,
        max_iter: a.max_iter,
        tol: a.tol,
    };
    let result = label_spread(&reduced.data, &resolved, seeds.class_count(), &opts)?;
    let out = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_pseudo_labels(BufWriter::new(out), &keys, &resolved, &result)?;
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in &result.labels {
        *counts.entry(l).or_default() += 1;
    }
    eprintln!(
        "{} components ({:.3} variance), gamma {:.4e}, {} iterations{}, classes {:?}, {} unreachable",
        reduced.data.ncols(),
        reduced.retained,
        result.gamma,
        result.iterations,
        if result.converged { "" } else { " (not converged)" },
        counts,
        result.unreachable.iter().filter(|&&u| u).count()
    );
    Ok(())
}

fn annotate(a: AnnotateArgs) -> anyhow::Result<()> {
    let classes = load_classes(&a.classes)?;
    if let Some(out) = &a.export_seeds {
        let session = aop3d_annoserve::Session::open(&a.crops, classes, &a.labels_out)?;
        let rt = tokio::runtime::Builder::new_current_thread().build()?;
        let seeds = rt.block_on(session.seeds());
        return write_json_to(&seeds, Some(out));
    }
    let cfg = ServeConfig {
        addr: SocketAddr::new(a.host, a.port),
        crops_root: a.crops,
        classes,
        labels_out: a.labels_out,
        static_dir: a.static_dir,
    };
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    eprintln!("serving on http://{}", cfg.addr);
    rt.block_on(aop3d_annoserve::serve(cfg))?;
    Ok(())
}
