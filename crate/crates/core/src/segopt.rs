//! Joint choice of segmentation model and postprocessing parameters,
//! maximizing the mean IPQ over a benchmark set.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boengine::{
    optimize_resume, CategoricalDim, Config, ContinuousDim, IntegerDim, OptimizeOptions,
    ParamValue, SearchSpace, Strategy, Trace, Trial,
};
use crate::error::{Error, Result};
use crate::metrics::{compute_ipq, match_instances, IpqWeights, IqMode, DEFAULT_TAU};
use crate::postproc::{apply_postprocessing, PostprocParams, CO_RANGE, ED_RANGE};
use crate::volume::{read_volume, LabelVolume};

pub const MODEL_DIM: &str = "model";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    pub gt: PathBuf,
}

/// Benchmark manifest: annotations per image and, per model, one
/// prediction per image. Relative paths resolve against the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSet {
    pub images: Vec<ImageEntry>,
    pub models: BTreeMap<String, BTreeMap<String, PathBuf>>,
}

impl BenchmarkSet {
    pub fn from_manifest(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut set: BenchmarkSet = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for img in &mut set.images {
            img.gt = base.join(&img.gt);
        }
        for preds in set.models.values_mut() {
            for p in preds.values_mut() {
                *p = base.join(&*p);
            }
        }
        Ok(set)
    }

    /// Reads every volume once; predictions are then reused across all
    /// evaluations.
    pub fn load(&self) -> Result<LoadedBenchmark> {
        if self.images.is_empty() {
            return Err(Error::Dataset("benchmark has no images".into()));
        }
        if self.models.is_empty() {
            return Err(Error::Dataset("benchmark has no models".into()));
        }
        for (model, preds) in &self.models {
            for img in &self.images {
                if !preds.contains_key(&img.id) {
                    return Err(Error::MissingPrediction {
                        model: model.clone(),
                        image: img.id.clone(),
                    });
                }
            }
        }
        let gts: Vec<LabelVolume> = self
            .images
            .par_iter()
            .map(|img| read_volume(&img.gt)?.into_labels())
            .collect::<Result<_>>()?;
        let mut predictions = BTreeMap::new();
        for (model, preds) in &self.models {
            let vols: Vec<LabelVolume> = self
                .images
                .par_iter()
                .map(|img| read_volume(&preds[&img.id])?.into_labels())
                .collect::<Result<_>>()?;
            predictions.insert(model.clone(), vols);
        }
        LoadedBenchmark::new(
            self.images.iter().map(|i| i.id.clone()).collect(),
            gts,
            predictions,
        )
    }
}

/// A benchmark held in memory.
#[derive(Clone, Debug)]
pub struct LoadedBenchmark {
    image_ids: Vec<String>,
    gts: Vec<LabelVolume>,
    predictions: BTreeMap<String, Vec<LabelVolume>>,
}

impl LoadedBenchmark {
    pub fn new(
        image_ids: Vec<String>,
        gts: Vec<LabelVolume>,
        predictions: BTreeMap<String, Vec<LabelVolume>>,
    ) -> Result<Self> {
        if image_ids.len() != gts.len() || image_ids.is_empty() {
            return Err(Error::Dataset(
                "need one annotation per image id and at least one image".into(),
            ));
        }
        if predictions.is_empty() {
            return Err(Error::Dataset("benchmark has no models".into()));
        }
        for (model, preds) in &predictions {
            if preds.len() != gts.len() {
                let image = image_ids.get(preds.len()).cloned().unwrap_or_default();
                return Err(Error::MissingPrediction {
                    model: model.clone(),
                    image,
                });
            }
            for ((id, gt), pred) in image_ids.iter().zip(&gts).zip(preds) {
                if gt.shape() != pred.shape() {
                    return Err(Error::Dataset(format!(
                        "model {model:?}, image {id:?}: prediction shape {:?} differs from annotation shape {:?}",
                        pred.shape(),
                        gt.shape()
                    )));
                }
            }
        }
        Ok(Self {
            image_ids,
            gts,
            predictions,
        })
    }

    pub fn image_ids(&self) -> &[String] {
        &self.image_ids
    }

    pub fn models(&self) -> impl Iterator<Item = &str> {
        self.predictions.keys().map(String::as_str)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreOptions {
    pub k: IpqWeights,
    pub tau: f64,
    pub iq_mode: IqMode,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            k: IpqWeights::default(),
            tau: DEFAULT_TAU,
            iq_mode: IqMode::default(),
        }
    }
}

/// Mean scores over the benchmark images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigScore {
    pub ipq: f64,
    pub sq: f64,
    pub rq: f64,
    pub iq: f64,
    pub per_image_ipq: Vec<f64>,
}

/// Neumaier-compensated sum in slice order.
fn compensated_sum(values: &[f64]) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for &v in values {
        let t = sum + v;
        c += if sum.abs() >= v.abs() {
            (sum - t) + v
        } else {
            (v - t) + sum
        };
        sum = t;
    }
    sum + c
}

/// Postprocesses every cached prediction of `model` with `params` and
/// averages IPQ and its factors over the images.
pub fn evaluate_config(
    bench: &LoadedBenchmark,
    model: &str,
    params: &PostprocParams,
    opts: &ScoreOptions,
) -> Result<ConfigScore> {
    params.validate()?;
    let preds = bench
        .predictions
        .get(model)
        .ok_or_else(|| Error::Dataset(format!("unknown model {model:?}")))?;
    let reports = preds
        .par_iter()
        .zip(&bench.gts)
        .map(|(pred, gt)| {
            let processed = apply_postprocessing(pred, params)?;
            let m = match_instances(&processed, gt, opts.tau)?;
            Ok(compute_ipq(&m, opts.k, opts.iq_mode))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = reports.len() as f64;
    let mean = |f: fn(&crate::metrics::IpqReport) -> f64| {
        compensated_sum(&reports.iter().map(f).collect::<Vec<_>>()) / n
    };
    Ok(ConfigScore {
        ipq: mean(|r| r.ipq),
        sq: mean(|r| r.sq),
        rq: mean(|r| r.rq),
        iq: mean(|r| r.iq),
        per_image_ipq: reports.iter().map(|r| r.ipq).collect(),
    })
}

/// Model choice plus the seven postprocessing parameters.
pub fn segmentation_space<'a>(models: impl IntoIterator<Item = &'a str>) -> SearchSpace {
    let unit = |name: &str| ContinuousDim {
        name: name.into(),
        lo: 0.0,
        hi: 1.0,
    };
    SearchSpace {
        categorical: vec![CategoricalDim {
            name: MODEL_DIM.into(),
            choices: models.into_iter().map(str::to_owned).collect(),
        }],
        continuous: [
            "theta_mc",
            "theta_ms",
            "theta_mr",
            "theta_ssigma",
            "theta_st",
        ]
        .into_iter()
        .map(unit)
        .collect(),
        integer: vec![
            IntegerDim {
                name: "theta_ed".into(),
                lo: *ED_RANGE.start() as i64,
                hi: *ED_RANGE.end() as i64,
            },
            IntegerDim {
                name: "theta_co".into(),
                lo: *CO_RANGE.start() as i64,
                hi: *CO_RANGE.end() as i64,
            },
        ],
    }
}

/// Splits a trial configuration into model name and parameters.
pub fn config_to_params(config: &Config) -> Result<(String, PostprocParams)> {
    let get = |name: &str| {
        config
            .get(name)
            .and_then(ParamValue::as_f64)
            .ok_or_else(|| Error::invalid(format!("configuration lacks {name}")))
    };
    let model = config
        .get(MODEL_DIM)
        .and_then(ParamValue::as_str)
        .ok_or_else(|| Error::invalid("configuration lacks model"))?
        .to_owned();
    let params = PostprocParams {
        theta_ed: get("theta_ed")?.round() as i32,
        theta_co: get("theta_co")?.round() as i32,
        theta_mc: get("theta_mc")?,
        theta_ms: get("theta_ms")?,
        theta_mr: get("theta_mr")?,
        theta_ssigma: get("theta_ssigma")?,
        theta_st: get("theta_st")?,
    };
    Ok((model, params))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegOptOptions {
    pub budget: usize,
    pub strategy: Strategy,
    pub seed: u64,
    #[serde(flatten)]
    pub score: ScoreOptions,
}

impl SegOptOptions {
    pub fn new(budget: usize, strategy: Strategy, seed: u64) -> Self {
        Self {
            budget,
            strategy,
            seed,
            score: ScoreOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegOptResult {
    pub best_model: String,
    pub best_params: PostprocParams,
    pub best_ipq: f64,
    pub best_sq: f64,
    pub best_rq: f64,
    pub best_iq: f64,
    /// Zero-parameter score of every model.
    pub baseline: BTreeMap<String, ConfigScore>,
    /// Mean IPQ of all models without postprocessing.
    pub baseline_ipq: f64,
    pub trace: Trace,
}

/// Memoizes evaluations on (model, parameters).
pub struct Evaluator<'a> {
    bench: &'a LoadedBenchmark,
    opts: ScoreOptions,
    cache: RefCell<HashMap<String, ConfigScore>>,
}

impl<'a> Evaluator<'a> {
    pub fn new(bench: &'a LoadedBenchmark, opts: ScoreOptions) -> Self {
        Self {
            bench,
            opts,
            cache: RefCell::new(HashMap::new()),
        }
    }

    pub fn evaluate(&self, model: &str, params: &PostprocParams) -> Result<ConfigScore> {
        let key = format!("{model}\u{0}{}", serde_json::to_string(params)?);
        if let Some(s) = self.cache.borrow().get(&key) {
            return Ok(s.clone());
        }
        let score = evaluate_config(self.bench, model, params, &self.opts)?;
        self.cache.borrow_mut().insert(key, score.clone());
        Ok(score)
    }

    pub fn cached(&self) -> usize {
        self.cache.borrow().len()
    }
}

/// Runs the optimizer over {model} x parameter ranges. `prior` resumes a
/// partial trace; `on_trial` observes each new trial.
pub fn optimize_segmentation_resume(
    bench: &LoadedBenchmark,
    opts: &SegOptOptions,
    prior: Vec<Trial>,
    on_trial: impl FnMut(&Trial) -> Result<()>,
) -> Result<SegOptResult> {
    let models: Vec<&str> = bench.models().collect();
    if opts.budget < models.len() {
        return Err(Error::invalid(format!(
            "budget {} is smaller than the number of models {}",
            opts.budget,
            models.len()
        )));
    }
    let space = segmentation_space(models.iter().copied());
    let evaluator = Evaluator::new(bench, opts.score);
    let failure: RefCell<Option<Error>> = RefCell::new(None);
    let bo = OptimizeOptions::new(opts.budget, opts.strategy, opts.seed);
    let trace = optimize_resume(
        &space,
        &bo,
        prior,
        |config| {
            let scored = config_to_params(config).and_then(|(m, p)| evaluator.evaluate(&m, &p));
            scored.map(|s| s.ipq).map_err(|e| {
                let msg = e.to_string();
                failure.borrow_mut().get_or_insert(e);
                msg
            })
        },
        on_trial,
    )?;
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    let best = trace
        .best
        .as_ref()
        .ok_or_else(|| Error::Numeric("no successful evaluation".into()))?;
    let (best_model, best_params) = config_to_params(&best.config)?;
    let best_score = evaluator.evaluate(&best_model, &best_params)?;

    let mut baseline = BTreeMap::new();
    for model in &models {
        baseline.insert(
            (*model).to_owned(),
            evaluator.evaluate(model, &PostprocParams::default())?,
        );
    }
    let baseline_ipq = compensated_sum(&baseline.values().map(|s| s.ipq).collect::<Vec<_>>())
        / baseline.len() as f64;
    Ok(SegOptResult {
        best_model,
        best_params,
        best_ipq: best_score.ipq,
        best_sq: best_score.sq,
        best_rq: best_score.rq,
        best_iq: best_score.iq,
        baseline,
        baseline_ipq,
        trace,
    })
}

pub fn optimize_segmentation(
    bench: &LoadedBenchmark,
    opts: &SegOptOptions,
) -> Result<SegOptResult> {
    optimize_segmentation_resume(bench, opts, Vec::new(), |_| Ok(()))
}
