//! Instance matching and panoptic-style quality scores.
//!
//! IPQ factors a segmentation's quality into segmentation quality (SQ),
//! recognition quality (RQ) and injectivity quality (IQ), so that splitting
//! an annotated instance into several predictions is penalized even when
//! every fragment overlaps its annotation well.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::LabelVolume;

pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Annotation id -> ascending predicted ids assigned to it.
    pub groups: BTreeMap<u32, Vec<u32>>,
    pub tp: BTreeSet<u32>,
    pub fp: BTreeSet<u32>,
    #[serde(rename = "fn")]
    pub fn_: BTreeSet<u32>,
    /// Annotation id -> IoU of the union of its assigned predictions.
    pub union_iou: BTreeMap<u32, f64>,
    pub gt_count: usize,
    pub pred_count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IpqWeights {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
}

impl Default for IpqWeights {
    fn default() -> Self {
        Self {
            k1: 1.0,
            k2: 1.0,
            k3: 1.0,
        }
    }
}

impl IpqWeights {
    pub fn new(k1: f64, k2: f64, k3: f64) -> Result<Self> {
        for (name, k) in [("k1", k1), ("k2", k2), ("k3", k3)] {
            if !(0.0..=1.0).contains(&k) {
                return Err(Error::invalid(format!("{name} = {k} outside [0, 1]")));
            }
        }
        Ok(Self { k1, k2, k3 })
    }
}

/// How the IQ denominator is summed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IqMode {
    /// Each prediction assigned to a TP annotation contributes
    /// `max(1, n - 1)`, `n` being the size of its group.
    #[default]
    MatchedPredictions,
    /// Each annotation contributes `max(1, n - 1)` once.
    PerAnnotation,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub g: usize,
    pub p: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IpqReport {
    pub sq: f64,
    pub rq: f64,
    pub iq: f64,
    pub ipq: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pq: Option<f64>,
    pub counts: Counts,
    pub iq_mode: IqMode,
}

struct Overlaps {
    /// (pred, gt) -> shared voxel count
    pairs: HashMap<(u32, u32), usize>,
    pred_sizes: BTreeMap<u32, usize>,
    gt_sizes: BTreeMap<u32, usize>,
}

fn overlaps(pred: &LabelVolume, gt: &LabelVolume) -> Result<Overlaps> {
    pred.check_same_shape(gt)?;
    let mut pairs = HashMap::new();
    let mut pred_sizes = BTreeMap::new();
    let mut gt_sizes = BTreeMap::new();
    for (&p, &g) in pred.data().iter().zip(gt.data().iter()) {
        if p != 0 {
            *pred_sizes.entry(p).or_insert(0) += 1;
        }
        if g != 0 {
            *gt_sizes.entry(g).or_insert(0) += 1;
        }
        if p != 0 && g != 0 {
            *pairs.entry((p, g)).or_insert(0) += 1;
        }
    }
    Ok(Overlaps {
        pairs,
        pred_sizes,
        gt_sizes,
    })
}

/// Assigns every prediction to the annotation it overlaps most (ties to the
/// lower annotation id) and tests each annotation's union IoU against `tau`.
pub fn match_instances(pred: &LabelVolume, gt: &LabelVolume, tau: f64) -> Result<MatchResult> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::invalid(format!("tau = {tau} outside [0, 1)")));
    }
    let ov = overlaps(pred, gt)?;

    let mut best: BTreeMap<u32, (u32, usize)> = BTreeMap::new();
    for (&(p, g), &n) in &ov.pairs {
        let entry = best.entry(p).or_insert((g, n));
        if n > entry.1 || (n == entry.1 && g < entry.0) {
            *entry = (g, n);
        }
    }

    let mut result = MatchResult {
        gt_count: ov.gt_sizes.len(),
        pred_count: ov.pred_sizes.len(),
        ..Default::default()
    };
    for &p in ov.pred_sizes.keys() {
        match best.get(&p) {
            Some(&(g, _)) => result.groups.entry(g).or_default().push(p),
            None => {
                result.fp.insert(p);
            }
        }
    }

    for (&g, &g_size) in &ov.gt_sizes {
        let Some(members) = result.groups.get(&g) else {
            result.fn_.insert(g);
            result.union_iou.insert(g, 0.0);
            continue;
        };
        let inter: usize = members.iter().map(|p| ov.pairs[&(*p, g)]).sum();
        let pred_total: usize = members.iter().map(|p| ov.pred_sizes[p]).sum();
        let union = g_size + pred_total - inter;
        let iou = inter as f64 / union as f64;
        result.union_iou.insert(g, iou);
        if iou > tau {
            result.tp.insert(g);
        } else {
            result.fn_.insert(g);
            result.fp.extend(members.iter().copied());
        }
    }
    Ok(result)
}

/// SQ, RQ, IQ and their weighted product from a matching.
pub fn compute_ipq(m: &MatchResult, k: IpqWeights, iq_mode: IqMode) -> IpqReport {
    let counts = Counts {
        tp: m.tp.len(),
        fp: m.fp.len(),
        fn_: m.fn_.len(),
        g: m.gt_count,
        p: m.pred_count,
    };
    let (sq, rq, iq) = if counts.g == 0 {
        (1.0, if counts.p == 0 { 1.0 } else { 0.0 }, 1.0)
    } else {
        let sq = if counts.tp == 0 {
            0.0
        } else {
            m.tp.iter().map(|g| m.union_iou[g]).sum::<f64>() / counts.tp as f64
        };
        let rq = counts.tp as f64
            / (counts.tp as f64 + 0.5 * counts.fp as f64 + 0.5 * counts.fn_ as f64);
        let denominator: usize = match iq_mode {
            IqMode::MatchedPredictions => {
                m.tp.iter()
                    .map(|g| {
                        let n = m.groups[g].len();
                        n * (n.saturating_sub(1)).max(1)
                    })
                    .sum()
            }
            IqMode::PerAnnotation => m
                .union_iou
                .keys()
                .map(|g| m.groups.get(g).map_or(0, Vec::len).saturating_sub(1).max(1))
                .sum(),
        };
        let iq = if denominator == 0 {
            1.0
        } else {
            (counts.g as f64 / denominator as f64).min(1.0)
        };
        (sq, rq, iq)
    };
    IpqReport {
        sq,
        rq,
        iq,
        ipq: (k.k1 * sq) * (k.k2 * rq) * (k.k3 * iq),
        pq: None,
        counts,
        iq_mode,
    }
}

/// Standard panoptic quality with one-to-one IoU matching. `tau >= 0.5`
/// makes every match unique.
pub fn compute_pq(pred: &LabelVolume, gt: &LabelVolume, tau: f64) -> Result<f64> {
    if !(0.5..1.0).contains(&tau) {
        return Err(Error::invalid(format!(
            "PQ threshold tau = {tau} must lie in [0.5, 1)"
        )));
    }
    let ov = overlaps(pred, gt)?;
    let mut iou_sum = 0.0;
    let mut tp = 0usize;
    let mut pairs: Vec<_> = ov.pairs.iter().collect();
    pairs.sort_unstable_by_key(|(k, _)| **k);
    for (&(p, g), &inter) in pairs {
        let union = ov.pred_sizes[&p] + ov.gt_sizes[&g] - inter;
        let iou = inter as f64 / union as f64;
        if iou > tau {
            tp += 1;
            iou_sum += iou;
        }
    }
    let (np, ng) = (ov.pred_sizes.len(), ov.gt_sizes.len());
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    let fp = np - tp;
    let fn_ = ng - tp;
    Ok(iou_sum / (tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64))
}

/// Matching, IPQ and PQ in one pass over the inputs.
pub fn evaluate(
    pred: &LabelVolume,
    gt: &LabelVolume,
    tau: f64,
    k: IpqWeights,
    iq_mode: IqMode,
) -> Result<IpqReport> {
    let m = match_instances(pred, gt, tau)?;
    let mut report = compute_ipq(&m, k, iq_mode);
    report.pq = Some(compute_pq(pred, gt, tau.max(0.5))?);
    Ok(report)
}
