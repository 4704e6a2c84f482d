//! Postprocessing of predicted label volumes: morphology, instance merging
//! and watershed splitting, each controlled by its own parameter group.
//! A group whose parameters are all zero is skipped entirely.

mod merge;
mod morphology;
mod watershed;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::LabelVolume;

pub use merge::{adjacency_graph, edge_score, merge_instances, AdjacencyEdge, MERGE_THRESHOLD};
pub(crate) use morphology::morph_labels;
pub use morphology::{
    apply_morphology, close_mask, dilate_mask, erode_mask, open_mask, CO_RANGE, ED_RANGE,
};
pub use watershed::{split_instances, SIGMA_SCALE};

/// The seven postprocessing parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocParams {
    /// Erosion (negative) or dilation (positive) radius.
    pub theta_ed: i32,
    /// Opening (negative) or closing (positive) radius.
    pub theta_co: i32,
    pub theta_mc: f64,
    pub theta_ms: f64,
    pub theta_mr: f64,
    pub theta_ssigma: f64,
    pub theta_st: f64,
}

impl PostprocParams {
    pub fn validate(&self) -> Result<()> {
        if !ED_RANGE.contains(&self.theta_ed) {
            return Err(Error::invalid(format!(
                "theta_ed = {} outside [-10, 10]",
                self.theta_ed
            )));
        }
        if !CO_RANGE.contains(&self.theta_co) {
            return Err(Error::invalid(format!(
                "theta_co = {} outside [-5, 5]",
                self.theta_co
            )));
        }
        for (name, v) in [
            ("theta_mc", self.theta_mc),
            ("theta_ms", self.theta_ms),
            ("theta_mr", self.theta_mr),
            ("theta_ssigma", self.theta_ssigma),
            ("theta_st", self.theta_st),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn morphology_enabled(&self) -> bool {
        self.theta_ed != 0 || self.theta_co != 0
    }

    pub fn merging_enabled(&self) -> bool {
        self.theta_mc != 0.0 || self.theta_ms != 0.0 || self.theta_mr != 0.0
    }

    pub fn splitting_enabled(&self) -> bool {
        self.theta_ssigma != 0.0 || self.theta_st != 0.0
    }
}

/// Morphology, then merging, then splitting; output ids are `1..=n`.
pub fn apply_postprocessing(labels: &LabelVolume, params: &PostprocParams) -> Result<LabelVolume> {
    params.validate()?;
    let mut current = if params.morphology_enabled() {
        apply_morphology(labels, params.theta_ed, params.theta_co)?
    } else {
        labels.clone()
    };
    if params.merging_enabled() {
        current = merge_instances(&current, params.theta_mc, params.theta_ms, params.theta_mr)?;
    }
    if params.splitting_enabled() {
        current = split_instances(&current, params.theta_ssigma, params.theta_st)?;
    }
    Ok(current.relabel_consecutive())
}
