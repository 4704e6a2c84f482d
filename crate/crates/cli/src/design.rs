//! Design-space optimization against an external training command.
//!
//! Each trial writes its configuration as JSON to a temporary file, runs the
//! command template through `sh -c` with `{config}` replaced by that path and
//! reads `{"objective": <number>}` from the last non-empty stdout line.

use std::path::Path;
use std::process::Command;

use anyhow::{bail, Context};
use aop3d_core::boengine::{
    optimize_resume, write_trial, CategoricalDim, Config, OptimizeOptions, SearchSpace, Strategy,
    Surrogate, Trace, Trial,
};
use serde::{Deserialize, Serialize};

pub const CONFIG_PLACEHOLDER: &str = "{config}";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignSpaceSpec {
    pub dims: Vec<CategoricalDim>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
}

impl DesignSpaceSpec {
    pub fn space(&self) -> anyhow::Result<SearchSpace> {
        if self.dims.is_empty() {
            bail!("design space has no dimensions");
        }
        let space = SearchSpace {
            categorical: self.dims.clone(),
            ..Default::default()
        };
        space.validate()?;
        Ok(space)
    }
}

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

#[derive(Deserialize)]
struct ObjectiveLine {
    objective: f64,
}

/// Runs one trial; failures carry the reason and captured stderr.
pub fn run_external(template: &str, config: &Config, workdir: &Path) -> Result<f64, String> {
    let file = tempfile::Builder::new()
        .prefix("config-")
        .suffix(".json")
        .tempfile_in(workdir)
        .map_err(|e| format!("cannot create config file: {e}"))?;
    serde_json::to_writer(file.as_file(), config)
        .map_err(|e| format!("cannot write config: {e}"))?;
    let cmd = template.replace(
        CONFIG_PLACEHOLDER,
        &shell_quote(&file.path().to_string_lossy()),
    );
    let out = Command::new("sh")
        .arg("-c")
        .arg(&cmd)
        .output()
        .map_err(|e| format!("cannot run `sh`: {e}"))?;
    let stderr = String::from_utf8_lossy(&out.stderr).trim().to_owned();
    if !out.status.success() {
        return Err(format!(
            "command exited with {}; stderr: {stderr}",
            out.status
        ));
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    let last = stdout
        .lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .unwrap_or("");
    match serde_json::from_str::<ObjectiveLine>(last) {
        Ok(o) if o.objective.is_finite() => Ok(o.objective),
        Ok(o) => Err(format!(
            "non-finite objective {}; stderr: {stderr}",
            o.objective
        )),
        Err(e) => Err(format!(
            "malformed objective output `{last}` ({e}); stderr: {stderr}"
        )),
    }
}

/// Random-forest Bayesian optimization over the design space. Each trial is
/// appended to `trace_out` as it completes.
pub fn optimize_design(
    spec: &DesignSpaceSpec,
    command: &str,
    budget: usize,
    seed: u64,
    trace_out: Option<&Path>,
) -> anyhow::Result<Trace> {
    if !command.contains(CONFIG_PLACEHOLDER) {
        bail!("command template must contain {CONFIG_PLACEHOLDER}");
    }
    let space = spec.space()?;
    let opts =
        OptimizeOptions::new(budget, Strategy::Bayes, seed).with_surrogate(Surrogate::RandomForest);
    let workdir = tempfile::tempdir().context("creating a scratch directory")?;
    let mut sink = match trace_out {
        Some(p) => {
            Some(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?)
        }
        None => None,
    };
    let trace = optimize_resume(
        &space,
        &opts,
        Vec::new(),
        |config| run_external(command, config, workdir.path()),
        |trial: &Trial| match sink.as_mut() {
            Some(f) => write_trial(&mut *f, trial),
            None => Ok(()),
        },
    )?;
    Ok(trace)
}
