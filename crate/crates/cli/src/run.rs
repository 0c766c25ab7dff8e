//! Resolved runs, their manifests and replay.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use decisionnce::manifest::RunManifest;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::commands::{EvalLcbcRun, FirstImageRun, GenWorldRun, HeatmapRun, PlanRun, RewardCurveRun, SamplingRun, TrainRun};

/// A subcommand with every setting resolved. Serializing it gives the
/// config recorded in the manifest; deserializing it re-creates the run.
pub trait Run: Serialize + DeserializeOwned {
    const NAME: &'static str;

    fn seed(&self) -> u64;
    fn inputs(&self) -> Vec<PathBuf>;
    /// The first output is the primary one; the manifest sits beside it.
    fn outputs_mut(&mut self) -> Vec<&mut PathBuf>;
    fn execute(&self) -> Result<()>;

    fn outputs(&mut self) -> Vec<PathBuf> {
        self.outputs_mut().into_iter().map(|p| p.clone()).collect()
    }
}

pub fn manifest_path(primary: &Path) -> PathBuf {
    suffixed(primary, ".manifest.json")
}

/// `path` with `suffix` appended to its file name.
pub fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn build_manifest<R: Run>(run: &mut R) -> Result<RunManifest> {
    let mut m = RunManifest::new(R::NAME, run.seed(), serde_json::to_value(&*run)?);
    for input in run.inputs() {
        m.add_input(&input)?;
    }
    for output in run.outputs() {
        m.add_output(output);
    }
    Ok(m)
}

/// Executes `run` and writes its manifest. Returns the manifest path.
pub fn record<R: Run>(mut run: R) -> Result<PathBuf> {
    // Hash inputs before running so the manifest reflects what was read.
    let manifest = build_manifest(&mut run)?;
    run.execute()?;
    let path = manifest_path(&run.outputs()[0]);
    manifest.save(&path)?;
    log::info!("wrote {}", path.display());
    Ok(path)
}

#[derive(Debug, Serialize)]
pub struct ReplayOutcome {
    pub path: String,
    pub identical: bool,
}

fn replay_as<R: Run>(manifest: &RunManifest) -> Result<Vec<ReplayOutcome>> {
    let mut run: R = manifest.config_as().context("manifest config does not match its subcommand")?;
    let originals = run.outputs();
    let scratch = tempfile::tempdir()?;
    for (i, p) in run.outputs_mut().into_iter().enumerate() {
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        *p = scratch.path().join(format!("{i}-{name}"));
    }
    run.execute()?;
    originals
        .into_iter()
        .zip(run.outputs())
        .map(|(orig, fresh)| {
            let a = fs::read(&orig).with_context(|| format!("reading recorded output {}", orig.display()))?;
            let b = fs::read(&fresh)?;
            Ok(ReplayOutcome {
                path: orig.display().to_string(),
                identical: a == b,
            })
        })
        .collect()
}

/// Re-executes the run a manifest describes into a scratch directory and
/// compares every output byte for byte against the recorded files.
pub fn replay(manifest: &RunManifest) -> Result<Vec<ReplayOutcome>> {
    let changed = manifest.changed_inputs()?;
    if !changed.is_empty() {
        let names: Vec<_> = changed.iter().map(|c| c.path.as_str()).collect();
        bail!("inputs changed since the run was recorded: {}", names.join(", "));
    }
    match manifest.subcommand.as_str() {
        GenWorldRun::NAME => replay_as::<GenWorldRun>(manifest),
        TrainRun::NAME => replay_as::<TrainRun>(manifest),
        SamplingRun::NAME => replay_as::<SamplingRun>(manifest),
        RewardCurveRun::NAME => replay_as::<RewardCurveRun>(manifest),
        HeatmapRun::NAME => replay_as::<HeatmapRun>(manifest),
        FirstImageRun::NAME => replay_as::<FirstImageRun>(manifest),
        PlanRun::NAME => replay_as::<PlanRun>(manifest),
        EvalLcbcRun::NAME => replay_as::<EvalLcbcRun>(manifest),
        other => bail!("manifest names unknown subcommand {other:?}"),
    }
}
