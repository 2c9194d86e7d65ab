//! Evaluation suites, result reports and the config-driven experiment runner.

mod config;
mod experiment;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use config::{ArchConfig, EncoderConfig, EvalConfig, ExperimentConfig, SamplingConfig, TaskConfig};
pub use experiment::{run_experiment, Experiment, MemorizationRow, Variant};

use crate::error::{Error, Result};

/// A personalization method under comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// The stage-1 model with its full label space.
    Generic,
    /// Classifier rows of the generic model picked per task.
    Select,
    /// Mixer-weighted merge of shard experts.
    Taper,
    /// Text-conditioned parameter diffusion.
    #[serde(alias = "tina")]
    Diffusion,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Generic => "generic",
            Method::Select => "select",
            Method::Taper => "taper",
            Method::Diffusion => "diffusion",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generic" => Ok(Method::Generic),
            "select" | "classifier_selection" => Ok(Method::Select),
            "taper" => Ok(Method::Taper),
            "diffusion" | "tina" => Ok(Method::Diffusion),
            other => Err(Error::InvalidArgument(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// Training tasks scored on held-out images.
    Id,
    /// Class combinations never trained on.
    Ood,
    /// Tasks mixing in classes from a held-out vocabulary shard.
    Unseen,
    /// Distances and ensembles of generated vs finetuned models.
    Memorization,
    /// Train/test prompt-mode matrix.
    PromptCross,
    /// Variable class counts through a padded generator.
    ClassCount,
    /// Generators trained without or with alternative augmentation.
    Ablation,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::Id,
        Suite::Ood,
        Suite::Unseen,
        Suite::Memorization,
        Suite::PromptCross,
        Suite::ClassCount,
        Suite::Ablation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Id => "id",
            Suite::Ood => "ood",
            Suite::Unseen => "unseen",
            Suite::Memorization => "memorization",
            Suite::PromptCross => "prompt_cross",
            Suite::ClassCount => "class_count",
            Suite::Ablation => "ablation",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown suite `{s}`")))
    }
}

/// Per-task accuracies of one method in one evaluation cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub suite: String,
    pub method: String,
    /// Cell label within the suite, e.g. `c=3` or `train=name,test=name`.
    pub variant: String,
    pub config_hash: String,
    /// False when the method cannot serve these tasks at all.
    pub applicable: bool,
    pub task_ids: Vec<String>,
    pub accuracies: Vec<f64>,
    /// Mean accuracy; `None` when inapplicable.
    pub mean: Option<f64>,
    pub num_tasks: usize,
}

impl EvalReport {
    pub fn new(
        suite: &str,
        method: &str,
        variant: &str,
        config_hash: &str,
        results: Vec<(String, f64)>,
    ) -> Result<Self> {
        if results.is_empty() {
            return Err(Error::InvalidArgument(format!("no tasks evaluated for {suite}/{method}/{variant}")));
        }
        let (task_ids, accuracies): (Vec<_>, Vec<_>) = results.into_iter().unzip();
        let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
        Ok(Self {
            suite: suite.into(),
            method: method.into(),
            variant: variant.into(),
            config_hash: config_hash.into(),
            applicable: true,
            num_tasks: task_ids.len(),
            task_ids,
            accuracies,
            mean: Some(mean),
        })
    }

    pub fn inapplicable(suite: &str, method: &str, variant: &str, config_hash: &str) -> Self {
        Self {
            suite: suite.into(),
            method: method.into(),
            variant: variant.into(),
            config_hash: config_hash.into(),
            applicable: false,
            task_ids: Vec::new(),
            accuracies: Vec::new(),
            mean: None,
            num_tasks: 0,
        }
    }

    /// Mean accuracy in percent, or `/` when inapplicable.
    pub fn display_mean(&self) -> String {
        match self.mean {
            Some(m) => format!("{:.2}", 100.0 * m),
            None => "/".into(),
        }
    }
}

/// Find the report for a method and variant.
pub fn find<'a>(reports: &'a [EvalReport], method: &str, variant: &str) -> Option<&'a EvalReport> {
    reports.iter().find(|r| r.method == method && r.variant == variant)
}

#[derive(Serialize)]
struct ReportFile<'a> {
    config_hash: &'a str,
    suite: &'a str,
    reports: &'a [EvalReport],
}

/// Write `<suite>.csv` (one row per cell), `<suite>_tasks.csv` (one row per
/// task) and `<suite>.json`.
pub fn write_reports(dir: &Path, suite: &str, config_hash: &str, reports: &[EvalReport]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_err = |e: csv::Error| Error::Serde(e.to_string());

    let path = dir.join(format!("{suite}.csv"));
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    w.write_record(["suite", "method", "variant", "tasks", "mean_acc", "config_hash"])
        .map_err(csv_err)?;
    for r in reports {
        w.write_record([
            r.suite.as_str(),
            &r.method,
            &r.variant,
            &r.num_tasks.to_string(),
            &r.display_mean(),
            &r.config_hash,
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join(format!("{suite}_tasks.csv"));
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    w.write_record(["suite", "method", "variant", "task_id", "accuracy"])
        .map_err(csv_err)?;
    for r in reports {
        for (t, a) in r.task_ids.iter().zip(&r.accuracies) {
            w.write_record([r.suite.as_str(), &r.method, &r.variant, t, &a.to_string()])
                .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join(format!("{suite}.json"));
    let json = serde_json::to_string_pretty(&ReportFile {
        config_hash,
        suite,
        reports,
    })?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Plain-text table of cell means.
pub fn format_table(reports: &[EvalReport]) -> String {
    let mut out = format!("{:<14} {:<12} {:<36} {:>6} {:>8}\n", "suite", "method", "variant", "tasks", "p-acc");
    for r in reports {
        out.push_str(&format!(
            "{:<14} {:<12} {:<36} {:>6} {:>8}\n",
            r.suite,
            r.method,
            r.variant,
            r.num_tasks,
            r.display_mean()
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_matches_stored_values() {
        let r = EvalReport::new("ood", "select", "all", "h", vec![("a".into(), 0.5), ("b".into(), 1.0), ("c".into(), 0.25)]).unwrap();
        assert_eq!(r.mean, Some((0.5 + 1.0 + 0.25) / 3.0));
        assert_eq!(r.num_tasks, 3);
        assert!(EvalReport::new("ood", "select", "all", "h", vec![]).is_err());
    }

    #[test]
    fn names_parse() {
        assert_eq!("tina".parse::<Method>().unwrap(), Method::Diffusion);
        assert!("nope".parse::<Method>().is_err());
        assert_eq!("prompt_cross".parse::<Suite>().unwrap(), Suite::PromptCross);
        assert!("bogus".parse::<Suite>().is_err());
    }
}
