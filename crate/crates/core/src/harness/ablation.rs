use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::run::run_experiment;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationAxis {
    /// Which of quantization and the routed expert bank are enabled.
    Component,
    /// Re-quantization sample fraction.
    P,
    /// Expert count.
    N,
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "component" => Ok(Self::Component),
            "p" => Ok(Self::P),
            "N" | "n" => Ok(Self::N),
            other => Err(Error::config(format!("unknown ablation axis `{other}` (expected component|p|N)"))),
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Component => "component",
            Self::P => "p",
            Self::N => "N",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Component {
    Neither,
    GnpIq,
    Ismoe,
    Both,
}

impl Component {
    pub const ALL: [Component; 4] = [Self::Neither, Self::GnpIq, Self::Ismoe, Self::Both];

    pub fn apply(self, cfg: &mut RunConfig) {
        let (quant, moe) = match self {
            Self::Neither => (false, false),
            Self::GnpIq => (true, false),
            Self::Ismoe => (false, true),
            Self::Both => (true, true),
        };
        cfg.quantizer.enabled = quant;
        cfg.side.ismoe = moe;
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neither" => Ok(Self::Neither),
            "gnp-iq" => Ok(Self::GnpIq),
            "ismoe" => Ok(Self::Ismoe),
            "both" => Ok(Self::Both),
            other => Err(Error::config(format!(
                "unknown component `{other}` (expected neither|gnp-iq|ismoe|both)"
            ))),
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Neither => "neither",
            Self::GnpIq => "gnp-iq",
            Self::Ismoe => "ismoe",
            Self::Both => "both",
        })
    }
}

/// One row of the comparison CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub final_val_accuracy: f64,
    pub test_accuracy: f64,
    pub final_error_q: f64,
    pub memory_bytes: f64,
    pub balance_loss: f64,
    pub final_task_loss: f64,
}

fn configure(axis: AblationAxis, value: &str, base: &RunConfig) -> Result<RunConfig> {
    let mut cfg = base.clone();
    match axis {
        AblationAxis::Component => value.parse::<Component>()?.apply(&mut cfg),
        AblationAxis::P => {
            cfg.requant.fraction = value
                .parse()
                .map_err(|_| Error::config(format!("p value `{value}` is not a number")))?;
        }
        AblationAxis::N => {
            cfg.router.experts = value
                .parse()
                .map_err(|_| Error::config(format!("N value `{value}` is not an integer")))?;
            cfg.side.ismoe = true;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Thread cap from `SIDEMOE_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var("SIDEMOE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
}

/// One run per value with everything else taken from `base`. Runs execute
/// in parallel, each on a single thread; rows keep the order of `values`.
pub fn ablation_sweep(axis: AblationAxis, values: &[String], base: &RunConfig) -> Result<Vec<AblationRow>> {
    if values.is_empty() {
        return Err(Error::config("ablation needs at least one value"));
    }
    let configs = values
        .iter()
        .map(|v| configure(axis, v, base))
        .collect::<Result<Vec<_>>>()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap() {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::config(e.to_string()))?;
    let results: Vec<Result<AblationRow>> = pool.install(|| {
        configs
            .par_iter()
            .zip(values)
            .map(|(cfg, value)| {
                let run = run_experiment(cfg)?;
                let s = &run.report.summary;
                Ok(AblationRow {
                    axis: axis.to_string(),
                    value: value.clone(),
                    final_val_accuracy: s.final_val_accuracy,
                    test_accuracy: s.test_accuracy,
                    final_error_q: s.final_error_q,
                    memory_bytes: s.memory.total,
                    balance_loss: s.final_balance_loss,
                    final_task_loss: s.final_task_loss,
                })
            })
            .collect()
    });
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_axes_and_components() {
        assert_eq!("component".parse::<AblationAxis>().unwrap(), AblationAxis::Component);
        assert_eq!("N".parse::<AblationAxis>().unwrap(), AblationAxis::N);
        assert!("q".parse::<AblationAxis>().is_err());
        for c in Component::ALL {
            assert_eq!(c.to_string().parse::<Component>().unwrap(), c);
        }
    }

    #[test]
    fn bad_values_rejected_before_running() {
        let base = RunConfig::default();
        assert!(ablation_sweep(AblationAxis::P, &["x".into()], &base).is_err());
        assert!(ablation_sweep(AblationAxis::P, &["1.5".into()], &base).is_err());
        assert!(ablation_sweep(AblationAxis::N, &[], &base).is_err());
    }
}
