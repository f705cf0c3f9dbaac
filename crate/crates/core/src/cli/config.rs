use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;

use crate::curate::LabelConvention;
use crate::error::{Error, Result};
use crate::geometry::WindowSpec;
use crate::stitch::ZeroCoverage;

/// A per-axis setting given either once for every axis or axis by axis.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(untagged)]
pub enum AxisValues {
    Uniform(usize),
    PerAxis(Vec<usize>),
}

impl AxisValues {
    pub fn resolve(&self, rank: usize, what: &str) -> Result<Vec<usize>> {
        match self {
            AxisValues::Uniform(v) => Ok(vec![*v; rank]),
            AxisValues::PerAxis(v) if v.len() == rank => Ok(v.clone()),
            AxisValues::PerAxis(v) => Err(Error::InvalidSpec(format!(
                "{what} has {} values but the tensor has {rank} spatial axes",
                v.len()
            ))),
        }
    }

    fn rank(&self) -> Option<usize> {
        match self {
            AxisValues::Uniform(_) => None,
            AxisValues::PerAxis(v) => Some(v.len()),
        }
    }
}

impl FromStr for AxisValues {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts = s
            .split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(match parts.as_slice() {
            [single] => AxisValues::Uniform(*single),
            _ => AxisValues::PerAxis(parts),
        })
    }
}

/// Every knob of a run. Loaded from a JSON or TOML file, then overridden by
/// command-line flags.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub input: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub plan: Option<PathBuf>,
    pub results: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub window: Option<AxisValues>,
    pub step: Option<AxisValues>,
    pub border: Option<AxisValues>,
    pub border_weight: Option<f32>,
    pub sentinel: Option<f32>,
    pub chunk: Option<AxisValues>,
    pub on_zero_coverage: Option<String>,
    pub workers: Option<usize>,
}

macro_rules! overlay {
    ($base:ident, $top:ident; $($field:ident),*) => {
        $( if $top.$field.is_some() { $base.$field = $top.$field; } )*
    };
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("json"));
        if is_json {
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("config: {e}")))
        } else {
            toml::from_str(&text).map_err(|e| Error::Format(format!("config: {e}")))
        }
    }

    /// Fields set in `top` replace those in `self`.
    pub fn overlay(mut self, top: PipelineConfig) -> Self {
        overlay!(self, top; input, labels, plan, results, out, window, step, border,
            border_weight, sentinel, chunk, on_zero_coverage, workers);
        self
    }

    /// Checks everything that does not depend on the input's rank.
    pub fn validate(&self) -> Result<()> {
        self.convention()?;
        self.zero_coverage()?;
        if self.workers == Some(0) {
            return Err(Error::InvalidSpec("--workers must be >= 1".into()));
        }
        if let Some(chunk) = &self.chunk {
            let rank = chunk.rank().unwrap_or(3);
            if chunk.resolve(rank, "chunk")?.contains(&0) {
                return Err(Error::InvalidSpec("chunk extents must be >= 1".into()));
            }
        }
        if self.window.is_some() {
            let ranks: Vec<usize> = [&self.window, &self.step, &self.border]
                .into_iter()
                .flatten()
                .filter_map(AxisValues::rank)
                .collect();
            let rank = ranks.first().copied().unwrap_or(3);
            if ranks.iter().any(|&r| r != rank) {
                return Err(Error::InvalidSpec(
                    "window, step and border list different numbers of axes".into(),
                ));
            }
            self.spec(rank)?;
        }
        Ok(())
    }

    /// Window spec for a tensor with `rank` spatial axes. The step defaults to
    /// the window and the border to zero.
    pub fn spec(&self, rank: usize) -> Result<WindowSpec> {
        let window = self
            .window
            .as_ref()
            .ok_or_else(|| Error::InvalidSpec("a window size is required (--window)".into()))?
            .resolve(rank, "window")?;
        let step = match &self.step {
            Some(step) => step.resolve(rank, "step")?,
            None => window.clone(),
        };
        let border = match &self.border {
            Some(border) => border.resolve(rank, "border")?,
            None => vec![0; rank],
        };
        WindowSpec::with_border(window, step, border, self.border_weight.unwrap_or(1.0))
    }

    pub fn convention(&self) -> Result<LabelConvention> {
        match self.sentinel {
            Some(s) => LabelConvention::new(s),
            None => Ok(LabelConvention::default()),
        }
    }

    pub fn zero_coverage(&self) -> Result<ZeroCoverage> {
        self.on_zero_coverage
            .as_deref()
            .map_or(Ok(ZeroCoverage::Error), str::parse)
    }

    pub fn chunk(&self, rank: usize) -> Result<Option<Vec<usize>>> {
        self.chunk
            .as_ref()
            .map(|c| c.resolve(rank, "chunk"))
            .transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_values_parse() {
        assert_eq!("64".parse::<AxisValues>().unwrap(), AxisValues::Uniform(64));
        assert_eq!(
            "1, 2,3".parse::<AxisValues>().unwrap(),
            AxisValues::PerAxis(vec![1, 2, 3])
        );
        assert!("1,x".parse::<AxisValues>().is_err());
        assert!(AxisValues::PerAxis(vec![1, 2]).resolve(3, "w").is_err());
    }

    #[test]
    fn toml_and_json_configs() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        fs::write(
            &t,
            "window = [64, 64, 64]\nstep = 32\nborder_weight = 0.5\nborder = 4\n",
        )
        .unwrap();
        let cfg = PipelineConfig::load(&t).unwrap();
        let spec = cfg.spec(3).unwrap();
        assert_eq!(spec.step(), &[32, 32, 32]);
        assert_eq!(spec.border_weight(), 0.5);

        let j = dir.path().join("c.json");
        fs::write(&j, r#"{"window": 8, "on_zero_coverage": "fill:0"}"#).unwrap();
        let cfg = PipelineConfig::load(&j).unwrap();
        assert_eq!(cfg.spec(2).unwrap().step(), &[8, 8]);
        assert_eq!(
            cfg.zero_coverage().unwrap(),
            ZeroCoverage::Fill { value: 0.0 }
        );

        fs::write(&j, r#"{"windw": 8}"#).unwrap();
        assert!(PipelineConfig::load(&j).is_err());
    }

    #[test]
    fn flags_override_file() {
        let file = PipelineConfig {
            window: Some(AxisValues::Uniform(16)),
            step: Some(AxisValues::Uniform(8)),
            ..Default::default()
        };
        let flags = PipelineConfig {
            step: Some(AxisValues::Uniform(4)),
            ..Default::default()
        };
        let merged = file.overlay(flags);
        assert_eq!(merged.spec(2).unwrap().step(), &[4, 4]);
        assert_eq!(merged.spec(2).unwrap().window(), &[16, 16]);
    }

    #[test]
    fn static_validation_catches_bad_steps() {
        let cfg = PipelineConfig {
            window: Some(AxisValues::Uniform(8)),
            step: Some(AxisValues::Uniform(9)),
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidSpec(_))));
        let cfg = PipelineConfig {
            workers: Some(0),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = PipelineConfig {
            on_zero_coverage: Some("maybe".into()),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
