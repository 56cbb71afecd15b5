//! Experiment configuration files.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use plasticity::continual::{ProtocolConfig, TeacherConfig};
use plasticity::rl::RlConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Continual,
    Rl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinualVariant {
    pub name: String,
    pub protocol: ProtocolConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinualExperiment {
    #[serde(default)]
    pub teacher: TeacherConfig,
    pub variants: Vec<ContinualVariant>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlVariant {
    pub name: String,
    #[serde(default)]
    pub config: RlConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlExperiment {
    pub variants: Vec<RlVariant>,
}

/// A full experiment: one run per (variant, seed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub seeds: Vec<u64>,
    /// Relative paths resolve under the output root; defaults to `name`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub continual: Option<ContinualExperiment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rl: Option<RlExperiment>,
}

/// Environment variable holding the output root.
pub const OUT_ENV: &str = "PLASTICITY_OUT";
const DEFAULT_OUT: &str = "runs";

fn check_label(what: &str, s: &str) -> Result<(), CliError> {
    let ok = !s.is_empty()
        && s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        && !s.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "{what}: {s:?} must be non-empty and use only letters, digits, '_', '-' or '.'"
        )))
    }
}

fn field_err(path: String, e: plasticity::Error) -> CliError {
    CliError::Config(format!("{path}: {e}"))
}

impl ExperimentConfig {
    pub fn variant_names(&self) -> Vec<&str> {
        match self.kind {
            ExperimentKind::Continual => self
                .continual
                .iter()
                .flat_map(|c| c.variants.iter().map(|v| v.name.as_str()))
                .collect(),
            ExperimentKind::Rl => self
                .rl
                .iter()
                .flat_map(|c| c.variants.iter().map(|v| v.name.as_str()))
                .collect(),
        }
    }

    /// Checks every field before anything runs.
    pub fn validate(&self) -> Result<(), CliError> {
        check_label("name", &self.name)?;
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds: at least one seed is required".into()));
        }
        let mut seen = BTreeSet::new();
        for (i, s) in self.seeds.iter().enumerate() {
            if !seen.insert(s) {
                return Err(CliError::Config(format!("seeds[{i}]: duplicate seed {s}")));
            }
        }
        match self.kind {
            ExperimentKind::Continual => {
                if self.rl.is_some() {
                    return Err(CliError::Config("rl: not allowed when kind is \"continual\"".into()));
                }
                let c = self
                    .continual
                    .as_ref()
                    .ok_or_else(|| CliError::Config("continual: section required when kind is \"continual\"".into()))?;
                c.teacher.validate().map_err(|e| field_err("continual.teacher".into(), e))?;
                if c.variants.is_empty() {
                    return Err(CliError::Config("continual.variants: at least one variant is required".into()));
                }
                for (i, v) in c.variants.iter().enumerate() {
                    check_label(&format!("continual.variants[{i}].name"), &v.name)?;
                    v.protocol
                        .validate()
                        .map_err(|e| field_err(format!("continual.variants[{i}].protocol"), e))?;
                    if v.protocol.learner_widths.first() != c.teacher.widths.first() {
                        return Err(CliError::Config(format!(
                            "continual.variants[{i}].protocol.learner_widths: input width must equal the teacher's"
                        )));
                    }
                }
            }
            ExperimentKind::Rl => {
                if self.continual.is_some() {
                    return Err(CliError::Config("continual: not allowed when kind is \"rl\"".into()));
                }
                let r = self
                    .rl
                    .as_ref()
                    .ok_or_else(|| CliError::Config("rl: section required when kind is \"rl\"".into()))?;
                if r.variants.is_empty() {
                    return Err(CliError::Config("rl.variants: at least one variant is required".into()));
                }
                for (i, v) in r.variants.iter().enumerate() {
                    check_label(&format!("rl.variants[{i}].name"), &v.name)?;
                    v.config
                        .validate()
                        .map_err(|e| field_err(format!("rl.variants[{i}].config"), e))?;
                }
            }
        }
        let mut names = BTreeSet::new();
        for n in self.variant_names() {
            if !names.insert(n) {
                return Err(CliError::Config(format!("variant name {n:?} is used twice")));
            }
        }
        Ok(())
    }

    /// Directory holding this experiment's run logs.
    pub fn output_path(&self, root: &Path) -> PathBuf {
        match &self.output_dir {
            Some(p) if p.is_absolute() => p.clone(),
            Some(p) => root.join(p),
            None => root.join(&self.name),
        }
    }

    /// Pretty JSON with every default filled in; LF line endings.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

pub fn output_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT), PathBuf::from)
}

/// Parses JSON text; errors name the offending field path.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("{path}: {}", e.into_inner()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "kind": "continual",
        "name": "tiny",
        "seeds": [1, 2],
        "continual": {"variants": [{"name": "warm", "protocol": {"mode": "reset_never"}}]}
    }"#;

    #[test]
    fn misspelled_key_is_named() {
        let text = MINIMAL.replace(r#""mode": "reset_never""#, r#""mode": "reset_never", "lerning_rate": 0.1"#);
        let err = parse_config_str(&text).unwrap_err().to_string();
        assert!(err.contains("lerning_rate"), "{err}");
        assert!(err.contains("continual.variants[0].protocol"), "{err}");
    }

    #[test]
    fn type_and_range_errors_cite_field() {
        let err = parse_config_str(&MINIMAL.replace("[1, 2]", "[1, \"x\"]")).unwrap_err().to_string();
        assert!(err.contains("seeds[1]: invalid type"), "{err}");
        let err = parse_config_str(&MINIMAL.replace("[1, 2]", "[1, 1]")).unwrap_err().to_string();
        assert!(err.contains("duplicate seed"), "{err}");
        let text = MINIMAL.replace(r#""mode": "reset_never""#, r#""mode": "reset_never", "learning_rate": -1"#);
        let err = parse_config_str(&text).unwrap_err().to_string();
        assert!(err.contains("continual.variants[0].protocol"), "{err}");
    }

    #[test]
    fn defaults_are_echoed_and_stable() {
        let cfg = parse_config_str(MINIMAL).unwrap();
        let json = cfg.to_json();
        assert!(json.contains("\"iterations_per_task\": 1000"));
        assert!(json.contains("\"drift_scale\": 1.0"));
        let again = parse_config_str(&json).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_json(), json);
    }

    #[test]
    fn kind_must_match_section() {
        let text = MINIMAL.replace(r#""kind": "continual""#, r#""kind": "rl""#);
        assert!(matches!(parse_config_str(&text), Err(CliError::Config(_))));
    }
}
