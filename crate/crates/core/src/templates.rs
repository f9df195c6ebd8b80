//! Versioned prompt templates.
//!
//! The built-in set is compiled in. A directory override replaces individual
//! files by name and must carry its own `VERSION` file, since the version
//! enters the configuration fingerprint.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

macro_rules! builtin {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../templates/v1/", $name, ".txt")))),*]
    };
}

const BUILTIN: &[(&str, &str)] = builtin!(
    "concepts_system",
    "concepts_expect",
    "concepts_list",
    "concepts_ite_expect",
    "concepts_ite_list",
    "repair_json",
    "questions_system",
    "blind_user",
    "count_repair",
    "decide_user",
    "decide_repair",
    "refine_user",
    "score_system",
    "score_user",
    "score_repair",
    "partition_system",
    "partition_user",
    "partition_repair",
    "ite_questions_user",
    "ite_score_user",
);

pub const BUILTIN_VERSION: &str = "v1";

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template directory {0}: {1}")]
    Io(String, std::io::Error),
    #[error("template directory {0} has no VERSION file")]
    MissingVersion(String),
    #[error("unknown template {0}")]
    Unknown(String),
}

#[derive(Debug, Clone)]
pub struct TemplateSet {
    version: String,
    texts: BTreeMap<String, String>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        Self {
            version: BUILTIN_VERSION.to_string(),
            texts: BUILTIN
                .iter()
                .map(|(k, v)| (k.to_string(), v.trim_end().to_string()))
                .collect(),
        }
    }

    /// Built-in templates overridden by any `<name>.txt` in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let shown = dir.display().to_string();
        let version = std::fs::read_to_string(dir.join("VERSION"))
            .map_err(|_| TemplateError::MissingVersion(shown.clone()))?;
        let mut set = Self::builtin();
        set.version = version.trim().to_string();
        let entries = std::fs::read_dir(dir).map_err(|e| TemplateError::Io(shown.clone(), e))?;
        for entry in entries {
            let path = entry.map_err(|e| TemplateError::Io(shown.clone(), e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(name) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            if !set.texts.contains_key(name) {
                return Err(TemplateError::Unknown(name.to_string()));
            }
            let text = std::fs::read_to_string(&path).map_err(|e| TemplateError::Io(shown.clone(), e))?;
            set.texts.insert(name.to_string(), text.trim_end().to_string());
        }
        Ok(set)
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn get(&self, name: &str) -> &str {
        self.texts
            .get(name)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("template {name} is not part of the set"))
    }

    /// Substitutes `{key}` placeholders in one pass, so substituted values are
    /// never re-expanded.
    pub fn render(&self, name: &str, vars: &[(&str, &str)]) -> String {
        let text = self.get(name);
        let mut out = String::with_capacity(text.len() * 2);
        let mut rest = text;
        while let Some(start) = rest.find('{') {
            out.push_str(&rest[..start]);
            let after = &rest[start + 1..];
            match after.find('}') {
                Some(end) => {
                    let key = &after[..end];
                    match vars.iter().find(|(k, _)| *k == key) {
                        Some((_, v)) => out.push_str(v),
                        None => {
                            out.push('{');
                            out.push_str(key);
                            out.push('}');
                        }
                    }
                    rest = &after[end + 1..];
                }
                None => {
                    out.push_str(&rest[start..]);
                    rest = "";
                }
            }
        }
        out.push_str(rest);
        out
    }
}
