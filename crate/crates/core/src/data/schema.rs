use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Continuous,
    Categorical,
    Label,
    Sensitive,
    Ignore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    pub kind: ColumnKind,
    /// Label values mapped to 1.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub positive: Vec<String>,
    /// Sensitive values forming the majority group (`s = 1`).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub majority: Vec<String>,
}

/// Declarative description of a CSV file. See `configs/schemas/` for the
/// grammar in use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub name: String,
    /// Field values treated as missing, in addition to the empty string.
    #[serde(default)]
    pub missing: Vec<String>,
    /// One-hot encode the sensitive column into the features as well.
    #[serde(default = "yes")]
    pub sensitive_as_feature: bool,
    pub columns: Vec<ColumnSchema>,
}

fn yes() -> bool {
    true
}

impl Schema {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Schema = toml::from_str(text).map_err(|e| DataError::Schema(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::Io(path.display().to_string(), e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for c in &self.columns {
            if !seen.insert(c.name.as_str()) {
                return Err(DataError::Schema(format!("column {} listed twice", c.name)));
            }
        }
        let count = |k| self.columns.iter().filter(|c| c.kind == k).count();
        if count(ColumnKind::Label) != 1 {
            return Err(DataError::Schema("need exactly one label column".into()));
        }
        if count(ColumnKind::Sensitive) != 1 {
            return Err(DataError::Schema("need exactly one sensitive column".into()));
        }
        if self.label().positive.is_empty() {
            return Err(DataError::Schema("label column needs positive values".into()));
        }
        if self.sensitive().majority.is_empty() {
            return Err(DataError::Schema("sensitive column needs majority values".into()));
        }
        Ok(())
    }

    pub fn label(&self) -> &ColumnSchema {
        self.columns.iter().find(|c| c.kind == ColumnKind::Label).unwrap()
    }

    pub fn sensitive(&self) -> &ColumnSchema {
        self.columns.iter().find(|c| c.kind == ColumnKind::Sensitive).unwrap()
    }

    /// Columns the loader reads, in schema order.
    pub(crate) fn used(&self) -> impl Iterator<Item = &ColumnSchema> {
        self.columns.iter().filter(|c| c.kind != ColumnKind::Ignore)
    }

    pub(crate) fn is_missing(&self, field: &str) -> bool {
        field.is_empty() || self.missing.iter().any(|m| m == field)
    }
}
