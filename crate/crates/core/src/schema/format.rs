use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::UnifiedField;
use crate::error::{Error, Result};

/// Identifier of a clinic export format, e.g. `providence`.
///
/// Ids are lowercase slugs so that format documents can be added without code
/// changes; the six built-in formats are listed in [`ClinicId::BUILTIN`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ClinicId(String);

impl ClinicId {
    pub const HOMETOWN: &'static str = "hometown";
    pub const PROVIDENCE: &'static str = "providence";
    pub const SEAPORT: &'static str = "seaport";
    pub const ST_MARYS: &'static str = "st_marys";
    pub const SYRINGA: &'static str = "syringa";
    pub const WINTERPORT: &'static str = "winterport";

    pub const BUILTIN: [&'static str; 6] = [
        Self::HOMETOWN,
        Self::PROVIDENCE,
        Self::SEAPORT,
        Self::ST_MARYS,
        Self::SYRINGA,
        Self::WINTERPORT,
    ];

    pub fn new(id: &str) -> Result<Self> {
        let id = id.trim();
        let ok = !id.is_empty()
            && id
                .bytes()
                .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_');
        if ok {
            Ok(ClinicId(id.to_string()))
        } else {
            Err(Error::InvalidClinicId(id.to_string()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Built-in ids, in canonical order.
    pub fn builtin() -> Vec<ClinicId> {
        Self::BUILTIN.iter().map(|s| ClinicId(s.to_string())).collect()
    }
}

impl fmt::Display for ClinicId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for ClinicId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ClinicId::new(s)
    }
}

impl TryFrom<String> for ClinicId {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        ClinicId::new(&value)
    }
}

impl From<ClinicId> for String {
    fn from(id: ClinicId) -> Self {
        id.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldMapping {
    pub source: String,
    pub target: UnifiedField,
}

/// Declarative mapping from a clinic export to the unified schema.
///
/// `field_map` transcribes the per-format extraction prompt: one entry per
/// `"target": <extract from 'source'>` line. `fallback` lists export columns
/// that carry a unified field the prompt does not name a source for (refill
/// counts, dispensed quantity) or that appear under a variant spelling in
/// real exports. Fallbacks are consulted only when the primary value is
/// absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClinicFormatSpec {
    pub clinic: ClinicId,
    pub format_name: String,
    pub sig_source: String,
    pub numeric_fields: BTreeSet<UnifiedField>,
    /// The mapped `daily_quantity` source holds a per-administration amount
    /// that must be multiplied by the parsed frequency.
    #[serde(default)]
    pub daily_is_per_dose: bool,
    pub prompt_template: String,
    pub field_map: Vec<FieldMapping>,
    #[serde(default)]
    pub fallback: Vec<FieldMapping>,
}

impl ClinicFormatSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ClinicFormatSpec = toml::from_str(text).map_err(|e| Error::InvalidFormatSpec {
            name: "<toml>".into(),
            reason: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("format spec is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |reason: String| Error::InvalidFormatSpec {
            name: self.clinic.to_string(),
            reason,
        };
        let mut targets = BTreeSet::new();
        for m in &self.field_map {
            if m.source.trim().is_empty() {
                return Err(invalid(format!("empty source for `{}`", m.target)));
            }
            if !targets.insert(m.target) {
                return Err(invalid(format!("`{}` mapped more than once", m.target)));
            }
        }
        if !self
            .field_map
            .iter()
            .any(|m| m.target == UnifiedField::Sig && m.source.trim() == self.sig_source.trim())
        {
            return Err(invalid(format!(
                "sig_source `{}` is not mapped to `sig`",
                self.sig_source
            )));
        }
        if let Some(f) = self.numeric_fields.iter().find(|f| !f.is_numeric()) {
            return Err(invalid(format!("`{f}` is not a numeric field")));
        }
        let numeric_targets = self
            .field_map
            .iter()
            .chain(&self.fallback)
            .map(|m| m.target)
            .filter(|t| t.is_numeric());
        for t in numeric_targets {
            if !self.numeric_fields.contains(&t) {
                return Err(invalid(format!("numeric target `{t}` missing from numeric_fields")));
            }
        }
        Ok(())
    }

    /// Primary source column for a unified field.
    pub fn source_of(&self, target: UnifiedField) -> Option<&str> {
        self.field_map
            .iter()
            .find(|m| m.target == target)
            .map(|m| m.source.as_str())
    }

    /// True when `target` is mapped from the dosage-instruction column, so its
    /// value must come from SIG interpretation rather than direct coercion.
    pub fn derived_from_sig(&self, target: UnifiedField) -> bool {
        target != UnifiedField::Sig
            && self.source_of(target).map(str::trim) == Some(self.sig_source.trim())
    }
}

const BUILTIN_DOCS: [(&str, &str); 6] = [
    (ClinicId::HOMETOWN, include_str!("../../formats/hometown.toml")),
    (ClinicId::PROVIDENCE, include_str!("../../formats/providence.toml")),
    (ClinicId::SEAPORT, include_str!("../../formats/seaport.toml")),
    (ClinicId::ST_MARYS, include_str!("../../formats/st_marys.toml")),
    (ClinicId::SYRINGA, include_str!("../../formats/syringa.toml")),
    (ClinicId::WINTERPORT, include_str!("../../formats/winterport.toml")),
];

/// Set of format specs keyed by clinic id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FormatRegistry {
    specs: BTreeMap<ClinicId, ClinicFormatSpec>,
}

impl FormatRegistry {
    /// The six formats shipped with the crate.
    pub fn builtin() -> &'static FormatRegistry {
        static REGISTRY: OnceLock<FormatRegistry> = OnceLock::new();
        REGISTRY.get_or_init(|| {
            let mut reg = FormatRegistry::default();
            for (id, doc) in BUILTIN_DOCS {
                let spec = ClinicFormatSpec::from_toml(doc)
                    .unwrap_or_else(|e| panic!("built-in format `{id}` is invalid: {e}"));
                assert_eq!(spec.clinic.as_str(), id);
                reg.insert(spec);
            }
            reg
        })
    }

    /// Loads every `*.toml` document in `dir`. Later files never silently
    /// replace earlier ones: a clinic id defined twice is an error.
    pub fn from_dir(dir: &Path) -> Result<FormatRegistry> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths: Vec<_> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "toml"))
            .collect();
        paths.sort();
        let mut reg = FormatRegistry::default();
        for path in paths {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let spec = ClinicFormatSpec::from_toml(&text).map_err(|e| Error::parse(&path, e))?;
            if reg.specs.contains_key(&spec.clinic) {
                return Err(Error::parse(&path, format!("clinic `{}` defined twice", spec.clinic)));
            }
            reg.insert(spec);
        }
        Ok(reg)
    }

    /// Writes one document per clinic into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for spec in self.specs.values() {
            let path = dir.join(format!("{}.toml", spec.clinic));
            std::fs::write(&path, spec.to_toml()).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn insert(&mut self, spec: ClinicFormatSpec) {
        self.specs.insert(spec.clinic.clone(), spec);
    }

    pub fn get(&self, clinic: &ClinicId) -> Result<&ClinicFormatSpec> {
        self.specs
            .get(clinic)
            .ok_or_else(|| Error::UnsupportedFormat(clinic.to_string()))
    }

    pub fn clinics(&self) -> impl Iterator<Item = &ClinicId> {
        self.specs.keys()
    }

    pub fn specs(&self) -> impl Iterator<Item = &ClinicFormatSpec> {
        self.specs.values()
    }
}

/// Looks up a built-in format by id.
pub fn load_format_spec(clinic_id: &str) -> Result<&'static ClinicFormatSpec> {
    let id = ClinicId::new(clinic_id).map_err(|_| Error::UnsupportedFormat(clinic_id.to_string()))?;
    FormatRegistry::builtin().get(&id)
}
