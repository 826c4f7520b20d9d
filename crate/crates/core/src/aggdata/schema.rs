use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::DataError;

/// Kind of a baseline covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CovariateKind {
    /// Coded 0 (`no`) / 1 (`yes`).
    Binary,
    /// Coded by level index into `levels`.
    Categorical { levels: Vec<String> },
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariate {
    pub name: String,
    pub kind: CovariateKind,
}

impl Covariate {
    pub fn binary(name: &str) -> Self {
        Covariate { name: name.to_string(), kind: CovariateKind::Binary }
    }

    pub fn continuous(name: &str) -> Self {
        Covariate { name: name.to_string(), kind: CovariateKind::Continuous }
    }

    pub fn categorical(name: &str, levels: &[&str]) -> Self {
        Covariate {
            name: name.to_string(),
            kind: CovariateKind::Categorical { levels: levels.iter().map(|s| s.to_string()).collect() },
        }
    }

    pub fn is_discrete(&self) -> bool {
        !matches!(self.kind, CovariateKind::Continuous)
    }

    /// Level labels for discrete covariates (`["no", "yes"]` for binary).
    pub fn levels(&self) -> Option<Vec<String>> {
        match &self.kind {
            CovariateKind::Binary => Some(vec!["no".into(), "yes".into()]),
            CovariateKind::Categorical { levels } => Some(levels.clone()),
            CovariateKind::Continuous => None,
        }
    }

    /// Resolve a level label to its numeric code.
    pub fn level_code(&self, label: &str) -> Option<usize> {
        match &self.kind {
            CovariateKind::Binary => match label.trim().to_ascii_lowercase().as_str() {
                "1" | "yes" | "true" | "y" => Some(1),
                "0" | "no" | "false" | "n" => Some(0),
                _ => None,
            },
            CovariateKind::Categorical { levels } => levels.iter().position(|l| l == label.trim()),
            CovariateKind::Continuous => None,
        }
    }

    /// Parse one cell of a covariate sample.
    pub fn parse_value(&self, raw: &str) -> Result<f64, DataError> {
        let raw = raw.trim();
        if raw.is_empty() || raw.eq_ignore_ascii_case("na") || raw.eq_ignore_ascii_case("nan") {
            return Err(DataError::MissingValue { column: self.name.clone() });
        }
        match &self.kind {
            CovariateKind::Continuous => raw
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| DataError::NonNumeric { field: self.name.clone(), value: raw.to_string() }),
            _ => self
                .level_code(raw)
                .map(|c| c as f64)
                .ok_or_else(|| DataError::UnknownLevel { covariate: self.name.clone(), level: raw.to_string() }),
        }
    }

    /// Render a coded value back to its textual form.
    pub fn format_value(&self, v: f64) -> String {
        match &self.kind {
            CovariateKind::Continuous => format!("{v}"),
            CovariateKind::Binary => format!("{}", v as i64),
            CovariateKind::Categorical { levels } => levels[v as usize].clone(),
        }
    }
}

/// Membership rule of a reported subgroup stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StratumRule {
    /// Discrete level code.
    Level(usize),
    /// Interval on a continuous covariate. Half-open `[lower, upper)` unless
    /// `right_closed`, in which case `(lower, upper]`. Missing bounds are
    /// infinite.
    Interval { lower: Option<f64>, upper: Option<f64>, right_closed: bool },
}

impl StratumRule {
    #[inline]
    pub fn contains(&self, value: f64) -> bool {
        match *self {
            StratumRule::Level(code) => value as usize == code && value >= 0.0,
            StratumRule::Interval { lower, upper, right_closed } => {
                let lo_ok = match lower {
                    None => true,
                    Some(l) if right_closed => value > l,
                    Some(l) => value >= l,
                };
                let hi_ok = match upper {
                    None => true,
                    Some(u) if right_closed => value <= u,
                    Some(u) => value < u,
                };
                lo_ok && hi_ok
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub label: String,
    pub rule: StratumRule,
}

/// Wildcard trial id for subgroup definitions shared by every trial.
pub const ANY_TRIAL: &str = "*";

/// Covariates plus the per-trial definitions of the strata used in subgroup
/// reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSchema {
    covariates: Vec<Covariate>,
    /// (trial id or `*`, covariate index) → strata
    #[serde(with = "subgroup_entries")]
    subgroups: BTreeMap<(String, usize), Vec<Stratum>>,
}

/// Serialize the subgroup map as a list of entries, since JSON map keys must
/// be strings.
mod subgroup_entries {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::Stratum;

    #[derive(Serialize, Deserialize)]
    struct Entry {
        trial: String,
        covariate: usize,
        strata: Vec<Stratum>,
    }

    pub fn serialize<S: Serializer>(map: &BTreeMap<(String, usize), Vec<Stratum>>, s: S) -> Result<S::Ok, S::Error> {
        let entries: Vec<Entry> = map
            .iter()
            .map(|((trial, covariate), strata)| Entry { trial: trial.clone(), covariate: *covariate, strata: strata.clone() })
            .collect();
        entries.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<(String, usize), Vec<Stratum>>, D::Error> {
        Ok(Vec::<Entry>::deserialize(d)?.into_iter().map(|e| ((e.trial, e.covariate), e.strata)).collect())
    }
}

impl CovariateSchema {
    pub fn new(covariates: Vec<Covariate>) -> Result<Self, DataError> {
        let mut seen = HashSet::new();
        for c in &covariates {
            if c.name.trim().is_empty() {
                return Err(DataError::Schema("empty covariate name".into()));
            }
            if !seen.insert(c.name.clone()) {
                return Err(DataError::Schema(format!("duplicate covariate name `{}`", c.name)));
            }
            if let CovariateKind::Categorical { levels } = &c.kind {
                if levels.len() < 2 {
                    return Err(DataError::Schema(format!("categorical `{}` needs at least two levels", c.name)));
                }
                let mut lv = HashSet::new();
                for l in levels {
                    if !lv.insert(l) {
                        return Err(DataError::Schema(format!("duplicate level `{l}` in `{}`", c.name)));
                    }
                }
            }
        }
        Ok(CovariateSchema { covariates, subgroups: BTreeMap::new() })
    }

    /// Register the strata a trial (or `*` for all trials) uses when
    /// reporting subgroups of `covariate`.
    pub fn add_subgroups(&mut self, trial: &str, covariate: &str, strata: Vec<Stratum>) -> Result<(), DataError> {
        let k = self.index_of(covariate)?;
        let mut labels = HashSet::new();
        for s in &strata {
            if !labels.insert(s.label.clone()) {
                return Err(DataError::Schema(format!(
                    "duplicate stratum label `{}` for `{covariate}` in trial `{trial}`",
                    s.label
                )));
            }
            match (&s.rule, &self.covariates[k].kind) {
                (StratumRule::Interval { .. }, CovariateKind::Continuous) => {}
                (StratumRule::Level(code), kind) if !matches!(kind, CovariateKind::Continuous) => {
                    let n = self.covariates[k].levels().map(|l| l.len()).unwrap_or(0);
                    if *code >= n {
                        return Err(DataError::UnknownLevel { covariate: covariate.into(), level: s.label.clone() });
                    }
                }
                _ => {
                    return Err(DataError::Schema(format!(
                        "stratum `{}` of `{covariate}` does not fit the covariate kind",
                        s.label
                    )))
                }
            }
        }
        self.subgroups.insert((trial.to_string(), k), strata);
        Ok(())
    }

    pub fn covariates(&self) -> &[Covariate] {
        &self.covariates
    }

    pub fn len(&self) -> usize {
        self.covariates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.covariates.is_empty()
    }

    pub fn covariate(&self, k: usize) -> &Covariate {
        &self.covariates[k]
    }

    pub fn index_of(&self, name: &str) -> Result<usize, DataError> {
        self.covariates
            .iter()
            .position(|c| c.name == name.trim())
            .ok_or_else(|| DataError::UnknownCovariate(name.trim().to_string()))
    }

    /// Explicitly registered subgroup definitions, keyed by (trial, covariate index).
    pub fn subgroup_defs(&self) -> &BTreeMap<(String, usize), Vec<Stratum>> {
        &self.subgroups
    }

    /// Strata of `covariate` in `trial`: explicit trial entry, then the `*`
    /// entry, then (discrete covariates only) one stratum per level.
    pub fn strata_for(&self, trial: &str, k: usize) -> Option<Vec<Stratum>> {
        if let Some(s) = self.subgroups.get(&(trial.to_string(), k)) {
            return Some(s.clone());
        }
        if let Some(s) = self.subgroups.get(&(ANY_TRIAL.to_string(), k)) {
            return Some(s.clone());
        }
        self.covariates[k].levels().map(|levels| {
            levels
                .into_iter()
                .enumerate()
                .map(|(code, label)| Stratum { label, rule: StratumRule::Level(code) })
                .collect()
        })
    }

    /// Resolve a stratum label reported by `trial` for covariate `k` to its
    /// position within [`strata_for`](Self::strata_for).
    pub fn resolve_stratum(&self, trial: &str, k: usize, label: &str) -> Result<usize, DataError> {
        let cov = &self.covariates[k];
        let strata = self.strata_for(trial, k).ok_or_else(|| DataError::UnresolvedStratum {
            trial: trial.into(),
            covariate: cov.name.clone(),
            label: label.into(),
        })?;
        let label = label.trim();
        let matches: Vec<usize> = strata
            .iter()
            .enumerate()
            .filter(|(_, s)| {
                s.label == label
                    || match (&s.rule, cov.is_discrete()) {
                        (StratumRule::Level(code), true) => cov.level_code(label) == Some(*code),
                        _ => false,
                    }
            })
            .map(|(i, _)| i)
            .collect();
        match matches.as_slice() {
            [one] => Ok(*one),
            _ => Err(DataError::UnresolvedStratum { trial: trial.into(), covariate: cov.name.clone(), label: label.into() }),
        }
    }

    /// Parse the TOML schema format documented in the README.
    pub fn from_toml_str(text: &str) -> Result<Self, DataError> {
        let file: SchemaFile = toml::from_str(text).map_err(|e| DataError::Schema(e.to_string()))?;
        let covariates = file
            .covariate
            .into_iter()
            .map(|c| {
                let kind = match c.kind.as_str() {
                    "binary" => CovariateKind::Binary,
                    "continuous" => CovariateKind::Continuous,
                    "categorical" => CovariateKind::Categorical {
                        levels: c.levels.ok_or_else(|| {
                            DataError::Schema(format!("categorical `{}` must list `levels`", c.name))
                        })?,
                    },
                    other => return Err(DataError::Schema(format!("unknown covariate kind `{other}`"))),
                };
                Ok(Covariate { name: c.name, kind })
            })
            .collect::<Result<Vec<_>, DataError>>()?;
        let mut schema = CovariateSchema::new(covariates)?;
        for sg in file.subgroup {
            let k = schema.index_of(&sg.covariate)?;
            let cov = schema.covariates[k].clone();
            let strata = sg
                .strata
                .into_iter()
                .map(|s| {
                    let rule = if cov.is_discrete() {
                        let label = s.level.as_deref().unwrap_or(&s.label);
                        StratumRule::Level(cov.level_code(label).ok_or_else(|| DataError::UnknownLevel {
                            covariate: cov.name.clone(),
                            level: label.to_string(),
                        })?)
                    } else {
                        let right_closed = match s.closed.as_deref() {
                            None | Some("left") => false,
                            Some("right") => true,
                            Some(o) => return Err(DataError::Schema(format!("`closed` must be left|right, got `{o}`"))),
                        };
                        StratumRule::Interval { lower: s.lower, upper: s.upper, right_closed }
                    };
                    Ok(Stratum { label: s.label, rule })
                })
                .collect::<Result<Vec<_>, DataError>>()?;
            schema.add_subgroups(&sg.trial, &sg.covariate, strata)?;
        }
        Ok(schema)
    }

    pub fn to_toml_string(&self) -> String {
        let covariate = self
            .covariates
            .iter()
            .map(|c| CovariateEntry {
                name: c.name.clone(),
                kind: match c.kind {
                    CovariateKind::Binary => "binary".into(),
                    CovariateKind::Continuous => "continuous".into(),
                    CovariateKind::Categorical { .. } => "categorical".into(),
                },
                levels: match &c.kind {
                    CovariateKind::Categorical { levels } => Some(levels.clone()),
                    _ => None,
                },
            })
            .collect();
        let subgroup = self
            .subgroups
            .iter()
            .map(|((trial, k), strata)| SubgroupEntry {
                trial: trial.clone(),
                covariate: self.covariates[*k].name.clone(),
                strata: strata
                    .iter()
                    .map(|s| match &s.rule {
                        StratumRule::Level(code) => StratumEntry {
                            label: s.label.clone(),
                            level: self.covariates[*k].levels().map(|l| l[*code].clone()),
                            lower: None,
                            upper: None,
                            closed: None,
                        },
                        StratumRule::Interval { lower, upper, right_closed } => StratumEntry {
                            label: s.label.clone(),
                            level: None,
                            lower: *lower,
                            upper: *upper,
                            closed: Some(if *right_closed { "right".into() } else { "left".into() }),
                        },
                    })
                    .collect(),
            })
            .collect();
        toml::to_string(&SchemaFile { covariate, subgroup }).expect("schema serializes")
    }
}

#[derive(Serialize, Deserialize)]
struct SchemaFile {
    #[serde(default)]
    covariate: Vec<CovariateEntry>,
    #[serde(default)]
    subgroup: Vec<SubgroupEntry>,
}

#[derive(Serialize, Deserialize)]
struct CovariateEntry {
    name: String,
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    levels: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct SubgroupEntry {
    trial: String,
    covariate: String,
    strata: Vec<StratumEntry>,
}

#[derive(Serialize, Deserialize)]
struct StratumEntry {
    label: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    level: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lower: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    upper: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    closed: Option<String>,
}
