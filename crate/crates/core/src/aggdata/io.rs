//! CSV ingestion and serialization.
//!
//! effects:  `trial,covariate,level,estimate,se,events1,n1,events0,n0`
//! moments:  `trial,covariate,statistic,value,n` with statistic ∈
//!           {mean, proportion, sd, second_moment}
//! samples:  one column per schema covariate, optional `Y`

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::counts::{risk_difference_from_counts, risk_ratio_from_counts, ArmCounts};
use super::schema::CovariateSchema;
use super::{
    CovariateSample, DataError, EffectEstimate, EffectTarget, MetaDataset, MomentSpec, MomentSummary, SampleRole,
    TrialData,
};

/// Scale of reported effects and of effects derived from counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EffectScale {
    #[default]
    Difference,
    Ratio,
}

fn open(path: &Path) -> Result<File, DataError> {
    File::open(path).map_err(|e| DataError::Io { path: path.display().to_string(), reason: e.to_string() })
}

/// Load and validate a dataset from the three input files.
pub fn load_meta_dataset(
    effects_path: &Path,
    moments_path: &Path,
    schema_path: &Path,
    scale: EffectScale,
) -> Result<MetaDataset, DataError> {
    let mut text = String::new();
    open(schema_path)?
        .read_to_string(&mut text)
        .map_err(|e| DataError::Io { path: schema_path.display().to_string(), reason: e.to_string() })?;
    let schema = CovariateSchema::from_toml_str(&text)?;
    read_meta_dataset(open(effects_path)?, open(moments_path)?, schema, scale)
}

struct Columns {
    index: HashMap<String, usize>,
}

impl Columns {
    fn new(headers: &csv::StringRecord) -> Self {
        let index = headers.iter().enumerate().map(|(i, h)| (h.trim().to_ascii_lowercase(), i)).collect();
        Columns { index }
    }

    fn require(&self, name: &str) -> Result<usize, DataError> {
        self.index.get(name).copied().ok_or_else(|| DataError::Csv(format!("missing column `{name}`")))
    }

    fn get<'r>(&self, rec: &'r csv::StringRecord, name: &str) -> &'r str {
        self.index.get(name).and_then(|&i| rec.get(i)).map(str::trim).unwrap_or("")
    }
}

fn parse_f64(field: &str, raw: &str) -> Result<f64, DataError> {
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| DataError::NonNumeric { field: field.into(), value: raw.into() })
}

fn parse_u64(field: &str, raw: &str) -> Result<u64, DataError> {
    raw.parse::<u64>().map_err(|_| DataError::NonNumeric { field: field.into(), value: raw.into() })
}

/// Unit of the last printed decimal place (`"-0.032"` → 0.001).
fn rounding_unit(raw: &str) -> f64 {
    let mantissa = raw.split(['e', 'E']).next().unwrap_or(raw);
    let decimals = mantissa.split('.').nth(1).map(|d| d.len()).unwrap_or(0);
    10f64.powi(-(decimals as i32))
}

fn is_marginal_label(level: &str) -> bool {
    matches!(level, "" | "-" | "—" | "overall" | "all")
}

/// Parse effects and moments from readers.
pub fn read_meta_dataset<E: Read, M: Read>(
    effects: E,
    moments: M,
    schema: CovariateSchema,
    scale: EffectScale,
) -> Result<MetaDataset, DataError> {
    let mut warnings = Vec::new();
    let mut order: Vec<String> = Vec::new();
    let mut by_trial: HashMap<String, TrialData> = HashMap::new();

    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(effects);
    let cols = Columns::new(rdr.headers().map_err(|e| DataError::Csv(e.to_string()))?);
    for name in ["trial", "covariate", "level", "estimate", "se"] {
        cols.require(name)?;
    }
    for rec in rdr.records() {
        let rec = rec.map_err(|e| DataError::Csv(e.to_string()))?;
        let trial = cols.get(&rec, "trial").to_string();
        if trial.is_empty() {
            return Err(DataError::Csv("effect row without trial id".into()));
        }
        let cov = cols.get(&rec, "covariate");
        let level = cols.get(&rec, "level");
        let target = if cov.is_empty() || cov.eq_ignore_ascii_case("overall") {
            if !is_marginal_label(level) {
                return Err(DataError::Csv(format!("marginal row of `{trial}` carries level `{level}`")));
            }
            EffectTarget::Marginal
        } else {
            let k = schema.index_of(cov)?;
            EffectTarget::Subgroup { covariate: k, stratum: schema.resolve_stratum(&trial, k, level)? }
        };

        let count_fields = ["events1", "n1", "events0", "n0"].map(|c| cols.get(&rec, c));
        let counts = if count_fields.iter().all(|f| f.is_empty()) {
            None
        } else if count_fields.iter().any(|f| f.is_empty()) {
            return Err(DataError::InvalidCount(format!("partial count columns for trial `{trial}`")));
        } else {
            Some(ArmCounts {
                events1: parse_u64("events1", count_fields[0])?,
                n1: parse_u64("n1", count_fields[1])?,
                events0: parse_u64("events0", count_fields[2])?,
                n0: parse_u64("n0", count_fields[3])?,
            })
        };
        let derived = counts
            .map(|c| match scale {
                EffectScale::Difference => risk_difference_from_counts(c.events1, c.n1, c.events0, c.n0),
                EffectScale::Ratio => risk_ratio_from_counts(c.events1, c.n1, c.events0, c.n0),
            })
            .transpose()?;

        let est_raw = cols.get(&rec, "estimate");
        let se_raw = cols.get(&rec, "se");
        let (estimate, se) = match (est_raw.is_empty(), se_raw.is_empty(), derived) {
            (false, false, d) => {
                let est = parse_f64("estimate", est_raw)?;
                let se = parse_f64("se", se_raw)?;
                if let Some((de, dse)) = d {
                    for (what, given, raw, computed) in [("estimate", est, est_raw, de), ("se", se, se_raw, dse)] {
                        let unit = rounding_unit(raw);
                        if (given - computed).abs() > 2.0 * unit {
                            let msg = format!(
                                "trial `{trial}` {cov}{sep}{level}: reported {what} {given} differs from counts ({computed:.5}) by more than two rounding units",
                                sep = if cov.is_empty() { "" } else { "=" },
                            );
                            log::warn!("{msg}");
                            warnings.push(msg);
                        }
                    }
                }
                (est, se)
            }
            (_, _, Some((de, dse))) => {
                let est = if est_raw.is_empty() { de } else { parse_f64("estimate", est_raw)? };
                let se = if se_raw.is_empty() { dse } else { parse_f64("se", se_raw)? };
                (est, se)
            }
            _ => return Err(DataError::InvalidEffect { trial, reason: "no estimate/se and no counts".into() }),
        };

        let entry = by_trial.entry(trial.clone()).or_insert_with(|| {
            order.push(trial.clone());
            TrialData { id: trial.clone(), n: 0, effects: Vec::new(), moments: Vec::new() }
        });
        if entry.effects.iter().any(|e| e.target == target) {
            return Err(DataError::DuplicateEffect { trial, what: format!("{cov}={level}") });
        }
        entry.effects.push(EffectEstimate { trial, target, estimate, se, counts });
    }

    // moments
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(moments);
    let cols = Columns::new(rdr.headers().map_err(|e| DataError::Csv(e.to_string()))?);
    for name in ["trial", "covariate", "statistic", "value", "n"] {
        cols.require(name)?;
    }
    // (trial, covariate, sd, n) awaiting conversion
    let mut sds: Vec<(String, usize, usize, f64, u64)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| DataError::Csv(e.to_string()))?;
        let trial = cols.get(&rec, "trial").to_string();
        let t = by_trial.get_mut(&trial).ok_or_else(|| DataError::NoMarginalEffect(trial.clone()))?;
        let cov_field = cols.get(&rec, "covariate");
        let stat = cols.get(&rec, "statistic").to_ascii_lowercase();
        let value = parse_f64("value", cols.get(&rec, "value"))?;
        let n = parse_u64("n", cols.get(&rec, "n"))?;
        if n == 0 {
            return Err(DataError::InvalidMoment { trial, reason: "n must be positive".into() });
        }
        t.n = t.n.max(n);
        let (name, level) = match cov_field.split_once('=') {
            Some((a, b)) => (a.trim(), Some(b.trim())),
            None => (cov_field, None),
        };
        let k = schema.index_of(name)?;
        let cov = schema.covariate(k);
        let spec = match (stat.as_str(), level) {
            ("mean", None) => MomentSpec::Mean(k),
            ("proportion", lvl) => {
                if !cov.is_discrete() {
                    return Err(DataError::InvalidMoment {
                        trial,
                        reason: format!("proportion of continuous covariate `{name}`"),
                    });
                }
                let label = lvl.unwrap_or("yes");
                let code = cov
                    .level_code(label)
                    .ok_or_else(|| DataError::UnknownLevel { covariate: name.into(), level: label.into() })?;
                MomentSpec::Proportion { covariate: k, level: code }
            }
            ("second_moment", None) => MomentSpec::SecondMoment(k),
            ("sd", None) => {
                if value < 0.0 {
                    return Err(DataError::InvalidMoment { trial, reason: format!("negative sd {value}") });
                }
                let pos = t.moments.len();
                // placeholder, replaced below once the mean is known
                t.moments.push(MomentSummary { trial: trial.clone(), spec: MomentSpec::SecondMoment(k), value: f64::NAN, n });
                sds.push((trial, k, pos, value, n));
                continue;
            }
            (other, _) => {
                return Err(DataError::InvalidMoment { trial, reason: format!("unknown statistic `{other}` for `{cov_field}`") })
            }
        };
        t.moments.push(MomentSummary { trial, spec, value, n });
    }
    for (trial, k, pos, sd, n) in sds {
        let t = by_trial.get_mut(&trial).expect("trial registered");
        let mean = t
            .moments
            .iter()
            .find(|m| m.spec == MomentSpec::Mean(k))
            .map(|m| m.value)
            .ok_or_else(|| DataError::InvalidMoment {
                trial: trial.clone(),
                reason: format!("sd of `{}` reported without its mean", schema.covariate(k).name),
            })?;
        t.moments[pos].value = sd_to_second_moment(sd, mean, n);
    }

    let mut trials = Vec::with_capacity(order.len());
    for id in order {
        let mut t = by_trial.remove(&id).expect("ordered id present");
        if t.n == 0 {
            t.n = t
                .effects
                .iter()
                .find(|e| e.is_marginal())
                .and_then(|e| e.counts)
                .map(|c| c.total())
                .ok_or_else(|| DataError::UnknownTrialSize(id.clone()))?;
        }
        trials.push(t);
    }
    let mut ds = MetaDataset::new(schema, trials)?;
    ds.warnings = warnings;
    Ok(ds)
}

/// Second moment from a sample SD under the population-variance convention:
/// `m2 = sd²·(n − 1)/n + mean²`.
pub fn sd_to_second_moment(sd: f64, mean: f64, n: u64) -> f64 {
    let n = n as f64;
    let factor = if n > 1.0 { (n - 1.0) / n } else { 1.0 };
    sd * sd * factor + mean * mean
}

fn second_moment_to_sd(m2: f64, mean: f64, n: u64) -> f64 {
    let n = n as f64;
    let factor = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
    ((m2 - mean * mean).max(0.0) * factor).sqrt()
}

pub fn write_effects_csv<W: Write>(ds: &MetaDataset, w: W) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(w);
    let err = |e: csv::Error| DataError::Csv(e.to_string());
    wtr.write_record(["trial", "covariate", "level", "estimate", "se", "events1", "n1", "events0", "n0"])
        .map_err(err)?;
    for t in &ds.trials {
        for e in &t.effects {
            let (cov, level) = match e.target {
                EffectTarget::Marginal => (String::new(), String::new()),
                EffectTarget::Subgroup { covariate, stratum } => (
                    ds.schema.covariate(covariate).name.clone(),
                    ds.schema.strata_for(&t.id, covariate).map(|s| s[stratum].label.clone()).unwrap_or_default(),
                ),
            };
            let c = e.counts.map(|c| [c.events1, c.n1, c.events0, c.n0].map(|v| v.to_string()));
            let c = c.unwrap_or_else(|| [String::new(), String::new(), String::new(), String::new()]);
            wtr.write_record([
                t.id.as_str(),
                &cov,
                &level,
                &e.estimate.to_string(),
                &e.se.to_string(),
                &c[0],
                &c[1],
                &c[2],
                &c[3],
            ])
            .map_err(err)?;
        }
    }
    wtr.flush().map_err(|e| DataError::Csv(e.to_string()))
}

pub fn write_moments_csv<W: Write>(ds: &MetaDataset, w: W) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(w);
    let err = |e: csv::Error| DataError::Csv(e.to_string());
    wtr.write_record(["trial", "covariate", "statistic", "value", "n"]).map_err(err)?;
    for t in &ds.trials {
        for m in &t.moments {
            let (cov, stat, value) = match m.spec {
                MomentSpec::Mean(k) => (ds.schema.covariate(k).name.clone(), "mean", m.value),
                MomentSpec::Proportion { covariate, level } => {
                    let c = ds.schema.covariate(covariate);
                    let lvl = c.levels().map(|l| l[level].clone()).unwrap_or_default();
                    (format!("{}={}", c.name, lvl), "proportion", m.value)
                }
                MomentSpec::SecondMoment(k) => {
                    let name = ds.schema.covariate(k).name.clone();
                    match t.moments.iter().find(|o| o.spec == MomentSpec::Mean(k)) {
                        Some(mean) => (name, "sd", second_moment_to_sd(m.value, mean.value, m.n)),
                        None => (name, "second_moment", m.value),
                    }
                }
            };
            wtr.write_record([t.id.as_str(), &cov, stat, &value.to_string(), &m.n.to_string()])
                .map_err(err)?;
        }
    }
    wtr.flush().map_err(|e| DataError::Csv(e.to_string()))
}

/// Load a covariate sample whose header names match the schema (any order;
/// an optional `Y` column is read as the outcome).
pub fn load_covariate_sample(path: &Path, schema: &CovariateSchema, role: SampleRole) -> Result<CovariateSample, DataError> {
    read_covariate_sample(open(path)?, schema, role)
}

pub fn read_covariate_sample<R: Read>(r: R, schema: &CovariateSchema, role: SampleRole) -> Result<CovariateSample, DataError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let headers = rdr.headers().map_err(|e| DataError::Csv(e.to_string()))?.clone();
    let mut positions = vec![usize::MAX; schema.len()];
    let mut y_col = None;
    for (i, h) in headers.iter().enumerate() {
        if h == "Y" || h == "y" {
            y_col = Some(i);
            continue;
        }
        let k = schema.index_of(h)?;
        if positions[k] != usize::MAX {
            return Err(DataError::Csv(format!("column `{h}` appears twice")));
        }
        positions[k] = i;
    }
    if let Some(k) = positions.iter().position(|&p| p == usize::MAX) {
        return Err(DataError::Csv(format!("missing column `{}`", schema.covariate(k).name)));
    }
    let mut data = Vec::new();
    let mut y = y_col.map(|_| Vec::new());
    for rec in rdr.records() {
        let rec = rec.map_err(|e| DataError::Csv(e.to_string()))?;
        for (k, &p) in positions.iter().enumerate() {
            data.push(schema.covariate(k).parse_value(rec.get(p).unwrap_or(""))?);
        }
        if let (Some(col), Some(ys)) = (y_col, y.as_mut()) {
            let raw = rec.get(col).unwrap_or("").trim();
            if raw.is_empty() {
                return Err(DataError::MissingValue { column: "Y".into() });
            }
            ys.push(parse_f64("Y", raw)?);
        }
    }
    if data.is_empty() {
        return Err(DataError::Sample("no rows".into()));
    }
    let sample = CovariateSample::new(schema, data, role)?;
    match y {
        Some(ys) => sample.with_outcome(ys),
        None => Ok(sample),
    }
}

pub fn write_covariate_sample<W: Write>(sample: &CovariateSample, schema: &CovariateSchema, w: W) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(w);
    let err = |e: csv::Error| DataError::Csv(e.to_string());
    let mut header: Vec<String> = schema.covariates().iter().map(|c| c.name.clone()).collect();
    if sample.outcome.is_some() {
        header.push("Y".into());
    }
    wtr.write_record(&header).map_err(err)?;
    for (i, row) in sample.rows().enumerate() {
        let mut rec: Vec<String> = row.iter().enumerate().map(|(k, &v)| schema.covariate(k).format_value(v)).collect();
        if let Some(y) = &sample.outcome {
            rec.push(y[i].to_string());
        }
        wtr.write_record(&rec).map_err(err)?;
    }
    wtr.flush().map_err(|e| DataError::Csv(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggdata::{Covariate, Stratum, StratumRule};

    fn schema() -> CovariateSchema {
        let mut s = CovariateSchema::new(vec![Covariate::continuous("lvef"), Covariate::binary("prehhf")]).unwrap();
        s.add_subgroups(
            "A",
            "lvef",
            vec![
                Stratum { label: "<50".into(), rule: StratumRule::Interval { lower: None, upper: Some(50.0), right_closed: false } },
                Stratum { label: ">=50".into(), rule: StratumRule::Interval { lower: Some(50.0), upper: None, right_closed: false } },
            ],
        )
        .unwrap();
        s
    }

    const EFFECTS: &str = "trial,covariate,level,estimate,se,events1,n1,events0,n0
A,,,-0.032,0.009,415,2997,511,2991
A,lvef,<50,-0.05,0.02,,,,
A,prehhf,yes,,,157,699,192,670
";
    const MOMENTS: &str = "trial,covariate,statistic,value,n
A,lvef,mean,54.3,5988
A,lvef,sd,8.8,5988
A,prehhf,proportion,0.229,5988
";

    #[test]
    fn reads_and_converts_sd() {
        let ds = read_meta_dataset(EFFECTS.as_bytes(), MOMENTS.as_bytes(), schema(), EffectScale::Difference).unwrap();
        assert_eq!(ds.total_effects(), 3);
        let t = &ds.trials[0];
        assert_eq!(t.n, 5988);
        let m2 = t.moments[1].value;
        let expect = 8.8f64.powi(2) * 5987.0 / 5988.0 + 54.3f64.powi(2);
        assert!((m2 - expect).abs() < 1e-9);
        // derived from counts
        assert!((t.effects[2].estimate - (157.0 / 699.0 - 192.0 / 670.0)).abs() < 1e-15);
        assert!(ds.warnings.is_empty());
    }

    #[test]
    fn inconsistent_estimate_warns() {
        let eff = "trial,covariate,level,estimate,se,events1,n1,events0,n0\nA,,,-0.050,0.009,415,2997,511,2991\n";
        let ds = read_meta_dataset(eff.as_bytes(), MOMENTS.as_bytes(), schema(), EffectScale::Difference).unwrap();
        assert_eq!(ds.warnings.len(), 1);
        assert_eq!(ds.trials[0].effects[0].estimate, -0.05);
    }

    #[test]
    fn empty_effects_file_has_no_marginal() {
        let eff = "trial,covariate,level,estimate,se\n";
        let err = read_meta_dataset(eff.as_bytes(), MOMENTS.as_bytes(), schema(), EffectScale::Difference).unwrap_err();
        assert!(err.to_string().contains("no marginal effect"), "{err}");
    }

    #[test]
    fn proportion_above_one_is_rejected() {
        let mom = "trial,covariate,statistic,value,n\nA,prehhf,proportion,1.2,100\n";
        assert!(read_meta_dataset(EFFECTS.as_bytes(), mom.as_bytes(), schema(), EffectScale::Difference).is_err());
    }

    #[test]
    fn duplicate_effect_rows_rejected() {
        let eff = "trial,covariate,level,estimate,se\nA,,,-0.03,0.01\nA,prehhf,yes,-0.03,0.01\nA,prehhf,1,-0.03,0.01\n";
        let err = read_meta_dataset(eff.as_bytes(), MOMENTS.as_bytes(), schema(), EffectScale::Difference).unwrap_err();
        assert!(matches!(err, DataError::DuplicateEffect { .. }), "{err}");
    }

    #[test]
    fn unknown_level_and_non_numeric() {
        let eff = "trial,covariate,level,estimate,se\nA,,,-0.03,0.01\nA,prehhf,maybe,-0.03,0.01\n";
        assert!(read_meta_dataset(eff.as_bytes(), MOMENTS.as_bytes(), schema(), EffectScale::Difference).is_err());
        let eff = "trial,covariate,level,estimate,se\nA,,,abc,0.01\n";
        let err = read_meta_dataset(eff.as_bytes(), MOMENTS.as_bytes(), schema(), EffectScale::Difference).unwrap_err();
        assert!(matches!(err, DataError::NonNumeric { .. }));
    }

    #[test]
    fn sample_with_unlisted_level_fails() {
        let s = schema();
        let ok = "lvef,prehhf\n40,yes\n55.5,0\n";
        let sample = read_covariate_sample(ok.as_bytes(), &s, SampleRole::Target).unwrap();
        assert_eq!(sample.n_rows(), 2);
        assert_eq!(sample.row(0), &[40.0, 1.0]);
        let bad = "lvef,prehhf\n40,perhaps\n";
        assert!(read_covariate_sample(bad.as_bytes(), &s, SampleRole::Target).is_err());
        let missing = "lvef,prehhf\n,1\n";
        assert!(matches!(
            read_covariate_sample(missing.as_bytes(), &s, SampleRole::Target),
            Err(DataError::MissingValue { .. })
        ));
    }

    #[test]
    fn rounding_units() {
        assert_eq!(rounding_unit("-0.032"), 0.001);
        assert_eq!(rounding_unit("12"), 1.0);
    }
}
