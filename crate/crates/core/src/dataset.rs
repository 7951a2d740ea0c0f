//! Coded study dataset: CSV ingestion, validation, factor mapping and the
//! minimum-k inclusion rule.
//!
//! The dataset file is a UTF-8 CSV with a fixed header
//! (see [`DATASET_HEADER`]). Lines starting with `#` are comments. The mapping
//! file is a two-column table `canonical_factor,raw_name`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transforms;

/// Column names of the dataset CSV, in order.
pub const DATASET_HEADER: [&str; 11] = [
    "study_id",
    "first_author",
    "year",
    "pub_type",
    "region",
    "region_class",
    "n",
    "male_pct",
    "raw_factor",
    "effect_value",
    "effect_metric",
];

/// Column names of the mapping table.
pub const MAPPING_HEADER: [&str; 2] = ["canonical_factor", "raw_name"];

/// Default inclusion cutoff: factors with fewer effects are dropped.
pub const DEFAULT_MIN_K: usize = 3;

/// The eight canonical factors effects are merged into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Factor {
    PerformanceExpectancy,
    EffortExpectancy,
    SocialInfluence,
    Attitude,
    FacilitatingConditions,
    HedonicMotivation,
    PerceivedCost,
    Habit,
}

impl Factor {
    pub const ALL: [Factor; 8] = [
        Factor::PerformanceExpectancy,
        Factor::EffortExpectancy,
        Factor::SocialInfluence,
        Factor::Attitude,
        Factor::FacilitatingConditions,
        Factor::HedonicMotivation,
        Factor::PerceivedCost,
        Factor::Habit,
    ];

    /// Identifier used in files and reports, e.g. `PerformanceExpectancy`.
    pub fn name(self) -> &'static str {
        match self {
            Factor::PerformanceExpectancy => "PerformanceExpectancy",
            Factor::EffortExpectancy => "EffortExpectancy",
            Factor::SocialInfluence => "SocialInfluence",
            Factor::Attitude => "Attitude",
            Factor::FacilitatingConditions => "FacilitatingConditions",
            Factor::HedonicMotivation => "HedonicMotivation",
            Factor::PerceivedCost => "PerceivedCost",
            Factor::Habit => "Habit",
        }
    }

    /// Human-readable label, e.g. `Performance Expectancy`.
    pub fn label(self) -> &'static str {
        match self {
            Factor::PerformanceExpectancy => "Performance Expectancy",
            Factor::EffortExpectancy => "Effort Expectancy",
            Factor::SocialInfluence => "Social Influence",
            Factor::Attitude => "Attitude",
            Factor::FacilitatingConditions => "Facilitating Conditions",
            Factor::HedonicMotivation => "Hedonic Motivation",
            Factor::PerceivedCost => "Perceived Cost",
            Factor::Habit => "Habit",
        }
    }

    /// Lower snake case, used in file names.
    pub fn slug(self) -> &'static str {
        match self {
            Factor::PerformanceExpectancy => "performance_expectancy",
            Factor::EffortExpectancy => "effort_expectancy",
            Factor::SocialInfluence => "social_influence",
            Factor::Attitude => "attitude",
            Factor::FacilitatingConditions => "facilitating_conditions",
            Factor::HedonicMotivation => "hedonic_motivation",
            Factor::PerceivedCost => "perceived_cost",
            Factor::Habit => "habit",
        }
    }

    fn description(self) -> &'static str {
        match self {
            Factor::PerformanceExpectancy => {
                "expected gains in study outcomes from using the tool"
            }
            Factor::EffortExpectancy => "how easy the tool is to use",
            Factor::SocialInfluence => {
                "perceived expectations of peers, teachers and family about use"
            }
            Factor::Attitude => "overall evaluation of, and trust in, using the tool",
            Factor::FacilitatingConditions => {
                "available resources, support and control over using the tool"
            }
            Factor::HedonicMotivation => "enjoyment or intrinsic interest in using the tool",
            Factor::PerceivedCost => "expected time, money or effort spent on using the tool",
            Factor::Habit => "routine use built up from prior experience",
        }
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Factor {
    type Err = String;

    /// Accepts `PerformanceExpectancy`, `performance_expectancy`,
    /// `performance expectancy` and other case/separator variants.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        Factor::ALL
            .into_iter()
            .find(|f| f.name().to_ascii_lowercase() == key)
            .ok_or_else(|| format!("unknown factor `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PubType {
    Journal,
    Conference,
}

impl PubType {
    pub fn as_str(self) -> &'static str {
        match self {
            PubType::Journal => "journal",
            PubType::Conference => "conference",
        }
    }
}

impl FromStr for PubType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "journal" | "j" => Ok(PubType::Journal),
            "conference" | "c" => Ok(PubType::Conference),
            other => Err(format!("unknown pub_type `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionClass {
    Developed,
    Developing,
}

impl RegionClass {
    pub fn as_str(self) -> &'static str {
        match self {
            RegionClass::Developed => "developed",
            RegionClass::Developing => "developing",
        }
    }
}

impl fmt::Display for RegionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegionClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "developed" => Ok(RegionClass::Developed),
            "developing" => Ok(RegionClass::Developing),
            other => Err(format!("unknown region_class `{other}`")),
        }
    }
}

/// How `effect_value` is to be read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectMetric {
    CorrelationR,
    RegressionBeta,
}

impl EffectMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            EffectMetric::CorrelationR => "correlation_r",
            EffectMetric::RegressionBeta => "regression_beta",
        }
    }
}

impl FromStr for EffectMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "correlation_r" | "r" => Ok(EffectMetric::CorrelationR),
            "regression_beta" | "beta" => Ok(EffectMetric::RegressionBeta),
            other => Err(format!("unknown effect_metric `{other}`")),
        }
    }
}

/// Mapping status of one effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coding {
    /// Raw name not covered by the mapping table.
    Unmapped,
    /// Assigned to a retained canonical factor.
    Mapped(Factor),
    /// Assigned to a factor that has fewer than `min_k` effects.
    BelowCutoff(Factor),
}

/// One coded effect size.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyEffect {
    pub study_id: String,
    pub first_author: String,
    pub year: i32,
    pub pub_type: PubType,
    pub region: String,
    pub region_class: RegionClass,
    pub n: u32,
    /// Percentage of male participants, 0–100.
    pub male_pct: f64,
    /// Variable name as published.
    pub raw_factor: String,
    pub effect_value: f64,
    pub effect_metric: EffectMetric,
    pub coding: Coding,
}

impl StudyEffect {
    pub fn factor(&self) -> Option<Factor> {
        match self.coding {
            Coding::Mapped(f) => Some(f),
            _ => None,
        }
    }

    /// Effect expressed as a correlation.
    pub fn correlation(&self) -> Result<f64, transforms::TransformError> {
        match self.effect_metric {
            EffectMetric::CorrelationR => Ok(self.effect_value),
            EffectMetric::RegressionBeta => transforms::beta_to_r(self.effect_value),
        }
    }
}

/// Lower-cases, trims, folds typographic apostrophes and collapses inner
/// whitespace so that lookups ignore cosmetic differences.
pub fn normalize_name(raw: &str) -> String {
    raw.replace(['\u{2019}', '\u{2018}'], "'")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

#[derive(Debug, Error)]
pub enum MappingError {
    #[error("cannot read mapping {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("mapping line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("raw name `{raw}` maps to both {first} and {second}")]
    Conflict {
        raw: String,
        first: Factor,
        second: Factor,
    },
}

/// Raw variable name → canonical factor.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FactorMapping {
    by_raw: BTreeMap<String, Factor>,
}

impl FactorMapping {
    /// The built-in merge table.
    pub fn standard() -> Self {
        Self::parse_str(crate::fixture::MAPPING_CSV).expect("bundled mapping is valid")
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, MappingError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| MappingError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse_str(&text)
    }

    /// Parses `canonical_factor,raw_name` lines. A header line with exactly
    /// those names is optional; blank lines and `#` comments are skipped.
    pub fn parse_str(text: &str) -> Result<Self, MappingError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(text.trim_start_matches('\u{feff}').as_bytes());
        let mut mapping = FactorMapping::default();
        let mut seen_content = false;
        for record in reader.records() {
            let record = record.map_err(|e| MappingError::Malformed {
                line: e.position().map_or(0, |p| p.line() as usize),
                message: e.to_string(),
            })?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            if record.iter().all(str::is_empty) {
                continue;
            }
            if record.len() != 2 {
                return Err(MappingError::Malformed {
                    line,
                    message: "expected `canonical_factor,raw_name`".into(),
                });
            }
            let (factor_field, raw_field) = (&record[0], &record[1]);
            if !seen_content && [factor_field, raw_field] == MAPPING_HEADER {
                seen_content = true;
                continue;
            }
            seen_content = true;
            let factor = factor_field
                .parse::<Factor>()
                .map_err(|message| MappingError::Malformed { line, message })?;
            if raw_field.is_empty() {
                return Err(MappingError::Malformed {
                    line,
                    message: "empty raw_name".into(),
                });
            }
            mapping.insert(factor, raw_field)?;
        }
        Ok(mapping)
    }

    /// Adds a raw name. Re-adding the same pair is a no-op; assigning an
    /// existing name to a different factor is an error.
    pub fn insert(&mut self, factor: Factor, raw: &str) -> Result<(), MappingError> {
        let key = normalize_name(raw);
        match self.by_raw.get(&key) {
            Some(&existing) if existing != factor => Err(MappingError::Conflict {
                raw: key,
                first: existing,
                second: factor,
            }),
            _ => {
                self.by_raw.insert(key, factor);
                Ok(())
            }
        }
    }

    pub fn lookup(&self, raw: &str) -> Option<Factor> {
        self.by_raw.get(&normalize_name(raw)).copied()
    }

    /// Normalized raw names assigned to `factor`, sorted.
    pub fn raw_names(&self, factor: Factor) -> Vec<&str> {
        self.by_raw
            .iter()
            .filter(|(_, &f)| f == factor)
            .map(|(raw, _)| raw.as_str())
            .collect()
    }

    pub fn description(&self, factor: Factor) -> &'static str {
        factor.description()
    }

    /// Factors with at least one raw name.
    pub fn factors(&self) -> BTreeSet<Factor> {
        self.by_raw.values().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.by_raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_raw.is_empty()
    }

    /// Serializes back to the two-column table format.
    pub fn to_csv(&self) -> String {
        let mut writer = csv_writer(csv::QuoteStyle::Necessary);
        writer.write_record(MAPPING_HEADER).expect("in-memory write");
        for factor in Factor::ALL {
            for raw in self.raw_names(factor) {
                writer
                    .write_record([factor.name(), raw])
                    .expect("in-memory write");
            }
        }
        finish_csv(writer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticKind {
    Parse,
    Validation,
}

/// One problem found in the dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowDiagnostic {
    pub kind: DiagnosticKind,
    /// 1-based line in the file.
    pub line: u64,
    /// 1-based data row (comments and header excluded).
    pub row: usize,
    pub study_id: Option<String>,
    pub message: String,
}

impl fmt::Display for RowDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            DiagnosticKind::Parse => "parse error",
            DiagnosticKind::Validation => "validation error",
        };
        write!(f, "{kind}: line {} (row {}", self.line, self.row)?;
        if let Some(id) = &self.study_id {
            write!(f, ", study {id}")?;
        }
        write!(f, "): {}", self.message)
    }
}

fn join_diagnostics(diags: &[RowDiagnostic]) -> String {
    diags
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read dataset {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("dataset header mismatch: expected `{expected}`, found `{found}`")]
    Header { expected: String, found: String },
    #[error("{}", join_diagnostics(.0))]
    Invalid(Vec<RowDiagnostic>),
    #[error(transparent)]
    Mapping(#[from] MappingError),
}

impl DatasetError {
    pub fn diagnostics(&self) -> &[RowDiagnostic] {
        match self {
            DatasetError::Invalid(d) => d,
            _ => &[],
        }
    }
}

/// A raw factor name that no mapping entry covers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnmappedName {
    pub raw_factor: String,
    pub occurrences: usize,
}

/// A canonical factor removed by the minimum-k rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedFactor {
    pub factor: Factor,
    pub k: usize,
    pub min_k: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionReport {
    pub unmapped: Vec<UnmappedName>,
    pub dropped_factors: Vec<DroppedFactor>,
}

/// Effects for one canonical factor.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorGroup {
    pub factor: Factor,
    pub effects: Vec<StudyEffect>,
}

impl FactorGroup {
    pub fn k(&self) -> usize {
        self.effects.len()
    }

    /// Sum of sample sizes over the group's effects.
    pub fn total_n(&self) -> u64 {
        self.effects.iter().map(|e| u64::from(e.n)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    /// Distinct samples contributing at least one retained effect.
    pub studies: usize,
    /// Retained effects.
    pub effects: usize,
    /// Sum of sample sizes over distinct retained samples.
    pub total_n: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodedDataset {
    pub effects: Vec<StudyEffect>,
    pub mapping: FactorMapping,
    pub min_k: usize,
}

/// Reads the dataset and the mapping table from disk.
pub fn parse_dataset(
    path: impl AsRef<Path>,
    mapping_path: impl AsRef<Path>,
) -> Result<CodedDataset, DatasetError> {
    let mapping = FactorMapping::from_path(mapping_path)?;
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    CodedDataset::parse_str(&text, mapping)
}

/// Parses dataset rows without a mapping; every effect comes back
/// [`Coding::Unmapped`].
pub fn read_effects(text: &str) -> Result<Vec<StudyEffect>, DatasetError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let header = reader.headers().map_err(|e| DatasetError::Header {
        expected: DATASET_HEADER.join(","),
        found: e.to_string(),
    })?;
    let found: Vec<&str> = header
        .iter()
        .map(|h| h.trim_start_matches('\u{feff}'))
        .collect();
    if found != DATASET_HEADER {
        return Err(DatasetError::Header {
            expected: DATASET_HEADER.join(","),
            found: found.join(","),
        });
    }

    let mut effects = Vec::new();
    let mut diags = Vec::new();
    let mut seen: BTreeMap<(String, String), usize> = BTreeMap::new();

    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                diags.push(RowDiagnostic {
                    kind: DiagnosticKind::Parse,
                    line,
                    row,
                    study_id: None,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let line = record.position().map_or(0, |p| p.line());
        let study_id = record.get(0).filter(|s| !s.is_empty()).map(str::to_owned);
        let mut push = |kind, message: String| {
            diags.push(RowDiagnostic {
                kind,
                line,
                row,
                study_id: study_id.clone(),
                message,
            })
        };

        if record.len() != DATASET_HEADER.len() {
            push(
                DiagnosticKind::Parse,
                format!(
                    "expected {} fields, found {}",
                    DATASET_HEADER.len(),
                    record.len()
                ),
            );
            continue;
        }

        match parse_record(&record) {
            Ok(effect) => {
                let problems = validate_effect(&effect);
                let key = (effect.study_id.clone(), normalize_name(&effect.raw_factor));
                if let Some(first_row) = seen.get(&key) {
                    push(
                        DiagnosticKind::Validation,
                        format!(
                            "duplicate (study_id, raw_factor) = ({}, {}); first seen at row {first_row}",
                            effect.study_id, effect.raw_factor
                        ),
                    );
                } else {
                    seen.insert(key, row);
                }
                let had_problems = !problems.is_empty();
                for p in problems {
                    push(DiagnosticKind::Validation, p);
                }
                if !had_problems {
                    effects.push(effect);
                }
            }
            Err(message) => push(DiagnosticKind::Parse, message),
        }
    }

    if diags.is_empty() {
        Ok(effects)
    } else {
        Err(DatasetError::Invalid(diags))
    }
}

fn parse_record(record: &csv::StringRecord) -> Result<StudyEffect, String> {
    let field = |i: usize| record.get(i).unwrap_or("");
    let text = |i: usize| -> Result<String, String> {
        let v = field(i);
        if v.is_empty() {
            Err(format!("{} is empty", DATASET_HEADER[i]))
        } else {
            Ok(v.to_owned())
        }
    };
    let number = |i: usize| -> Result<f64, String> {
        let v = field(i);
        v.parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| format!("{} `{v}` is not a finite number", DATASET_HEADER[i]))
    };

    Ok(StudyEffect {
        study_id: text(0)?,
        first_author: text(1)?,
        year: field(2)
            .parse()
            .map_err(|_| format!("year `{}` is not an integer", field(2)))?,
        pub_type: field(3).parse()?,
        region: text(4)?,
        region_class: field(5).parse()?,
        n: field(6)
            .parse()
            .map_err(|_| format!("n `{}` is not a non-negative integer", field(6)))?,
        male_pct: number(7)?,
        raw_factor: text(8)?,
        effect_value: number(9)?,
        effect_metric: field(10).parse()?,
        coding: Coding::Unmapped,
    })
}

/// Checks the per-row invariants; returns one message per violation.
pub fn validate_effect(effect: &StudyEffect) -> Vec<String> {
    let mut problems = Vec::new();
    if effect.n < 4 {
        problems.push(format!(
            "n = {} is below 4; the Fisher-z variance 1/(n-3) needs n > 3",
            effect.n
        ));
    }
    if !(0.0..=100.0).contains(&effect.male_pct) {
        problems.push(format!(
            "male_pct = {} is outside 0..=100",
            effect.male_pct
        ));
    }
    match effect.effect_metric {
        EffectMetric::CorrelationR => {
            if !(effect.effect_value > -1.0 && effect.effect_value < 1.0) {
                problems.push(format!(
                    "correlation {} is outside (-1, 1)",
                    effect.effect_value
                ));
            }
        }
        EffectMetric::RegressionBeta => {
            if let Err(e) = transforms::beta_to_r(effect.effect_value) {
                problems.push(e.to_string());
            }
        }
    }
    problems
}

impl CodedDataset {
    /// Parses dataset text and flags each effect against `mapping`.
    pub fn parse_str(text: &str, mapping: FactorMapping) -> Result<Self, DatasetError> {
        let effects = read_effects(text)?;
        let mut ds = CodedDataset {
            effects,
            mapping,
            min_k: DEFAULT_MIN_K,
        };
        ds.flag_unmapped();
        Ok(ds)
    }

    /// The bundled replication dataset with the bundled mapping.
    pub fn bundled() -> Self {
        Self::parse_str(crate::fixture::DATASET_CSV, FactorMapping::standard())
            .expect("bundled dataset is valid")
    }

    pub fn with_min_k(mut self, min_k: usize) -> Self {
        self.min_k = min_k;
        self
    }

    fn flag_unmapped(&mut self) {
        for e in &mut self.effects {
            e.coding = match self.mapping.lookup(&e.raw_factor) {
                Some(f) => Coding::Mapped(f),
                None => Coding::Unmapped,
            };
        }
    }

    /// Assigns canonical factors and marks factors with fewer than `min_k`
    /// effects as below cutoff. Idempotent.
    pub fn apply_mapping(mut self) -> Self {
        self.flag_unmapped();
        let mut counts: BTreeMap<Factor, usize> = BTreeMap::new();
        for e in &self.effects {
            if let Coding::Mapped(f) = e.coding {
                *counts.entry(f).or_default() += 1;
            }
        }
        for e in &mut self.effects {
            if let Coding::Mapped(f) = e.coding {
                if counts[&f] < self.min_k {
                    e.coding = Coding::BelowCutoff(f);
                }
            }
        }
        for (f, k) in counts.iter().filter(|(_, &k)| k < self.min_k) {
            log::warn!("factor {f} has k = {k} < min_k = {}; dropped", self.min_k);
        }
        self
    }

    pub fn exclusions(&self) -> ExclusionReport {
        let mut unmapped: BTreeMap<String, usize> = BTreeMap::new();
        let mut dropped: BTreeMap<Factor, usize> = BTreeMap::new();
        for e in &self.effects {
            match e.coding {
                Coding::Unmapped => *unmapped.entry(normalize_name(&e.raw_factor)).or_default() += 1,
                Coding::BelowCutoff(f) => *dropped.entry(f).or_default() += 1,
                Coding::Mapped(_) => {}
            }
        }
        ExclusionReport {
            unmapped: unmapped
                .into_iter()
                .map(|(raw_factor, occurrences)| UnmappedName {
                    raw_factor,
                    occurrences,
                })
                .collect(),
            dropped_factors: dropped
                .into_iter()
                .map(|(factor, k)| DroppedFactor {
                    factor,
                    k,
                    min_k: self.min_k,
                })
                .collect(),
        }
    }

    /// Retained effects partitioned by canonical factor. Multiple effects from
    /// the same sample stay separate entries.
    pub fn group_by_factor(&self) -> BTreeMap<Factor, FactorGroup> {
        let mut groups: BTreeMap<Factor, FactorGroup> = BTreeMap::new();
        for e in &self.effects {
            if let Coding::Mapped(factor) = e.coding {
                groups
                    .entry(factor)
                    .or_insert_with(|| FactorGroup {
                        factor,
                        effects: Vec::new(),
                    })
                    .effects
                    .push(e.clone());
            }
        }
        groups
    }

    pub fn summary(&self) -> DatasetSummary {
        let mut samples: BTreeMap<&str, u32> = BTreeMap::new();
        let mut effects = 0;
        for e in self.effects.iter().filter(|e| e.factor().is_some()) {
            effects += 1;
            samples.insert(&e.study_id, e.n);
        }
        DatasetSummary {
            studies: samples.len(),
            effects,
            total_n: samples.values().map(|&n| u64::from(n)).sum(),
        }
    }

    /// Writes the effects back out in the dataset CSV format.
    pub fn to_csv(&self) -> String {
        // a leading `#` would read back as a comment line
        let style = if self.effects.iter().any(|e| e.study_id.starts_with('#')) {
            csv::QuoteStyle::Always
        } else {
            csv::QuoteStyle::Necessary
        };
        let mut writer = csv_writer(style);
        writer.write_record(DATASET_HEADER).expect("in-memory write");
        for e in &self.effects {
            writer
                .write_record([
                    e.study_id.as_str(),
                    e.first_author.as_str(),
                    &e.year.to_string(),
                    e.pub_type.as_str(),
                    e.region.as_str(),
                    e.region_class.as_str(),
                    &e.n.to_string(),
                    &e.male_pct.to_string(),
                    e.raw_factor.as_str(),
                    &e.effect_value.to_string(),
                    e.effect_metric.as_str(),
                ])
                .expect("in-memory write");
        }
        finish_csv(writer)
    }
}

fn csv_writer(style: csv::QuoteStyle) -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .quote_style(style)
        .from_writer(Vec::new())
}

fn finish_csv(writer: csv::Writer<Vec<u8>>) -> String {
    String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "study_id,first_author,year,pub_type,region,region_class,n,male_pct,raw_factor,effect_value,effect_metric\n";

    fn parse(body: &str) -> Result<CodedDataset, DatasetError> {
        CodedDataset::parse_str(&format!("{HEADER}{body}"), FactorMapping::standard())
    }

    #[test]
    fn parses_duong_row() {
        let ds = parse(
            "S03,Cong Doanh Duong,2023,journal,Vietnam,developing,1389,44.20,performance expectancy,0.528,regression_beta\n",
        )
        .unwrap();
        assert_eq!(ds.effects.len(), 1);
        let e = &ds.effects[0];
        assert_eq!(e.first_author, "Cong Doanh Duong");
        assert_eq!(e.year, 2023);
        assert_eq!(e.n, 1389);
        assert_eq!(e.region_class, RegionClass::Developing);
        assert_eq!(e.effect_value, 0.528);
        assert_eq!(e.coding, Coding::Mapped(Factor::PerformanceExpectancy));
    }

    #[test]
    fn empty_file_with_header_is_empty_dataset() {
        let ds = parse("").unwrap();
        assert!(ds.effects.is_empty());
        assert!(ds.group_by_factor().is_empty());
    }

    #[test]
    fn wrong_arity_names_row() {
        let err = parse(
            "S01,A,2023,journal,X,developing,100,50,habit,0.2,correlation_r\nS02,B,2023,journal,X,developing,100,50,habit\n",
        )
        .unwrap_err();
        let d = err.diagnostics();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].kind, DiagnosticKind::Parse);
        assert_eq!(d[0].row, 2);
        assert!(err.to_string().contains("row 2"), "{err}");
    }

    #[test]
    fn non_numeric_n_is_parse_error() {
        let err = parse("S01,A,2023,journal,X,developing,many,50,habit,0.2,correlation_r\n")
            .unwrap_err();
        assert_eq!(err.diagnostics()[0].kind, DiagnosticKind::Parse);
        assert!(err.to_string().contains("n `many`"));
    }

    #[test]
    fn non_numeric_effect_is_parse_error() {
        let err =
            parse("S01,A,2023,journal,X,developing,100,50,habit,abc,correlation_r\n").unwrap_err();
        assert!(err.to_string().contains("effect_value"));
    }

    #[test]
    fn duplicate_pair_is_validation_error() {
        let err = parse(
            "S01,A,2023,journal,X,developing,100,50,habit,0.2,correlation_r\nS01,A,2023,journal,X,developing,100,50,Habit,0.3,correlation_r\n",
        )
        .unwrap_err();
        let d = err.diagnostics();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].kind, DiagnosticKind::Validation);
        assert!(d[0].message.contains("duplicate"));
    }

    #[test]
    fn invariant_violations_are_reported_per_row() {
        let err = parse(
            "S01,A,2023,journal,X,developing,3,50,habit,0.2,correlation_r\nS02,A,2023,journal,X,developing,50,120,habit,0.2,correlation_r\nS03,A,2023,journal,X,developing,50,50,habit,1.0,correlation_r\nS04,A,2023,journal,X,developing,50,50,habit,0.97,regression_beta\n",
        )
        .unwrap_err();
        let rows: Vec<usize> = err.diagnostics().iter().map(|d| d.row).collect();
        assert_eq!(rows, vec![1, 2, 3, 4]);
    }

    #[test]
    fn header_must_match() {
        let err = CodedDataset::parse_str("a,b,c\n", FactorMapping::standard()).unwrap_err();
        assert!(matches!(err, DatasetError::Header { .. }));
    }

    #[test]
    fn quoted_region_with_comma() {
        let ds = parse(
            "S02,Chan,2023,journal,\"Hong Kong SAR, China\",developed,405,51.4,perceived cost,-0.295,correlation_r\n",
        )
        .unwrap();
        assert_eq!(ds.effects[0].region, "Hong Kong SAR, China");
    }

    #[test]
    fn mapping_examples() {
        let m = FactorMapping::standard();
        assert_eq!(m.lookup("perceived ease of use"), Some(Factor::EffortExpectancy));
        assert_eq!(m.lookup("  Perceived   Ease of Use "), Some(Factor::EffortExpectancy));
        assert_eq!(m.lookup("technology anxiety"), None);
        assert_eq!(
            m.lookup("perceived behavioural control"),
            Some(Factor::FacilitatingConditions)
        );
        let pe = m.raw_names(Factor::PerformanceExpectancy);
        for name in [
            "performance expectancy",
            "perceived usefulness",
            "learning value",
            "utility value",
            "value expectancy",
        ] {
            assert!(pe.contains(&name), "{name}");
        }
        assert_eq!(m.factors().len(), 8);
    }

    #[test]
    fn mapping_conflict_is_rejected() {
        let err = FactorMapping::parse_str("Habit,trust\nAttitude,trust\n").unwrap_err();
        assert!(matches!(err, MappingError::Conflict { .. }));
        // the same pair twice is fine
        FactorMapping::parse_str("Habit,habit\nHabit,Habit\n").unwrap();
    }

    #[test]
    fn mapping_rejects_unknown_factor() {
        let err = FactorMapping::parse_str("canonical_factor,raw_name\nGrit,grit\n").unwrap_err();
        assert!(matches!(err, MappingError::Malformed { line: 2, .. }));
    }

    #[test]
    fn mapping_round_trip() {
        let m = FactorMapping::standard();
        assert_eq!(FactorMapping::parse_str(&m.to_csv()).unwrap(), m);
    }

    #[test]
    fn unmapped_names_are_flagged_not_fatal() {
        let ds = parse(
            "S01,A,2023,journal,X,developing,100,50,technology anxiety,-0.383,regression_beta\n",
        )
        .unwrap()
        .apply_mapping();
        assert_eq!(ds.effects[0].coding, Coding::Unmapped);
        let ex = ds.exclusions();
        assert_eq!(ex.unmapped.len(), 1);
        assert_eq!(ex.unmapped[0].raw_factor, "technology anxiety");
    }

    #[test]
    fn factor_below_min_k_is_dropped() {
        let ds = parse(
            "S01,A,2023,journal,X,developing,100,50,habit,0.2,correlation_r\nS02,A,2023,journal,X,developing,100,50,habit,0.3,correlation_r\n",
        )
        .unwrap()
        .apply_mapping();
        assert!(ds.group_by_factor().is_empty());
        let ex = ds.exclusions();
        assert_eq!(
            ex.dropped_factors,
            vec![DroppedFactor {
                factor: Factor::Habit,
                k: 2,
                min_k: 3
            }]
        );
        // lowering the cutoff keeps it
        let ds = ds.with_min_k(2).apply_mapping();
        assert_eq!(ds.group_by_factor()[&Factor::Habit].k(), 2);
    }

    #[test]
    fn single_effect_single_group() {
        let ds = parse("S01,A,2023,journal,X,developing,100,50,habit,0.2,correlation_r\n")
            .unwrap()
            .with_min_k(1)
            .apply_mapping();
        let groups = ds.group_by_factor();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[&Factor::Habit].k(), 1);
    }

    #[test]
    fn factor_name_variants() {
        for s in ["habit", "Habit", "HABIT"] {
            assert_eq!(s.parse::<Factor>().unwrap(), Factor::Habit);
        }
        for s in ["PerceivedCost", "perceived_cost", "perceived cost", "perceived-cost"] {
            assert_eq!(s.parse::<Factor>().unwrap(), Factor::PerceivedCost);
        }
        assert!("grit".parse::<Factor>().is_err());
    }

    #[test]
    fn csv_round_trip_quotes_awkward_fields() {
        let ds = parse("\"#S01\",\"Lee, J\",2023,journal,X,developing,100,50,habit,0.2,correlation_r\n")
            .unwrap()
            .apply_mapping();
        let again = CodedDataset::parse_str(&ds.to_csv(), FactorMapping::standard())
            .unwrap()
            .apply_mapping();
        assert_eq!(again, ds);
    }

    #[test]
    fn mapping_round_trip_quotes_commas() {
        let m = FactorMapping::parse_str("Habit,\"routine, daily\"\nHabit,\"say \"\"hi\"\"\"\n").unwrap();
        let again = FactorMapping::parse_str(&m.to_csv()).unwrap();
        assert_eq!(again.raw_names(Factor::Habit), m.raw_names(Factor::Habit));
        assert_eq!(again.len(), 2);
    }
}
