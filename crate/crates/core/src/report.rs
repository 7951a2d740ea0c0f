//! Pipeline orchestration and report rendering.
//!
//! [`run_pipeline`] runs bias diagnostics, heterogeneity, pooling and the
//! moderator analyses for every retained factor. The resulting
//! [`AnalysisReport`] renders to JSON (full precision), long-format CSV and
//! Markdown (three decimals, half-to-even), plus one funnel-plot SVG per
//! factor. No output depends on time, locale or hash order.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bias::{self, BiasDiagnostics, BiasError, Funnel, NfsVariant};
use crate::dataset::{CodedDataset, DatasetSummary, ExclusionReport, Factor, DEFAULT_MIN_K};
use crate::distributions::Z_975;
use crate::moderators::{
    self, MetaRegressionResult, ModeratorError, SubgroupResult, SubgroupTau,
};
use crate::pooling::{self, HeterogeneityStats, Model, PooledEstimate, PoolingError};
use crate::transforms::{self, Magnitude, TransformError};

/// Which pooling model to report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    /// Random effects when the Q test is significant at 0.05, else fixed.
    #[default]
    Auto,
    Fixed,
    Random,
}

impl FromStr for ModelChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "auto" => Ok(ModelChoice::Auto),
            "fixed" => Ok(ModelChoice::Fixed),
            "random" => Ok(ModelChoice::Random),
            other => Err(format!("unknown model `{other}` (expected auto, fixed or random)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub min_k: usize,
    pub model: ModelChoice,
    pub nfs_variant: NfsVariant,
    /// Restrict the analysis to these factors; `None` analyses all.
    pub factors: Option<BTreeSet<Factor>>,
    pub moderators: bool,
    pub subgroup_tau: SubgroupTau,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            min_k: DEFAULT_MIN_K,
            model: ModelChoice::Auto,
            nfs_variant: NfsVariant::TwoTailed196,
            factors: None,
            moderators: true,
            subgroup_tau: SubgroupTau::PerGroup,
        }
    }
}

/// Every analysis decision, echoed into the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub effect_scale: String,
    pub tau2_estimator: String,
    pub ci_quantile: f64,
    pub model_choice: ModelChoice,
    pub heterogeneity_alpha: f64,
    pub nfs_variant: NfsVariant,
    pub nfs_critical_value: f64,
    pub nfs_rounding: String,
    pub egger_model: String,
    pub min_k: usize,
    pub subgroup_tau: SubgroupTau,
    pub meta_regression_tau2: String,
    pub factor_filter: Option<Vec<Factor>>,
    pub moderators: bool,
    pub table_rounding: String,
}

impl Settings {
    fn from_config(config: &AnalysisConfig) -> Self {
        Settings {
            effect_scale: "fisher_z".into(),
            tau2_estimator: "dersimonian_laird".into(),
            ci_quantile: Z_975,
            model_choice: config.model,
            heterogeneity_alpha: pooling::HETEROGENEITY_ALPHA,
            nfs_variant: config.nfs_variant,
            nfs_critical_value: config.nfs_variant.critical_value(),
            nfs_rounding: "ceil".into(),
            egger_model: "ols_standardized_on_precision".into(),
            min_k: config.min_k,
            subgroup_tau: config.subgroup_tau,
            meta_regression_tau2: "method_of_moments".into(),
            factor_filter: config
                .factors
                .as_ref()
                .map(|f| f.iter().copied().collect()),
            moderators: config.moderators,
            table_rounding: "half_even_3dp".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSection {
    pub factor: Factor,
    pub k: usize,
    pub n_total: u64,
    pub bias: BiasDiagnostics,
    pub heterogeneity: HeterogeneityStats,
    pub pooled: PooledEstimate,
    pub magnitude: Magnitude,
    /// Model the heterogeneity rule selects.
    pub model_rule: Model,
    /// True when the configured model differs from `model_rule`.
    pub model_overridden: bool,
    pub funnel: Funnel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedAnalysis {
    pub factor: Factor,
    pub analysis: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeratorSections {
    pub subgroups: Vec<SubgroupResult>,
    pub meta_regressions: Vec<MetaRegressionResult>,
    pub skipped: Vec<SkippedAnalysis>,
}

impl ModeratorSections {
    pub fn is_empty(&self) -> bool {
        self.subgroups.is_empty() && self.meta_regressions.is_empty() && self.skipped.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub dataset_summary: DatasetSummary,
    /// Descending k, ties by factor name.
    pub per_factor: Vec<FactorSection>,
    pub moderators: Option<ModeratorSections>,
    pub exclusions: ExclusionReport,
    pub settings: Settings,
}

impl AnalysisReport {
    pub fn section(&self, factor: Factor) -> Option<&FactorSection> {
        self.per_factor.iter().find(|s| s.factor == factor)
    }

    pub fn subgroup(&self, factor: Factor) -> Option<&SubgroupResult> {
        self.moderators
            .as_ref()?
            .subgroups
            .iter()
            .find(|s| s.factor == Some(factor))
    }

    pub fn meta_regression(&self, factor: Factor) -> Option<&MetaRegressionResult> {
        self.moderators
            .as_ref()?
            .meta_regressions
            .iter()
            .find(|m| m.factor == Some(factor))
    }
}

#[derive(Debug, Error)]
pub enum StepError {
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Pooling(#[from] PoolingError),
    #[error(transparent)]
    Bias(#[from] BiasError),
    #[error(transparent)]
    Moderator(#[from] ModeratorError),
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no factors meet min_k = {min_k}")]
    NoFactors { min_k: usize },
    #[error("{factor}: {source}")]
    Factor {
        factor: Factor,
        #[source]
        source: StepError,
    },
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn at<T, E: Into<StepError>>(factor: Factor, r: Result<T, E>) -> Result<T, ReportError> {
    r.map_err(|e| ReportError::Factor {
        factor,
        source: e.into(),
    })
}

/// Runs the full analysis for every retained factor.
pub fn run_pipeline(
    ds: &CodedDataset,
    config: &AnalysisConfig,
) -> Result<AnalysisReport, ReportError> {
    let ds = ds.clone().with_min_k(config.min_k).apply_mapping();
    let groups: Vec<_> = ds
        .group_by_factor()
        .into_values()
        .filter(|g| config.factors.as_ref().is_none_or(|f| f.contains(&g.factor)))
        .collect();
    if groups.is_empty() {
        return Err(ReportError::NoFactors {
            min_k: config.min_k,
        });
    }

    let mut per_factor = Vec::with_capacity(groups.len());
    let mut subgroups = Vec::new();
    let mut meta_regressions = Vec::new();
    let mut skipped = Vec::new();
    let mut samples = std::collections::BTreeMap::new();
    let mut effect_count = 0;

    for group in &groups {
        let factor = group.factor;
        for e in &group.effects {
            samples.insert(e.study_id.clone(), e.n);
        }
        effect_count += group.k();
        let effects = at(factor, transforms::normalize_all(&group.effects))?;

        let bias_diag = at(factor, bias::bias_diagnostics(&effects, config.nfs_variant))?;
        let het = at(factor, pooling::heterogeneity(&effects))?;
        let rule = pooling::select_model(&het);
        let model = match config.model {
            ModelChoice::Auto => rule,
            ModelChoice::Fixed => Model::Fixed,
            ModelChoice::Random => Model::Random,
        };
        if model != rule {
            log::info!("{factor}: reporting {} model; rule selects {}", model.as_str(), rule.as_str());
        }
        let pooled = at(factor, pooling::pool(&effects, model))?;
        let funnel = at(factor, bias::funnel_points(&effects, &pooled))?;

        if config.moderators {
            match moderators::subgroup_by_region(&effects, config.subgroup_tau) {
                Ok(s) => subgroups.push(s),
                Err(e @ ModeratorError::Degenerate { .. }) => skipped.push(SkippedAnalysis {
                    factor,
                    analysis: "subgroup:region_class".into(),
                    reason: e.to_string(),
                }),
                Err(e) => return at(factor, Err(e)),
            }
            match moderators::meta_regression_male_pct(&effects) {
                Ok(m) => meta_regressions.push(m),
                Err(
                    e @ (ModeratorError::SingularDesign | ModeratorError::InsufficientData { .. }),
                ) => skipped.push(SkippedAnalysis {
                    factor,
                    analysis: "meta_regression:male_pct".into(),
                    reason: e.to_string(),
                }),
                Err(e) => return at(factor, Err(e)),
            }
        }

        per_factor.push(FactorSection {
            factor,
            k: group.k(),
            n_total: group.total_n(),
            magnitude: transforms::classify_magnitude(pooled.r_pooled),
            model_rule: rule,
            model_overridden: model != rule,
            bias: bias_diag,
            heterogeneity: het,
            pooled,
            funnel,
        });
    }

    per_factor.sort_by(|a, b| b.k.cmp(&a.k).then_with(|| a.factor.name().cmp(b.factor.name())));
    let order = |f: Option<Factor>| {
        per_factor
            .iter()
            .position(|s| Some(s.factor) == f)
            .unwrap_or(usize::MAX)
    };
    subgroups.sort_by_key(|s| order(s.factor));
    meta_regressions.sort_by_key(|m| order(m.factor));
    skipped.sort_by_key(|s| order(Some(s.factor)));

    Ok(AnalysisReport {
        dataset_summary: DatasetSummary {
            studies: samples.len(),
            effects: effect_count,
            total_n: samples.values().map(|&n| u64::from(n)).sum(),
        },
        per_factor,
        moderators: config.moderators.then_some(ModeratorSections {
            subgroups,
            meta_regressions,
            skipped,
        }),
        exclusions: ds.exclusions(),
        settings: Settings::from_config(config),
    })
}

/// Rounds the shortest round-trip decimal representation of `x` to three
/// decimals, ties to even.
pub fn fmt3(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let repr = format!("{}", x.abs());
    let (int_part, frac_part) = repr.split_once('.').unwrap_or((&repr, ""));
    let mut digits: Vec<u8> = int_part
        .bytes()
        .chain(frac_part.bytes().chain(std::iter::repeat(b'0')).take(3))
        .map(|b| b - b'0')
        .collect();
    let rest = frac_part.as_bytes().get(3..).unwrap_or(&[]);
    let round_up = match rest.first() {
        None => false,
        Some(&d) if d > b'5' => true,
        Some(&d) if d < b'5' => false,
        Some(_) => {
            rest[1..].iter().any(|&d| d != b'0') || digits.last().is_some_and(|d| d % 2 == 1)
        }
    };
    if round_up {
        let mut i = digits.len();
        loop {
            if i == 0 {
                digits.insert(0, 1);
                break;
            }
            i -= 1;
            if digits[i] == 9 {
                digits[i] = 0;
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    let split = digits.len() - 3;
    let int_s: String = digits[..split].iter().map(|d| char::from(b'0' + d)).collect();
    let frac_s: String = digits[split..].iter().map(|d| char::from(b'0' + d)).collect();
    let is_zero = digits.iter().all(|&d| d == 0);
    let sign = if x.is_sign_negative() && !is_zero { "-" } else { "" };
    format!("{sign}{int_s}.{frac_s}")
}

/// A single value in the long-format table.
#[derive(Debug, Clone, PartialEq)]
pub enum CellValue {
    Float(f64),
    Int(u64),
    Text(String),
}

impl CellValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            CellValue::Float(v) => Some(*v),
            CellValue::Int(v) => Some(*v as f64),
            CellValue::Text(_) => None,
        }
    }

    pub fn render(&self) -> String {
        match self {
            CellValue::Float(v) => fmt3(*v),
            CellValue::Int(v) => v.to_string(),
            CellValue::Text(s) => s.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub table: &'static str,
    pub factor: Factor,
    /// Subgroup label, or empty.
    pub group: String,
    pub metric: &'static str,
    pub value: CellValue,
}

impl Cell {
    /// `metric`, or `group.metric` for subgroup rows.
    pub fn qualified_metric(&self) -> String {
        if self.group.is_empty() {
            self.metric.to_owned()
        } else {
            format!("{}.{}", self.group, self.metric)
        }
    }
}

/// Flattens the report into `(table, factor, group, metric, value)` rows.
pub fn report_cells(report: &AnalysisReport) -> Vec<Cell> {
    use CellValue::{Float, Int, Text};
    let mut cells = Vec::new();
    let mut push = |table, factor, group: &str, metric, value| {
        cells.push(Cell {
            table,
            factor,
            group: group.to_owned(),
            metric,
            value,
        })
    };

    for s in &report.per_factor {
        let f = s.factor;
        let b = &s.bias;
        push("publication_bias", f, "", "k", Int(s.k as u64));
        push("publication_bias", f, "", "nfs", Int(b.nfs));
        push("publication_bias", f, "", "nfs_threshold", Int(b.nfs_threshold));
        push("publication_bias", f, "", "egger_intercept", Float(b.egger.intercept));
        push("publication_bias", f, "", "egger_ci_low", Float(b.egger.ci_low));
        push("publication_bias", f, "", "egger_ci_high", Float(b.egger.ci_high));
        push("publication_bias", f, "", "egger_t", Float(b.egger.t));
        push("publication_bias", f, "", "egger_abs_t", Float(b.egger.t.abs()));
        push("publication_bias", f, "", "egger_df", Int(b.egger.df as u64));
        push("publication_bias", f, "", "egger_p", Float(b.egger.p));
        push("publication_bias", f, "", "verdict", Text(b.verdict.as_str().into()));
    }
    for s in &report.per_factor {
        let f = s.factor;
        let h = &s.heterogeneity;
        push("heterogeneity", f, "", "k", Int(s.k as u64));
        push("heterogeneity", f, "", "n", Int(s.n_total));
        push("heterogeneity", f, "", "q", Float(h.q));
        push("heterogeneity", f, "", "df", Int(h.df as u64));
        push("heterogeneity", f, "", "p_q", Float(h.p_q));
        push("heterogeneity", f, "", "i2", Float(h.i2));
        push("heterogeneity", f, "", "tau2", Float(h.tau2));
    }
    for s in &report.per_factor {
        let f = s.factor;
        let p = &s.pooled;
        push("effect_size", f, "", "model", Text(p.model.as_str().into()));
        push("effect_size", f, "", "model_rule", Text(s.model_rule.as_str().into()));
        push("effect_size", f, "", "model_overridden", Text(s.model_overridden.to_string()));
        push("effect_size", f, "", "k", Int(p.k as u64));
        push("effect_size", f, "", "n", Int(p.n_total));
        push("effect_size", f, "", "r", Float(p.r_pooled));
        push("effect_size", f, "", "ci_low", Float(p.ci_low));
        push("effect_size", f, "", "ci_high", Float(p.ci_high));
        push("effect_size", f, "", "z", Float(p.z_stat));
        push("effect_size", f, "", "p", Float(p.p));
        push("effect_size", f, "", "magnitude", Text(s.magnitude.as_str().into()));
    }
    if let Some(m) = &report.moderators {
        for sg in &m.subgroups {
            let Some(f) = sg.factor else { continue };
            for g in &sg.groups {
                let e = &g.estimate;
                push("subgroup", f, &g.label, "k", Int(e.k as u64));
                push("subgroup", f, &g.label, "n", Int(e.n_total));
                push("subgroup", f, &g.label, "r", Float(e.r_pooled));
                push("subgroup", f, &g.label, "ci_low", Float(e.ci_low));
                push("subgroup", f, &g.label, "ci_high", Float(e.ci_high));
                push("subgroup", f, &g.label, "z", Float(e.z_stat));
                push("subgroup", f, &g.label, "p", Float(e.p));
            }
            push("subgroup", f, "", "q_between", Float(sg.q_between));
            push("subgroup", f, "", "df_between", Int(sg.df_between as u64));
            push("subgroup", f, "", "p_between", Float(sg.p_between));
        }
        for mr in &m.meta_regressions {
            let Some(f) = mr.factor else { continue };
            let c = &mr.slope;
            push("meta_regression", f, "", "coefficient", Float(c.estimate));
            push("meta_regression", f, "", "se", Float(c.se));
            push("meta_regression", f, "", "ci_low", Float(c.ci_low));
            push("meta_regression", f, "", "ci_high", Float(c.ci_high));
            push("meta_regression", f, "", "z", Float(c.z_stat));
            push("meta_regression", f, "", "p", Float(c.p));
            push("meta_regression", f, "", "tau2_residual", Float(mr.tau2_residual));
        }
    }
    cells
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Csv,
    Markdown,
}

impl Format {
    pub const ALL: [Format; 3] = [Format::Json, Format::Csv, Format::Markdown];

    pub fn extension(self) -> &'static str {
        match self {
            Format::Json => "json",
            Format::Csv => "csv",
            Format::Markdown => "md",
        }
    }
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            "md" | "markdown" => Ok(Format::Markdown),
            other => Err(format!("unknown format `{other}` (expected json, csv or md)")),
        }
    }
}

pub fn render_tables(report: &AnalysisReport, format: Format) -> Vec<u8> {
    match format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s.into_bytes()
        }
        Format::Csv => render_csv(report).into_bytes(),
        Format::Markdown => render_markdown(report).into_bytes(),
    }
}

fn render_csv(report: &AnalysisReport) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(["table", "factor", "group", "metric", "value"])
        .expect("in-memory write");
    for c in report_cells(report) {
        w.write_record([c.table, c.factor.name(), &c.group, c.metric, &c.value.render()])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

fn md_row(out: &mut String, cells: &[String]) {
    out.push('|');
    for c in cells {
        let _ = write!(out, " {} |", c.replace('|', "\\|"));
    }
    out.push('\n');
}

fn md_table(out: &mut String, header: &[&str], rows: &[Vec<String>]) {
    md_row(out, &header.iter().map(|h| h.to_string()).collect::<Vec<_>>());
    md_row(out, &header.iter().map(|_| "---".to_string()).collect::<Vec<_>>());
    for r in rows {
        md_row(out, r);
    }
    out.push('\n');
}

fn render_markdown(report: &AnalysisReport) -> String {
    let mut out = String::from("# Meta-analysis report\n\n");
    let d = &report.dataset_summary;
    let _ = writeln!(
        out,
        "{} samples, {} effects, total N = {} across {} factors.\n",
        d.studies,
        d.effects,
        d.total_n,
        report.per_factor.len()
    );

    out.push_str("## Effect sizes\n\n");
    let rows: Vec<Vec<String>> = report
        .per_factor
        .iter()
        .map(|s| {
            let p = &s.pooled;
            vec![
                s.factor.label().into(),
                p.k.to_string(),
                p.n_total.to_string(),
                fmt3(p.r_pooled),
                fmt3(p.ci_low),
                fmt3(p.ci_high),
                fmt3(p.z_stat),
                fmt3(p.p),
                s.magnitude.as_str().into(),
                if s.model_overridden {
                    format!("{} (rule: {})", p.model.as_str(), s.model_rule.as_str())
                } else {
                    p.model.as_str().into()
                },
            ]
        })
        .collect();
    md_table(
        &mut out,
        &["Factor", "K", "N", "R's Merge", "LL", "UL", "Z-Value", "p-Value", "Magnitude", "Model"],
        &rows,
    );

    out.push_str("## Heterogeneity\n\n");
    let rows: Vec<Vec<String>> = report
        .per_factor
        .iter()
        .map(|s| {
            let h = &s.heterogeneity;
            vec![
                s.factor.label().into(),
                s.k.to_string(),
                s.n_total.to_string(),
                fmt3(h.q),
                h.df.to_string(),
                fmt3(h.p_q),
                fmt3(h.i2),
                fmt3(h.tau2),
            ]
        })
        .collect();
    md_table(&mut out, &["Factor", "K", "N", "Q", "df", "p", "I²", "τ²"], &rows);

    out.push_str("## Publication bias\n\n");
    let rows: Vec<Vec<String>> = report
        .per_factor
        .iter()
        .map(|s| {
            let b = &s.bias;
            vec![
                s.factor.label().into(),
                s.k.to_string(),
                b.nfs.to_string(),
                b.nfs_threshold.to_string(),
                fmt3(b.egger.intercept),
                fmt3(b.egger.ci_low),
                fmt3(b.egger.ci_high),
                fmt3(b.egger.t),
                b.egger.df.to_string(),
                fmt3(b.egger.p),
                b.verdict.as_str().into(),
            ]
        })
        .collect();
    md_table(
        &mut out,
        &[
            "Factor", "K", "Fail-safe N", "5K+10", "Intercept", "LL", "UL", "t", "df", "p",
            "Verdict",
        ],
        &rows,
    );

    if let Some(m) = report.moderators.as_ref().filter(|m| !m.is_empty()) {
        if !m.subgroups.is_empty() {
            out.push_str("## Subgroups by region class\n\n");
            let mut rows = Vec::new();
            for sg in &m.subgroups {
                let label = sg.factor.map_or("", |f| f.label());
                for g in &sg.groups {
                    let e = &g.estimate;
                    rows.push(vec![
                        label.into(),
                        g.label.clone(),
                        e.k.to_string(),
                        e.n_total.to_string(),
                        fmt3(e.r_pooled),
                        fmt3(e.ci_low),
                        fmt3(e.ci_high),
                        fmt3(e.z_stat),
                        fmt3(e.p),
                        String::new(),
                        String::new(),
                        String::new(),
                    ]);
                }
                rows.push(vec![
                    label.into(),
                    "between".into(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    fmt3(sg.q_between),
                    sg.df_between.to_string(),
                    fmt3(sg.p_between),
                ]);
            }
            md_table(
                &mut out,
                &["Factor", "Group", "K", "N", "r", "LL", "UL", "Z", "p", "QB", "df", "p(QB)"],
                &rows,
            );
        }
        if !m.meta_regressions.is_empty() {
            out.push_str("## Meta-regression\n\n");
            let rows: Vec<Vec<String>> = m
                .meta_regressions
                .iter()
                .map(|mr| {
                    let c = &mr.slope;
                    vec![
                        mr.factor.map_or("", |f| f.label()).into(),
                        mr.moderator.clone(),
                        fmt3(c.estimate),
                        fmt3(c.se),
                        fmt3(c.ci_low),
                        fmt3(c.ci_high),
                        fmt3(c.z_stat),
                        fmt3(c.p),
                        fmt3(mr.tau2_residual),
                    ]
                })
                .collect();
            md_table(
                &mut out,
                &["Factor", "Moderator", "Coefficient", "SE", "LL", "UL", "Z", "p", "τ² residual"],
                &rows,
            );
        }
        if !m.skipped.is_empty() {
            out.push_str("Skipped moderator analyses:\n\n");
            for s in &m.skipped {
                let _ = writeln!(out, "- {} {}: {}", s.factor.label(), s.analysis, s.reason);
            }
            out.push('\n');
        }
    }

    let ex = &report.exclusions;
    if !ex.unmapped.is_empty() || !ex.dropped_factors.is_empty() {
        out.push_str("## Exclusions\n\n");
        for u in &ex.unmapped {
            let _ = writeln!(out, "- unmapped `{}` ({}x)", u.raw_factor, u.occurrences);
        }
        for d in &ex.dropped_factors {
            let _ = writeln!(out, "- {} dropped: k = {} < {}", d.factor.label(), d.k, d.min_k);
        }
        out.push('\n');
    }

    out.push_str("## Settings\n\n");
    let settings = serde_json::to_value(&report.settings).expect("settings serialize");
    if let serde_json::Value::Object(map) = settings {
        for (key, value) in map {
            let _ = writeln!(out, "- {key}: {value}");
        }
    }
    out
}

/// Console summary of the pooled effect per factor.
pub fn render_summary(report: &AnalysisReport) -> String {
    let mut out = format!(
        "{:<24} {:>3} {:>6} {:>7} {:>7} {:>7} {:>8} {:>7}  {}\n",
        "factor", "k", "N", "r", "LL", "UL", "Z", "p", "model"
    );
    for s in &report.per_factor {
        let p = &s.pooled;
        let _ = writeln!(
            out,
            "{:<24} {:>3} {:>6} {:>7} {:>7} {:>7} {:>8} {:>7}  {}{}",
            s.factor.label(),
            p.k,
            p.n_total,
            fmt3(p.r_pooled),
            fmt3(p.ci_low),
            fmt3(p.ci_high),
            fmt3(p.z_stat),
            fmt3(p.p),
            p.model.as_str(),
            if s.model_overridden { " (override)" } else { "" }
        );
    }
    out
}

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            _ => out.push(c),
        }
    }
    out
}

const SVG_W: f64 = 480.0;
const SVG_H: f64 = 400.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 52.0;

/// Funnel plot: Fisher z on x, standard error on y (0 at the top), a vertical
/// line at the pooled z and pseudo-confidence guides at `z̄ ± 1.96·se`.
pub fn render_funnel_svg(funnel: &Funnel, title: &str) -> String {
    let se_max = funnel
        .points
        .iter()
        .map(|p| p.se)
        .fold(0.0f64, f64::max)
        .max(1e-6)
        * 1.1;
    let guide = Z_975 * se_max;
    let (mut x_lo, mut x_hi) = (funnel.pooled_z - guide, funnel.pooled_z + guide);
    for p in &funnel.points {
        x_lo = x_lo.min(p.z);
        x_hi = x_hi.max(p.z);
    }
    let pad = (x_hi - x_lo) * 0.05;
    let (x_lo, x_hi) = (x_lo - pad, x_hi + pad);

    let plot_w = SVG_W - MARGIN_L - MARGIN_R;
    let plot_h = SVG_H - MARGIN_T - MARGIN_B;
    let sx = |z: f64| MARGIN_L + (z - x_lo) / (x_hi - x_lo) * plot_w;
    let sy = |se: f64| MARGIN_T + se / se_max * plot_h;
    let bottom = MARGIN_T + plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, "<title>{}</title>", xml_escape(title));
    let _ = writeln!(s, r##"<rect x="0" y="0" width="{SVG_W}" height="{SVG_H}" fill="#ffffff"/>"##);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
        SVG_W / 2.0,
        xml_escape(title)
    );
    let _ = writeln!(
        s,
        r##"<rect x="{MARGIN_L:.2}" y="{MARGIN_T:.2}" width="{plot_w:.2}" height="{plot_h:.2}" fill="none" stroke="#000000"/>"##
    );

    for i in 0..=4 {
        let z = x_lo + (x_hi - x_lo) * f64::from(i) / 4.0;
        let x = sx(z);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.2}" y1="{bottom:.2}" x2="{x:.2}" y2="{:.2}" stroke="#000000"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{z:.2}</text>"##,
            bottom + 4.0,
            bottom + 16.0
        );
        let se = se_max * f64::from(i) / 4.0;
        let y = sy(se);
        let _ = writeln!(
            s,
            r##"<line x1="{:.2}" y1="{y:.2}" x2="{MARGIN_L:.2}" y2="{y:.2}" stroke="#000000"/><text x="{:.2}" y="{:.2}" text-anchor="end">{se:.3}</text>"##,
            MARGIN_L - 4.0,
            MARGIN_L - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">Fisher's z</text>"#,
        MARGIN_L + plot_w / 2.0,
        SVG_H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{0:.2}" text-anchor="middle" transform="rotate(-90 14 {0:.2})">Standard error</text>"#,
        MARGIN_T + plot_h / 2.0
    );

    let top = sy(0.0);
    let cx = sx(funnel.pooled_z);
    let _ = writeln!(
        s,
        r##"<polyline points="{:.2},{bottom:.2} {cx:.2},{top:.2} {:.2},{bottom:.2}" fill="none" stroke="#808080" stroke-dasharray="4 3"/>"##,
        sx(funnel.pooled_z - guide),
        sx(funnel.pooled_z + guide)
    );
    let _ = writeln!(
        s,
        r##"<line x1="{cx:.2}" y1="{top:.2}" x2="{cx:.2}" y2="{bottom:.2}" stroke="#c00000" stroke-width="1.5"/>"##
    );
    for p in &funnel.points {
        let _ = writeln!(
            s,
            r##"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="#1f4e9a" fill-opacity="0.8"><title>{}</title></circle>"##,
            sx(p.z),
            sy(p.se),
            xml_escape(&p.study_id)
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn emit_funnel_svg(funnel: &Funnel, title: &str, out: &Path) -> Result<(), ReportError> {
    fs::write(out, render_funnel_svg(funnel, title)).map_err(|source| ReportError::Io {
        path: out.to_path_buf(),
        source,
    })
}

/// Writes `report.<ext>` for each format and one `funnel_<factor>.svg` per
/// factor into `out_dir`. Returns the written paths in order.
pub fn write_artifacts(
    report: &AnalysisReport,
    out_dir: &Path,
    formats: &BTreeSet<Format>,
) -> Result<Vec<PathBuf>, ReportError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ReportError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut written = Vec::new();
    for &format in formats {
        let path = out_dir.join(format!("report.{}", format.extension()));
        fs::write(&path, render_tables(report, format)).map_err(io_err(&path))?;
        written.push(path);
    }
    for s in &report.per_factor {
        let path = out_dir.join(format!("funnel_{}.svg", s.factor.slug()));
        emit_funnel_svg(&s.funnel, &format!("Funnel plot: {}", s.factor.label()), &path)?;
        written.push(path);
    }
    Ok(written)
}
