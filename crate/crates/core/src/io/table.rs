//! CSV exports. Floats are written with 6 significant digits, `%g` style.

use crate::cbm::{CbmModel, EpochRecord, Intervention};
use crate::error::{Error, Result};
use crate::evalkit::{ContributionReport, PointingResult};

/// `%g` with 6 significant digits: fixed notation for exponents in
/// `[-4, 6)`, scientific otherwise, trailing zeros removed.
pub fn format_g(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return if v.is_sign_negative() {
            "-0".into()
        } else {
            "0".into()
        };
    }
    // rounding to 6 digits first decides the exponent (9.999995 → 10)
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp) as usize;
        trim_zeros(&format!("{v:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa), exp.abs())
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(format_g).unwrap_or_default()
}

fn write_rows(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let map = |e: csv::Error| Error::Malformed(format!("csv: {e}"));
    w.write_record(header).map_err(map)?;
    for row in rows {
        w.write_record(&row).map_err(map)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Malformed(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Malformed(format!("csv: {e}")))
}

pub const POINTING_HEADER: [&str; 7] = [
    "method",
    "part_id",
    "part_name",
    "n_samples",
    "n_skipped",
    "mean_distance",
    "shortest10_mean",
];

/// One row per (method, part).
pub fn pointing_csv(results: &[PointingResult]) -> Result<String> {
    if results.iter().all(|r| r.parts.is_empty()) {
        return Err(Error::Empty("pointing result"));
    }
    write_rows(
        &POINTING_HEADER,
        results.iter().flat_map(|r| {
            r.parts.iter().map(|p| {
                vec![
                    r.method.clone(),
                    p.part_id.to_string(),
                    p.part_name.clone(),
                    p.n_samples.to_string(),
                    p.n_skipped.to_string(),
                    opt(p.mean_distance),
                    opt(p.shortest10_mean),
                ]
            })
        }),
    )
}

pub const CONTRIBUTION_HEADER: [&str; 5] = [
    "concept_id",
    "concept_name",
    "concept_value",
    "relevancy",
    "contribution_percent",
];

/// Rows in the report's order (largest contribution first).
pub fn contribution_csv(report: &ContributionReport) -> Result<String> {
    if report.rows.is_empty() {
        return Err(Error::Empty("contribution report"));
    }
    write_rows(
        &CONTRIBUTION_HEADER,
        report.rows.iter().map(|r| {
            vec![
                r.concept_id.to_string(),
                r.concept_name.clone(),
                format_g(r.concept_value),
                format_g(r.relevance),
                format_g(r.contribution_percent),
            ]
        }),
    )
}

pub const INTERVENTION_HEADER: [&str; 5] =
    ["class_id", "class_name", "old_prob", "new_prob", "delta"];

pub fn intervention_csv(model: &CbmModel, result: &Intervention) -> Result<String> {
    write_rows(
        &INTERVENTION_HEADER,
        (0..result.new_probs.len()).map(|c| {
            vec![
                c.to_string(),
                model.class_names.get(c).cloned().unwrap_or_default(),
                format_g(result.old_probs[c]),
                format_g(result.new_probs[c]),
                format_g(result.delta[c]),
            ]
        }),
    )
}

pub const HISTORY_HEADER: [&str; 5] = [
    "stage",
    "epoch",
    "mean_loss",
    "concept_accuracy",
    "class_accuracy",
];

/// Training history in the order it was recorded.
pub fn history_csv(history: &[EpochRecord]) -> Result<String> {
    if history.is_empty() {
        return Err(Error::Empty("training history"));
    }
    write_rows(
        &HISTORY_HEADER,
        history.iter().map(|r| {
            vec![
                r.stage.clone(),
                r.epoch.to_string(),
                format_g(r.mean_loss),
                opt(r.concept_accuracy),
                opt(r.class_accuracy),
            ]
        }),
    )
}

/// Generic table with a header and pre-formatted cells.
pub fn table_csv(header: &[&str], rows: Vec<Vec<String>>) -> Result<String> {
    write_rows(header, rows)
}
