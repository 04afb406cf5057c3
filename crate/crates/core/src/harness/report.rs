//! Merging sweep CSVs from several models into one comparison table.
//!
//! Inputs are either raw sweep CSVs (labelled by the caller, usually with
//! the file stem) or previously merged tables, so merging is idempotent.
//! The sweep seed is not carried into the merged table.

use std::collections::{BTreeSet, HashMap};

use super::eval::{read_sweep_csv, SWEEP_HEADER};
use super::HarnessError;

type Key = (String, String, String);

/// Rows keyed by `(strategy, modality, probability)` with one
/// `(valence, arousal)` pair per model label.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub labels: Vec<String>,
    pub rows: Vec<(Key, Vec<(f64, f64)>)>,
}

fn canonical_prob(text: &str) -> Result<String, HarnessError> {
    let p: f64 = text
        .trim()
        .parse()
        .map_err(|_| HarnessError::InvalidInput(format!("'{text}' is not a probability")))?;
    Ok(format!("{p:?}"))
}

fn parse_value(text: &str) -> Result<f64, HarnessError> {
    text.trim()
        .parse()
        .map_err(|_| HarnessError::InvalidInput(format!("'{text}' is not a number")))
}

/// Reads a raw sweep CSV (taking `label`) or a merged table (keeping its
/// own labels).
pub fn read_report_table(label: &str, text: &str) -> Result<ReportTable, HarnessError> {
    let header = text.lines().next().unwrap_or_default().trim_end();
    if header == SWEEP_HEADER {
        let rows = read_sweep_csv(text.as_bytes())?
            .into_iter()
            .map(|r| {
                let key = (
                    r.strategy.to_string(),
                    r.modality.to_string(),
                    format!("{:?}", r.probability),
                );
                (key, vec![(r.ccc_valence, r.ccc_arousal)])
            })
            .collect();
        return Ok(ReportTable {
            labels: vec![label.to_string()],
            rows,
        });
    }

    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let cols: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let labels = merged_labels(&cols).ok_or_else(|| {
        HarnessError::InvalidInput(format!("'{header}' is neither a sweep nor a merged report header"))
    })?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != cols.len() {
            return Err(HarnessError::InvalidInput(format!(
                "row has {} fields, expected {}",
                record.len(),
                cols.len()
            )));
        }
        let key = (
            record[0].to_string(),
            record[1].to_string(),
            canonical_prob(&record[2])?,
        );
        let values = (0..labels.len())
            .map(|i| Ok((parse_value(&record[3 + 2 * i])?, parse_value(&record[4 + 2 * i])?)))
            .collect::<Result<Vec<_>, HarnessError>>()?;
        rows.push((key, values));
    }
    Ok(ReportTable { labels, rows })
}

fn merged_labels(cols: &[String]) -> Option<Vec<String>> {
    if cols.len() < 5 || cols.len().is_multiple_of(2) || cols[..3] != ["strategy", "modality", "probability"] {
        return None;
    }
    cols[3..]
        .chunks(2)
        .map(|pair| {
            let label = pair[0].strip_suffix(".valence")?;
            (pair[1].strip_suffix(".arousal")? == label).then(|| label.to_string())
        })
        .collect()
}

/// Joins tables on their keys. Every table must cover the same keys; keys
/// keep their order of first appearance.
pub fn merge_reports(tables: &[ReportTable]) -> Result<ReportTable, HarnessError> {
    if tables.is_empty() {
        return Err(HarnessError::InvalidInput("report needs at least one CSV".into()));
    }
    let mut labels: Vec<String> = Vec::new();
    let mut order: Vec<Key> = Vec::new();
    let mut seen = BTreeSet::new();
    for t in tables {
        for l in &t.labels {
            if labels.contains(l) {
                return Err(HarnessError::InvalidInput(format!("model label '{l}' appears twice")));
            }
            labels.push(l.clone());
        }
        for (k, _) in &t.rows {
            if seen.insert(k.clone()) {
                order.push(k.clone());
            }
        }
    }

    let mut lookups = Vec::with_capacity(tables.len());
    let mut missing = Vec::new();
    for t in tables {
        let mut map: HashMap<&Key, &Vec<(f64, f64)>> = HashMap::new();
        for (k, v) in &t.rows {
            if map.insert(k, v).is_some() {
                return Err(HarnessError::InvalidInput(format!(
                    "duplicate row {} in '{}'",
                    fmt_key(k),
                    t.labels.join(",")
                )));
            }
        }
        for k in &order {
            if !map.contains_key(k) {
                missing.push(format!("{} lacks {}", t.labels.join(","), fmt_key(k)));
            }
        }
        lookups.push(map);
    }
    if !missing.is_empty() {
        return Err(HarnessError::InvalidInput(format!(
            "inconsistent grids: {}",
            missing.join("; ")
        )));
    }

    let rows = order
        .into_iter()
        .map(|k| {
            let values = lookups.iter().flat_map(|m| m[&k].iter().copied()).collect();
            (k, values)
        })
        .collect();
    Ok(ReportTable { labels, rows })
}

fn fmt_key(k: &Key) -> String {
    format!("({}, {}, {})", k.0, k.1, k.2)
}

impl ReportTable {
    fn header(&self) -> Vec<String> {
        let mut cols = vec!["strategy".to_string(), "modality".into(), "probability".into()];
        for l in &self.labels {
            cols.push(format!("{l}.valence"));
            cols.push(format!("{l}.arousal"));
        }
        cols
    }

    fn cells(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|((s, m, p), values)| {
                let mut row = vec![s.clone(), m.clone(), p.clone()];
                for (v, a) in values {
                    row.push(format!("{v:?}"));
                    row.push(format!("{a:?}"));
                }
                row
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header().join(",");
        out.push('\n');
        for row in self.cells() {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Column-aligned plain text; numbers are shown to four decimals.
    pub fn to_text(&self) -> String {
        let header = self.header();
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|((s, m, p), values)| {
                let mut row = vec![s.clone(), m.clone(), p.clone()];
                for (v, a) in values {
                    row.push(format!("{v:.4}"));
                    row.push(format!("{a:.4}"));
                }
                row
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|c| {
                body.iter()
                    .map(|r| r[c].chars().count())
                    .chain([header[c].chars().count()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, w))| if c < 3 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = line(&header);
        out.push('\n');
        out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        out.push('\n');
        for r in &body {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: &str = "strategy,modality,probability,seed,ccc_valence,ccc_arousal\nclip_zero,video,1.0,0,0.1,0.2\n";
    const B: &str = "strategy,modality,probability,seed,ccc_valence,ccc_arousal\nclip_zero,video,1.0,0,0.3,0.4\n";

    #[test]
    fn two_single_row_sweeps() {
        let m = merge_reports(&[
            read_report_table("baseline", A).unwrap(),
            read_report_table("clipzero", B).unwrap(),
        ])
        .unwrap();
        assert_eq!(m.rows.len(), 1);
        assert_eq!(
            m.to_csv(),
            "strategy,modality,probability,baseline.valence,baseline.arousal,clipzero.valence,clipzero.arousal\n\
             clip_zero,video,1.0,0.1,0.2,0.3,0.4\n"
        );
        let text = m.to_text();
        assert!(
            text.lines().next().unwrap().starts_with("strategy   modality"),
            "{text}"
        );
    }

    #[test]
    fn merging_is_idempotent() {
        let m = merge_reports(&[
            read_report_table("baseline", A).unwrap(),
            read_report_table("clipzero", B).unwrap(),
        ])
        .unwrap();
        let csv = m.to_csv();
        let again = merge_reports(&[read_report_table("ignored", &csv).unwrap()]).unwrap();
        assert_eq!(again.to_csv(), csv);
    }

    #[test]
    fn disjoint_grids_are_rejected() {
        let c = A.replace("1.0,0,", "0.5,0,");
        let err =
            merge_reports(&[read_report_table("a", A).unwrap(), read_report_table("c", &c).unwrap()]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let msg = err.to_string();
        assert!(
            msg.contains("a lacks (clip_zero, video, 0.5)") && msg.contains("c lacks (clip_zero, video, 1.0)"),
            "{msg}"
        );
    }

    #[test]
    fn bad_inputs() {
        assert!(read_report_table("x", "a,b,c\n").is_err());
        assert!(merge_reports(&[]).is_err());
        let a = read_report_table("a", A).unwrap();
        assert!(merge_reports(&[a.clone(), a]).is_err());
    }
}
