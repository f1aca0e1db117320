//! Result tables: foreground classes, then background, then the average.

use serde::{Deserialize, Serialize};

use super::EvalReport;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    Csv,
    Markdown,
}

/// One parsed csv row, values in table column order.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub method: String,
    pub values: Vec<Option<f64>>,
    pub stds: Option<Vec<Option<f64>>>,
}

/// Column order as indices into `mean`: classes 1..K, class 0, average.
fn column_order(k: usize) -> Vec<usize> {
    (1..k).chain([0, k]).collect()
}

fn column_names(class_names: &[String]) -> Vec<String> {
    let mut names: Vec<String> = class_names[1..].to_vec();
    names.push(class_names[0].clone());
    names.push("Average".into());
    names
}

fn csv_cell(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn percent(v: Option<f64>) -> String {
    v.map(|v| format!("{:.1}", 100.0 * v))
        .unwrap_or_else(|| "-".into())
}

pub fn emit_table(reports: &[EvalReport], format: TableFormat) -> Result<String> {
    let Some(first) = reports.first() else {
        return Err(Error::Emission("no reports".into()));
    };
    if first.class_names.is_empty() {
        return Err(Error::Emission("reports have no classes".into()));
    }
    if let Some(r) = reports.iter().find(|r| r.class_names != first.class_names) {
        return Err(Error::Emission(format!(
            "'{}' has classes {:?}, expected {:?}",
            r.method, r.class_names, first.class_names
        )));
    }
    let k = first.class_names.len();
    let order = column_order(k);
    let names = column_names(&first.class_names);
    let with_std = reports.iter().any(|r| r.std.is_some());
    match format {
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header = vec!["method".to_string()];
            for n in &names {
                header.push(n.clone());
                if with_std {
                    header.push(format!("{n} std"));
                }
            }
            w.write_record(&header)
                .map_err(|e| Error::Emission(e.to_string()))?;
            for r in reports {
                let mut row = vec![r.method.clone()];
                for &i in &order {
                    row.push(csv_cell(r.mean[i]));
                    if with_std {
                        row.push(csv_cell(r.std.as_ref().and_then(|s| s[i])));
                    }
                }
                w.write_record(&row)
                    .map_err(|e| Error::Emission(e.to_string()))?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Emission(e.to_string()))?;
            Ok(String::from_utf8(bytes).expect("csv is utf-8"))
        }
        TableFormat::Markdown => {
            let mut out = format!("| Method | {} |\n", names.join(" | "));
            out.push_str(&format!("|---|{}\n", "---:|".repeat(names.len())));
            for r in reports {
                let cells: Vec<String> = order
                    .iter()
                    .map(|&i| match r.std.as_ref() {
                        Some(s) if r.mean[i].is_some() => {
                            format!("{} ± {}", percent(r.mean[i]), percent(s[i]))
                        }
                        _ => percent(r.mean[i]),
                    })
                    .collect();
                out.push_str(&format!("| {} | {} |\n", r.method, cells.join(" | ")));
            }
            Ok(out)
        }
    }
}

/// Parses a table produced by [`emit_table`] in csv format.
pub fn parse_csv_table(text: &str) -> Result<(Vec<String>, Vec<TableRow>)> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r
        .headers()
        .map_err(|e| Error::Emission(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.first().map(String::as_str) != Some("method") {
        return Err(Error::Emission("first column must be 'method'".into()));
    }
    let with_std = header.get(2).is_some_and(|h| h.ends_with(" std"));
    let columns: Vec<String> = header[1..]
        .iter()
        .filter(|h| !(with_std && h.ends_with(" std")))
        .cloned()
        .collect();
    let parse = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse()
                .map(Some)
                .map_err(|_| Error::Emission(format!("bad number '{s}'")))
        }
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Emission(e.to_string()))?;
        let fields: Vec<&str> = rec.iter().collect();
        let mut values = Vec::new();
        let mut stds = Vec::new();
        let step = if with_std { 2 } else { 1 };
        for c in 0..columns.len() {
            values.push(parse(fields[1 + step * c])?);
            if with_std {
                stds.push(parse(fields[2 + step * c])?);
            }
        }
        rows.push(TableRow {
            method: fields[0].to_string(),
            values,
            stds: with_std.then_some(stds),
        });
    }
    Ok((columns, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{Accumulation, SeedResult};

    fn report(method: &str, seeds: &[(u64, f64)]) -> EvalReport {
        let names = ["Background", "Body", "Light"].map(String::from).to_vec();
        let per_seed = seeds
            .iter()
            .map(|&(seed, x)| SeedResult {
                seed,
                per_class: vec![Some(0.9), Some(x), None],
                average: Some((0.9 + x) / 2.0),
            })
            .collect();
        EvalReport::from_seeds(method, names, Accumulation::Dataset, per_seed).unwrap()
    }

    #[test]
    fn csv_roundtrip_with_and_without_std() {
        let reports = vec![
            report("a", &[(0, 0.1), (1, 0.3)]),
            report("b", &[(0, 1.0 / 3.0), (1, 0.2)]),
        ];
        let text = emit_table(&reports, TableFormat::Csv).unwrap();
        let (cols, rows) = parse_csv_table(&text).unwrap();
        assert_eq!(cols, vec!["Body", "Light", "Background", "Average"]);
        for (r, row) in reports.iter().zip(&rows) {
            let order = [1, 2, 0, 3];
            assert_eq!(row.values, order.map(|i| r.mean[i]).to_vec());
            assert_eq!(
                row.stds.as_ref().unwrap(),
                &order.map(|i| r.std.as_ref().unwrap()[i]).to_vec()
            );
        }
        let single = emit_table(&[report("c", &[(0, 0.5)])], TableFormat::Csv).unwrap();
        assert!(!single.contains("std"));
        assert_eq!(single.lines().count(), 2);
    }

    #[test]
    fn markdown_cells() {
        let md = emit_table(&[report("a", &[(0, 0.1), (1, 0.3)])], TableFormat::Markdown).unwrap();
        assert!(md.starts_with("| Method | Body | Light | Background | Average |"));
        assert!(
            md.contains("| a | 20.0 ± 10.0 | - | 90.0 ± 0.0 | 55.0 ± 5.0 |"),
            "{md}"
        );
    }

    #[test]
    fn schema_mismatch() {
        let mut b = report("b", &[(0, 0.5)]);
        b.class_names[1] = "Wheel".into();
        assert!(matches!(
            emit_table(&[report("a", &[(0, 0.5)]), b], TableFormat::Csv),
            Err(Error::Emission(_))
        ));
    }
}
