use std::fmt::Write;

use crate::error::{Error, Result};
use crate::scene_sim::ObjectClass;

use super::eval::APReport;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableFormat {
    Text,
    Csv,
}

impl std::str::FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "txt" | "text" => Ok(Self::Text),
            "csv" => Ok(Self::Csv),
            other => Err(Error::Config(format!("unknown table format `{}`", other))),
        }
    }
}

fn columns(reports: &[APReport]) -> Result<Vec<ObjectClass>> {
    let first = reports.first().ok_or_else(|| Error::Data("no reports to tabulate".into()))?;
    let classes: Vec<ObjectClass> = first.ap.keys().copied().collect();
    if reports.iter().any(|r| r.ap.keys().copied().collect::<Vec<_>>() != classes) {
        return Err(Error::Data("reports disagree on the class set".into()));
    }
    Ok(classes)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.3}", x))
}

/// One row per (model, condition), one AP column per class, then mAP.
pub fn report_table(reports: &[APReport], format: TableFormat) -> Result<String> {
    let classes = columns(reports)?;
    let mut header = vec!["Model".to_string(), "Condition".to_string()];
    header.extend(classes.iter().map(|c| format!("AP-{}", c.title())));
    header.push("mAP".to_string());
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![r.model.clone(), r.condition.clone()];
            row.extend(classes.iter().map(|c| cell(r.ap[c])));
            row.push(format!("{:.3}", r.map));
            row
        })
        .collect();

    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for row in std::iter::once(&header).chain(&rows) {
                w.write_record(row).map_err(csv_err)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
            out = String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))?;
        }
        TableFormat::Text => {
            let widths: Vec<usize> = (0..header.len())
                .map(|i| std::iter::once(&header).chain(&rows).map(|r| r[i].len()).max().unwrap_or(0))
                .collect();
            let line = |row: &Vec<String>| -> String {
                row.iter()
                    .zip(&widths)
                    .enumerate()
                    .map(|(i, (f, w))| if i < 2 { format!("{:<w$}", f, w = w) } else { format!("{:>w$}", f, w = w) })
                    .collect::<Vec<_>>()
                    .join("  ")
            };
            writeln!(out, "{}", line(&header)).unwrap();
            writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1))).unwrap();
            for row in &rows {
                writeln!(out, "{}", line(row)).unwrap();
            }
        }
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {}", e))
}

/// Parse CSV produced by [`report_table`] back into string rows.
pub fn parse_csv(text: &str) -> Result<Vec<Vec<String>>> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(text.as_bytes())
        .records()
        .map(|r| r.map(|rec| rec.iter().map(str::to_string).collect()).map_err(csv_err))
        .collect()
}
