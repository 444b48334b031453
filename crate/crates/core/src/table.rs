//! Labelled numeric CSV tables.
//!
//! Every CSV this crate reads or writes has the same shape: a header row, a
//! first column of row labels (dates), and one numeric column per series.
//! Floats are written with Rust's shortest round-trip formatting, so a
//! write followed by a read reproduces every value bit for bit.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TableError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("empty table: a header row is required")]
    MissingHeader,
    #[error("header must start with a row-label column and have at least one data column")]
    BadHeader,
    #[error("row {row}: expected {expected} fields, found {found}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("row {row}, column `{column}`: missing value")]
    MissingCell { row: usize, column: String },
    #[error("row {row}, column `{column}`: cannot parse `{value}` as a number")]
    BadNumber {
        row: usize,
        column: String,
        value: String,
    },
}

/// A row-labelled numeric table (rows × columns).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTable {
    pub index_name: String,
    pub row_labels: Vec<String>,
    pub column_labels: Vec<String>,
    pub values: DMatrix<f64>,
}

impl LabeledTable {
    pub fn read<R: Read>(reader: R) -> Result<Self, TableError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut records = rdr.records();
        let header = records.next().ok_or(TableError::MissingHeader)??;
        if header.len() < 2 {
            return Err(TableError::BadHeader);
        }
        let index_name = header[0].to_string();
        let column_labels: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let width = header.len();

        let mut row_labels = Vec::new();
        let mut data = Vec::new();
        for (i, rec) in records.enumerate() {
            let rec = rec?;
            // Row numbers in diagnostics are 1-based file lines (header is line 1).
            let line = i + 2;
            if rec.len() == 1 && rec[0].is_empty() {
                continue;
            }
            if rec.len() != width {
                return Err(TableError::RaggedRow {
                    row: line,
                    expected: width,
                    found: rec.len(),
                });
            }
            row_labels.push(rec[0].to_string());
            for (j, field) in rec.iter().enumerate().skip(1) {
                if field.is_empty() {
                    return Err(TableError::MissingCell {
                        row: line,
                        column: column_labels[j - 1].clone(),
                    });
                }
                let v: f64 = field.parse().map_err(|_| TableError::BadNumber {
                    row: line,
                    column: column_labels[j - 1].clone(),
                    value: field.to_string(),
                })?;
                data.push(v);
            }
        }
        let values = DMatrix::from_row_slice(row_labels.len(), column_labels.len(), &data);
        Ok(Self {
            index_name,
            row_labels,
            column_labels,
            values,
        })
    }

    pub fn read_path(path: impl AsRef<Path>) -> Result<Self, TableError> {
        Self::read(File::open(path)?)
    }

    pub fn write<W: Write>(&self, writer: W) -> Result<(), TableError> {
        let mut wtr = csv::WriterBuilder::new().from_writer(writer);
        let mut header = Vec::with_capacity(self.column_labels.len() + 1);
        header.push(self.index_name.as_str());
        header.extend(self.column_labels.iter().map(String::as_str));
        wtr.write_record(&header)?;
        let mut fields = Vec::with_capacity(header.len());
        for (i, label) in self.row_labels.iter().enumerate() {
            fields.clear();
            fields.push(label.clone());
            for j in 0..self.values.ncols() {
                fields.push(format_float(self.values[(i, j)]));
            }
            wtr.write_record(&fields)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_path(&self, path: impl AsRef<Path>) -> Result<(), TableError> {
        let file = File::create(path)?;
        self.write(std::io::BufWriter::new(file))
    }
}

/// Shortest representation that parses back to the same `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}
