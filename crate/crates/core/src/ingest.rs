//! Transaction log loading, chronological splitting and feature standardisation.

use crate::engine::Array2;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;

/// Ground-truth class of a transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Legit,
    Fraud,
    Unlabeled,
}

impl Label {
    /// `Some(1)` for fraud, `Some(0)` for legitimate, `None` when unlabeled.
    pub fn class(self) -> Option<usize> {
        match self {
            Label::Legit => Some(0),
            Label::Fraud => Some(1),
            Label::Unlabeled => None,
        }
    }

    pub fn from_class(c: usize) -> Label {
        if c == 1 {
            Label::Fraud
        } else {
            Label::Legit
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Label::Legit => "0",
            Label::Fraud => "1",
            Label::Unlabeled => "2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransactionRecord {
    /// Dense node id, equal to the row's position after sorting.
    pub id: usize,
    /// Identifier from the source file (or the original row number).
    pub external_id: String,
    pub timestamp: i64,
    /// Category per view key, aligned with [`TransactionTable::view_keys`].
    pub categories: Vec<String>,
    pub features: Vec<f64>,
    pub label: Label,
}

/// Time-ordered transactions with their view keys and numeric features.
#[derive(Debug, Clone, PartialEq)]
pub struct TransactionTable {
    rows: Vec<TransactionRecord>,
    feature_names: Vec<String>,
    view_keys: Vec<String>,
}

impl TransactionTable {
    /// Validates arity, stable-sorts by timestamp and reassigns dense ids.
    pub fn new(mut rows: Vec<TransactionRecord>, feature_names: Vec<String>, view_keys: Vec<String>) -> Result<Self> {
        for (i, r) in rows.iter().enumerate() {
            if r.features.len() != feature_names.len() {
                return Err(Error::Schema(format!(
                    "row {i} has {} features, expected {}",
                    r.features.len(),
                    feature_names.len()
                )));
            }
            if r.categories.len() != view_keys.len() {
                return Err(Error::Schema(format!(
                    "row {i} has {} view categories, expected {}",
                    r.categories.len(),
                    view_keys.len()
                )));
            }
        }
        rows.sort_by_key(|r| r.timestamp);
        for (i, r) in rows.iter_mut().enumerate() {
            r.id = i;
        }
        Ok(TransactionTable {
            rows,
            feature_names,
            view_keys,
        })
    }

    pub fn rows(&self) -> &[TransactionRecord] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn view_keys(&self) -> &[String] {
        &self.view_keys
    }

    pub fn view_index(&self, key: &str) -> Result<usize> {
        self.view_keys
            .iter()
            .position(|k| k == key)
            .ok_or_else(|| Error::View(key.to_string()))
    }

    pub fn labels(&self) -> Vec<Label> {
        self.rows.iter().map(|r| r.label).collect()
    }

    /// Raw features as an `n x d` array.
    pub fn raw_features<T: Scalar>(&self) -> Array2<T> {
        let d = self.feature_names.len();
        let data = self
            .rows
            .iter()
            .flat_map(|r| r.features.iter().map(|&v| T::of(v)))
            .collect();
        Array2::from_vec(self.rows.len(), d, data).expect("arity validated")
    }

    /// Keeps only the first `n` view keys.
    pub fn truncate_views(&mut self, n: usize) {
        self.view_keys.truncate(n);
        for r in &mut self.rows {
            r.categories.truncate(n);
        }
    }

    pub fn class_counts(&self) -> ClassCounts {
        let mut c = ClassCounts::default();
        for r in &self.rows {
            match r.label {
                Label::Fraud => c.fraud += 1,
                Label::Legit => c.legit += 1,
                Label::Unlabeled => c.unlabeled += 1,
            }
        }
        c
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub fraud: usize,
    pub legit: usize,
    pub unlabeled: usize,
}

/// Column roles of a transaction CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaConfig {
    #[serde(default)]
    pub id: Option<String>,
    pub timestamp: String,
    pub label: String,
    /// Raw label value -> class.
    pub label_map: BTreeMap<String, Label>,
    pub features: Vec<String>,
    pub view_keys: Vec<String>,
    #[serde(default)]
    pub delimiter: Option<char>,
}

impl SchemaConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Row accounting produced by [`load_transactions`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows_read: usize,
    pub rows_accepted: usize,
    pub rows_rejected: usize,
    pub rejected_by_reason: BTreeMap<String, usize>,
    pub class_counts: ClassCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_sizes: Option<[usize; 3]>,
}

impl IngestReport {
    fn reject(&mut self, reason: &str) {
        self.rows_rejected += 1;
        *self.rejected_by_reason.entry(reason.to_string()).or_default() += 1;
    }
}

/// Integer epoch units, or a date/datetime string converted to epoch seconds.
pub fn parse_timestamp(raw: &str) -> Option<i64> {
    let s = raw.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|dt| dt.and_utc().timestamp())
}

pub fn load_transactions(path: &Path, schema: &SchemaConfig) -> Result<(TransactionTable, IngestReport)> {
    let file = std::fs::File::open(path)?;
    read_transactions(file, schema)
}

/// Parses CSV text with a header row according to `schema`.
pub fn read_transactions<R: Read>(reader: R, schema: &SchemaConfig) -> Result<(TransactionTable, IngestReport)> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter.unwrap_or(',') as u8)
        .flexible(true)
        .from_reader(reader);
    let header: HashMap<String, usize> = rdr
        .headers()?
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim().to_string(), i))
        .collect();
    let col = |name: &str| {
        header
            .get(name)
            .copied()
            .ok_or_else(|| Error::Schema(format!("missing declared column `{name}`")))
    };
    let id_col = schema.id.as_deref().map(col).transpose()?;
    let ts_col = col(&schema.timestamp)?;
    let label_col = col(&schema.label)?;
    let feat_cols = schema.features.iter().map(|f| col(f)).collect::<Result<Vec<_>>>()?;
    let view_cols = schema.view_keys.iter().map(|v| col(v)).collect::<Result<Vec<_>>>()?;
    let width = header.len();

    let mut report = IngestReport::default();
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        report.rows_read += 1;
        let rec = match rec {
            Ok(r) if r.len() == width => r,
            _ => {
                report.reject("arity");
                continue;
            }
        };
        let Some(timestamp) = parse_timestamp(&rec[ts_col]) else {
            report.reject("timestamp");
            continue;
        };
        let features: Option<Vec<f64>> = feat_cols
            .iter()
            .map(|&c| rec[c].trim().parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect();
        let Some(features) = features else {
            report.reject("feature");
            continue;
        };
        let Some(&label) = schema.label_map.get(rec[label_col].trim()) else {
            report.reject("label");
            continue;
        };
        rows.push(TransactionRecord {
            id: 0,
            external_id: match id_col {
                Some(c) => rec[c].to_string(),
                None => line.to_string(),
            },
            timestamp,
            categories: view_cols.iter().map(|&c| rec[c].to_string()).collect(),
            features,
            label,
        });
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no valid rows ({} read, {} rejected)",
            report.rows_read, report.rows_rejected
        )));
    }
    report.rows_accepted = rows.len();
    let table = TransactionTable::new(rows, schema.features.clone(), schema.view_keys.clone())?;
    report.class_counts = table.class_counts();
    Ok((table, report))
}

/// Row indices of the three chronological partitions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndex {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndex {
    pub fn sizes(&self) -> [usize; 3] {
        [self.train.len(), self.val.len(), self.test.len()]
    }

    /// Partition tag per row: 0 train, 1 val, 2 test.
    pub fn assignment(&self, n: usize) -> Vec<u8> {
        let mut a = vec![0u8; n];
        for &i in &self.val {
            a[i] = 1;
        }
        for &i in &self.test {
            a[i] = 2;
        }
        a
    }
}

/// Train gets the first `floor(r_train·n)` rows, val the next `floor(r_val·n)`,
/// test the remainder. Rows must already be in time order.
pub fn chronological_split(n: usize, ratios: (f64, f64, f64)) -> Result<SplitIndex> {
    let (a, b, c) = ratios;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Split(format!(
            "ratios must be positive and sum to 1, got ({a}, {b}, {c})"
        )));
    }
    // the epsilon keeps exact products such as 0.57·100 from flooring one short
    let n_train = (a * n as f64 + 1e-9).floor() as usize;
    let n_val = (b * n as f64 + 1e-9).floor() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);
    let split = SplitIndex {
        train: (0..n_train).collect(),
        val: (n_train..n_train + n_val).collect(),
        test: (n_train + n_val..n).collect(),
    };
    if split.sizes().contains(&0) {
        return Err(Error::Split(format!(
            "n={n} gives sizes {:?}; every partition must be nonempty",
            split.sizes()
        )));
    }
    Ok(split)
}

/// Per-column standardiser fitted on a subset of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Population standard deviation; zero marks a constant column.
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(table: &TransactionTable, rows: &[usize]) -> Self {
        let d = table.feature_names().len();
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for &i in rows {
            for (m, &v) in mean.iter_mut().zip(&table.rows()[i].features) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for &i in rows {
            for (l, &v) in table.rows()[i].features.iter().enumerate() {
                var[l] += (v - mean[l]) * (v - mean[l]);
            }
        }
        let std = var
            .into_iter()
            .zip(&mean)
            .map(|(v, m)| {
                let s = (v / n).sqrt();
                // constant up to rounding
                if s > 1e-12 * (1.0 + m.abs()) {
                    s
                } else {
                    0.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn transform_value(&self, col: usize, v: f64) -> f64 {
        if self.std[col] == 0.0 {
            0.0
        } else {
            (v - self.mean[col]) / self.std[col]
        }
    }

    pub fn transform<T: Scalar>(&self, table: &TransactionTable) -> Array2<T> {
        let d = self.mean.len();
        let data = table
            .rows()
            .iter()
            .flat_map(|r| (0..d).map(move |l| T::of(self.transform_value(l, r.features[l]))))
            .collect();
        Array2::from_vec(table.len(), d, data).expect("arity validated")
    }
}

/// Standardises every column with statistics from `train_rows` only.
pub fn encode_features<T: Scalar>(table: &TransactionTable, train_rows: &[usize]) -> (Array2<T>, Standardizer) {
    let s = Standardizer::fit(table, train_rows);
    (s.transform(table), s)
}

/// Writes the encoded snapshot: node, external id, timestamp, split, label,
/// view categories, then standardised features.
pub fn write_encoded_csv<T: Scalar>(
    path: &Path,
    table: &TransactionTable,
    split: &SplitIndex,
    encoded: &Array2<T>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["node", "id", "timestamp", "split", "label"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(table.view_keys().iter().cloned());
    header.extend(table.feature_names().iter().cloned());
    w.write_record(&header)?;
    let tags = split.assignment(table.len());
    for (i, r) in table.rows().iter().enumerate() {
        let mut rec = vec![
            r.id.to_string(),
            r.external_id.clone(),
            r.timestamp.to_string(),
            ["train", "val", "test"][tags[i] as usize].to_string(),
            r.label.code().to_string(),
        ];
        rec.extend(r.categories.iter().cloned());
        rec.extend(encoded.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
