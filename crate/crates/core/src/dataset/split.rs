//! Seeded 70/15/15 partition of regression rows.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetError, NormParams};

pub const TRAIN_FRACTION: f64 = 0.70;
pub const VAL_FRACTION: f64 = 0.15;
pub const MIN_SPLIT_ROWS: usize = 10;

/// One regression sample `(t, LET, Vd) -> i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Row {
    pub t: f64,
    pub let_value: f64,
    pub vd: f64,
    pub current: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(DatasetError::Invalid(format!("unknown split tag `{other}`"))),
        }
    }
}

/// Regression rows with one split tag per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SetDataset {
    rows: Vec<Row>,
    splits: Vec<Split>,
    seed: Option<u64>,
}

impl SetDataset {
    pub fn from_parts(rows: Vec<Row>, splits: Vec<Split>, seed: Option<u64>) -> Result<Self, DatasetError> {
        if rows.len() != splits.len() {
            return Err(DatasetError::Invalid(format!(
                "{} rows but {} split tags",
                rows.len(),
                splits.len()
            )));
        }
        Ok(Self { rows, splits, seed })
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    /// Seed of the permutation that produced the tags, when known.
    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows_in(&self, split: Split) -> impl Iterator<Item = &Row> + Clone + '_ {
        self.rows
            .iter()
            .zip(&self.splits)
            .filter(move |(_, s)| **s == split)
            .map(|(r, _)| r)
    }

    pub fn count(&self, split: Split) -> usize {
        self.splits.iter().filter(|s| **s == split).count()
    }

    /// Normalization fitted on the training split.
    pub fn fit_norm(&self) -> Result<NormParams, DatasetError> {
        NormParams::fit(self.rows_in(Split::Train))
    }

    /// Writes `let,vd,t,i,split`.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<(), DatasetError> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["let", "vd", "t", "i", "split"])?;
        for (r, s) in self.rows.iter().zip(&self.splits) {
            w.write_record([
                r.let_value.to_string(),
                r.vd.to_string(),
                r.t.to_string(),
                r.current.to_string(),
                s.as_str().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(source: R, seed: Option<u64>) -> Result<Self, DatasetError> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
        let header = reader.headers()?.clone();
        if header.iter().ne(["let", "vd", "t", "i", "split"]) {
            return Err(DatasetError::Malformed {
                line: 1,
                message: "expected header `let,vd,t,i,split`".into(),
            });
        }
        let mut rows = Vec::new();
        let mut splits = Vec::new();
        for record in reader.records() {
            let record = record?;
            let line = record.position().map_or(0, |p| p.line());
            let malformed = |message: String| DatasetError::Malformed { line, message };
            if record.len() != 5 {
                return Err(malformed(format!("expected 5 fields, found {}", record.len())));
            }
            let num = |k: usize| {
                record[k]
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| malformed(format!("field {} is not a number: `{}`", k + 1, &record[k])))
            };
            rows.push(Row {
                let_value: num(0)?,
                vd: num(1)?,
                t: num(2)?,
                current: num(3)?,
            });
            splits.push(record[4].parse::<Split>().map_err(|e| malformed(e.to_string()))?);
        }
        Self::from_parts(rows, splits, seed)
    }
}

/// Shuffles row indices with a seeded permutation and cuts it at 70% / 85%.
pub fn split_dataset(rows: Vec<Row>, seed: u64) -> Result<SetDataset, DatasetError> {
    let n = rows.len();
    if n < MIN_SPLIT_ROWS {
        return Err(DatasetError::TooFewRows { found: n, needed: MIN_SPLIT_ROWS });
    }
    let n_train = (TRAIN_FRACTION * n as f64).round() as usize;
    let n_val = (VAL_FRACTION * n as f64).round() as usize;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut splits = vec![Split::Test; n];
    for (rank, &idx) in order.iter().enumerate() {
        if rank < n_train {
            splits[idx] = Split::Train;
        } else if rank < n_train + n_val {
            splits[idx] = Split::Validation;
        }
    }
    SetDataset::from_parts(rows, splits, Some(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rows(n: usize) -> Vec<Row> {
        (0..n)
            .map(|k| Row { t: k as f64, let_value: 5.0, vd: 0.6, current: k as f64 * 1e-6 })
            .collect()
    }

    #[test]
    fn hundred_rows() {
        let d = split_dataset(rows(100), 1).unwrap();
        assert_eq!(
            (d.count(Split::Train), d.count(Split::Validation), d.count(Split::Test)),
            (70, 15, 15)
        );
    }

    #[test]
    fn full_scale_counts() {
        let d = split_dataset(rows(418_000), 42).unwrap();
        assert_eq!(
            (d.count(Split::Train), d.count(Split::Validation), d.count(Split::Test)),
            (292_600, 62_700, 62_700)
        );
    }

    #[test]
    fn same_seed_same_tags() {
        let a = split_dataset(rows(500), 9).unwrap();
        let b = split_dataset(rows(500), 9).unwrap();
        let c = split_dataset(rows(500), 10).unwrap();
        assert_eq!(a.splits(), b.splits());
        assert_ne!(a.splits(), c.splits());
    }

    #[test]
    fn too_few_rows() {
        assert!(matches!(split_dataset(rows(9), 0), Err(DatasetError::TooFewRows { .. })));
    }

    #[test]
    fn csv_round_trip() {
        let d = split_dataset(rows(40), 3).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        assert!(buf.starts_with(b"let,vd,t,i,split\n"));
        assert_eq!(SetDataset::read_csv(&buf[..], Some(3)).unwrap(), d);
    }

    proptest! {
        #[test]
        fn split_is_a_partition_with_target_fractions(n in 10usize..3000, seed in any::<u64>()) {
            let d = split_dataset(rows(n), seed).unwrap();
            let counts = Split::ALL.map(|s| d.count(s));
            prop_assert_eq!(counts.iter().sum::<usize>(), n);
            prop_assert!((counts[0] as f64 - 0.70 * n as f64).abs() <= 1.0);
            prop_assert!((counts[1] as f64 - 0.15 * n as f64).abs() <= 1.0);
            prop_assert!((counts[2] as f64 - 0.15 * n as f64).abs() <= 1.0);
        }
    }
}
