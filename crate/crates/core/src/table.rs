//! Per-demonstration value tables and their CSV format (`demo_id,value,count`).

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Folds one more sample into a running mean.
///
/// `phi_prev` is the mean of the first `t_new - 1` samples (0 when there are none).
pub fn update_running_mean(phi_prev: f64, t_new: u64, v_prime: f64) -> f64 {
    assert!(t_new >= 1, "running mean update needs t_new >= 1");
    let t = t_new as f64;
    ((t - 1.0) / t) * phi_prev + (1.0 / t) * v_prime
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ValueRecord {
    pub value: f64,
    pub count: u64,
}

/// Running-mean value and sample count per demonstration id, in a fixed id order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValueTable {
    ids: Vec<String>,
    records: Vec<ValueRecord>,
    index: HashMap<String, usize>,
}

impl ValueTable {
    /// An all-zero table over `ids`. Duplicate ids are rejected.
    pub fn new<I, S>(ids: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut table = Self::default();
        for id in ids {
            table.push(id.into(), ValueRecord::default())?;
        }
        Ok(table)
    }

    fn push(&mut self, id: String, record: ValueRecord) -> Result<()> {
        if self.index.contains_key(&id) {
            return Err(Error::Config(format!("duplicate id `{id}` in value table")));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.records.push(record);
        Ok(())
    }

    pub fn from_records<I, S>(rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, ValueRecord)>,
        S: Into<String>,
    {
        let mut table = Self::default();
        for (id, rec) in rows {
            if rec.count == 0 && rec.value != 0.0 {
                return Err(Error::Config("a record with count 0 must have value 0".into()));
            }
            table.push(id.into(), rec)?;
        }
        Ok(table)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Option<ValueRecord> {
        self.index.get(id).map(|&i| self.records[i])
    }

    pub fn value(&self, id: &str) -> Option<f64> {
        self.get(id).map(|r| r.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ValueRecord)> {
        self.ids.iter().map(String::as_str).zip(self.records.iter().copied())
    }

    /// Accepts one marginal contribution for `id`.
    pub fn record(&mut self, id: &str, v_prime: f64) -> Result<()> {
        let &i = self
            .index
            .get(id)
            .ok_or_else(|| Error::UnknownId(id.to_string()))?;
        let rec = &mut self.records[i];
        rec.count += 1;
        rec.value = update_running_mean(rec.value, rec.count, v_prime);
        Ok(())
    }

    /// Count-weighted merge over the same id universe.
    pub fn merge(&self, other: &ValueTable) -> Result<ValueTable> {
        if self.len() != other.len() || self.ids.iter().any(|id| !other.contains(id)) {
            return Err(Error::Merge("tables cover different demonstration ids".into()));
        }
        let mut out = self.clone();
        for (i, id) in self.ids.iter().enumerate() {
            let a = self.records[i];
            let b = other.get(id).expect("checked above");
            let count = a.count + b.count;
            let value = if count == 0 {
                0.0
            } else {
                (a.count as f64 * a.value + b.count as f64 * b.value) / count as f64
            };
            out.records[i] = ValueRecord { value, count };
        }
        Ok(out)
    }

    /// Sets every value to `a * value` (counts untouched).
    pub fn scaled(&self, a: f64) -> ValueTable {
        let mut out = self.clone();
        for r in &mut out.records {
            r.value *= a;
        }
        out
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["demo_id", "value", "count"])?;
        for (id, rec) in self.iter() {
            w.write_record([id, &rec.value.to_string(), &rec.count.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["demo_id", "value", "count"] {
            return Err(Error::Protocol(format!(
                "value table header must be demo_id,value,count (got {})",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let value: f64 = rec[1]
                .trim()
                .parse()
                .map_err(|_| Error::Protocol(format!("bad value `{}`", &rec[1])))?;
            let count: u64 = rec[2]
                .trim()
                .parse()
                .map_err(|_| Error::Protocol(format!("bad count `{}`", &rec[2])))?;
            rows.push((rec[0].to_string(), ValueRecord { value, count }));
        }
        Self::from_records(rows)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(f).map_err(|e| match e {
            Error::Protocol(m) => Error::Parse {
                path: path.to_path_buf(),
                message: m,
            },
            other => other,
        })
    }
}

/// Merges tables left to right.
pub fn merge_tables(a: &ValueTable, b: &ValueTable) -> Result<ValueTable> {
    a.merge(b)
}

/// A per-demo score that may be undefined (e.g. a demo that was never sampled).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub value: Option<f64>,
    pub count: u64,
}

/// Ordered per-demo baseline scores. Shares the value-table CSV layout; undefined scores are
/// written as an empty `value` field.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreTable {
    pub rows: Vec<(String, Score)>,
}

impl ScoreTable {
    pub fn get(&self, id: &str) -> Option<Score> {
        self.rows.iter().find(|(i, _)| i == id).map(|(_, s)| *s)
    }

    pub fn undefined_ids(&self) -> Vec<&str> {
        self.rows
            .iter()
            .filter(|(_, s)| s.value.is_none())
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["demo_id", "value", "count"])?;
        for (id, s) in &self.rows {
            let v = s.value.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([id.as_str(), &v, &s.count.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    /// Reads either a value table or a score table (empty `value` means undefined).
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["demo_id", "value", "count"] {
            return Err(Error::Protocol(format!(
                "score table header must be demo_id,value,count (got {})",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut rows = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for rec in r.records() {
            let rec = rec?;
            let value = match rec[1].trim() {
                "" => None,
                v => Some(
                    v.parse::<f64>()
                        .map_err(|_| Error::Protocol(format!("bad value `{v}`")))?,
                ),
            };
            let count: u64 = rec[2]
                .trim()
                .parse()
                .map_err(|_| Error::Protocol(format!("bad count `{}`", &rec[2])))?;
            if !seen.insert(rec[0].to_string()) {
                return Err(Error::Protocol(format!("duplicate id `{}`", &rec[0])));
            }
            rows.push((rec[0].to_string(), Score { value, count }));
        }
        Ok(Self { rows })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(f).map_err(|e| match e {
            Error::Protocol(m) => Error::Parse {
                path: path.to_path_buf(),
                message: m,
            },
            other => other,
        })
    }
}

impl From<&ValueTable> for ScoreTable {
    fn from(t: &ValueTable) -> Self {
        ScoreTable {
            rows: t
                .iter()
                .map(|(id, r)| {
                    (
                        id.to_string(),
                        Score {
                            value: Some(r.value),
                            count: r.count,
                        },
                    )
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn running_mean_examples() {
        assert_eq!(update_running_mean(0.0, 1, 0.4), 0.4);
        assert!((update_running_mean(0.2, 2, 0.4) - 0.3).abs() < 1e-15);
        let mut phi = 0.0;
        for (t, v) in [0.1, 0.2, 0.6].into_iter().enumerate() {
            phi = update_running_mean(phi, t as u64 + 1, v);
        }
        assert!((phi - 0.3).abs() < 1e-15);
    }

    #[test]
    #[should_panic]
    fn running_mean_rejects_zero_count() {
        update_running_mean(0.0, 0, 1.0);
    }

    #[test]
    fn merge_examples() {
        let a = ValueTable::from_records([("x", ValueRecord { value: 0.4, count: 1 })]).unwrap();
        let b = ValueTable::from_records([("x", ValueRecord { value: 0.2, count: 1 })]).unwrap();
        let m = merge_tables(&a, &b).unwrap();
        let r = m.get("x").unwrap();
        assert_eq!(r.count, 2);
        assert!((r.value - 0.3).abs() < 1e-15);

        let empty = ValueTable::new(["x"]).unwrap();
        assert_eq!(merge_tables(&a, &empty).unwrap(), a);
        assert_eq!(merge_tables(&empty, &empty).unwrap().get("x").unwrap().value, 0.0);
    }

    #[test]
    fn merge_rejects_id_mismatch() {
        let a = ValueTable::new(["x", "y"]).unwrap();
        let b = ValueTable::new(["x", "z"]).unwrap();
        assert!(matches!(a.merge(&b), Err(Error::Merge(_))));
        let c = ValueTable::new(["x"]).unwrap();
        assert!(matches!(a.merge(&c), Err(Error::Merge(_))));
    }

    #[test]
    fn record_unknown_id() {
        let mut t = ValueTable::new(["a"]).unwrap();
        assert!(matches!(t.record("b", 1.0), Err(Error::UnknownId(_))));
    }

    #[test]
    fn csv_rejects_bad_header_and_nonzero_empty_record() {
        assert!(ValueTable::read_csv("id,value,count\na,0,0\n".as_bytes()).is_err());
        assert!(ValueTable::read_csv("demo_id,value,count\na,0.5,0\n".as_bytes()).is_err());
    }

    #[test]
    fn score_table_writes_empty_for_undefined() {
        let t = ScoreTable {
            rows: vec![
                ("a".into(), Score { value: Some(0.5), count: 2 }),
                ("b".into(), Score { value: None, count: 0 }),
            ],
        };
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "demo_id,value,count\na,0.5,2\nb,,0\n");
        let back = ScoreTable::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    proptest! {
        #[test]
        fn csv_round_trip(rows in prop::collection::vec((-1e3f64..1e3, 1u64..10_000), 0..40)) {
            let table = ValueTable::from_records(
                rows.iter().enumerate().map(|(i, &(v, c))| (format!("id,{i}\"q"), ValueRecord { value: v, count: c })),
            ).unwrap();
            let mut buf = Vec::new();
            table.write_csv(&mut buf).unwrap();
            let back = ValueTable::read_csv(buf.as_slice()).unwrap();
            prop_assert_eq!(back, table);
        }

        #[test]
        fn sequential_records_equal_arithmetic_mean(samples in prop::collection::vec(-1.0f64..1.0, 1..200)) {
            let mut t = ValueTable::new(["a"]).unwrap();
            for &s in &samples {
                t.record("a", s).unwrap();
            }
            let mean = samples.iter().sum::<f64>() / samples.len() as f64;
            prop_assert!((t.value("a").unwrap() - mean).abs() <= 1e-12);
            prop_assert_eq!(t.get("a").unwrap().count, samples.len() as u64);
        }
    }
}
