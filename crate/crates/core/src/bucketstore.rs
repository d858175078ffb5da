//! Reduction of observation streams into per-bucket sums and counts, and the
//! bucket-sum CSV format.
//!
//! File layout: optional `#` comment lines, then the header
//! `group,metric,period,bucket,sum,count` and one row per (key, bucket),
//! zero buckets included. The bucket count of a key is its number of rows.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diversion::{self, HashSeed, UserId};
use crate::stats::NeumaierSum;
use crate::{Error, Result};

pub const DEFAULT_BUCKETS: usize = 300;
pub const HEADER: [&str; 6] = ["group", "metric", "period", "bucket", "sum", "count"];

/// One successful observation (`I_g(u) = 1`, `Z = 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub user: UserId,
    pub group: String,
    pub metric: String,
    pub period: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AggregateKey {
    pub group: String,
    pub metric: String,
    pub period: String,
}

impl AggregateKey {
    pub fn new(group: impl Into<String>, metric: impl Into<String>, period: impl Into<String>) -> Self {
        Self { group: group.into(), metric: metric.into(), period: period.into() }
    }
}

impl fmt::Display for AggregateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.group, self.metric, self.period)
    }
}

impl std::str::FromStr for AggregateKey {
    type Err = Error;

    /// Parses `group,metric,period` or `group/metric/period`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split([',', '/']).collect();
        match parts.as_slice() {
            [g, m, p] => Ok(AggregateKey::new(*g, *m, *p)),
            _ => Err(Error::contract(format!("expected group,metric,period, got {s:?}"))),
        }
    }
}

/// Length-`B` bucket sums `S(g,m,t,b)` and counts `N(g,m,t,b)` for one key.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketAggregate {
    pub key: AggregateKey,
    pub sums: Vec<f64>,
    pub counts: Vec<u64>,
}

impl BucketAggregate {
    pub fn zero(key: AggregateKey, bucket_count: usize) -> Self {
        Self { key, sums: vec![0.0; bucket_count], counts: vec![0; bucket_count] }
    }

    pub fn from_parts(key: AggregateKey, sums: Vec<f64>, counts: Vec<u64>) -> Result<Self> {
        if sums.len() != counts.len() {
            return Err(Error::contract(format!(
                "{} sums but {} counts for {key}",
                sums.len(),
                counts.len()
            )));
        }
        if sums.len() < 2 {
            return Err(Error::contract(format!("{key}: need at least 2 buckets, got {}", sums.len())));
        }
        Ok(Self { key, sums, counts })
    }

    pub fn bucket_count(&self) -> usize {
        self.sums.len()
    }

    /// `S_t(g,m)`, the compensated total of the bucket sums.
    pub fn total_sum(&self) -> f64 {
        self.sums.iter().copied().collect::<NeumaierSum>().value()
    }

    /// `N_t(g,m)`.
    pub fn total_count(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn counts_f64(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }

    /// `S / N`, the average metric.
    pub fn average(&self) -> Option<f64> {
        let n = self.total_count();
        (n > 0).then(|| self.total_sum() / n as f64)
    }
}

/// Elementwise sum of two aggregates of the same key and bucket count.
pub fn merge(a: &BucketAggregate, b: &BucketAggregate) -> Result<BucketAggregate> {
    if a.key != b.key {
        return Err(Error::Mismatch(format!("cannot merge {} with {}", a.key, b.key)));
    }
    if a.bucket_count() != b.bucket_count() {
        return Err(Error::Mismatch(format!(
            "{}: bucket counts differ ({} vs {})",
            a.key,
            a.bucket_count(),
            b.bucket_count()
        )));
    }
    Ok(BucketAggregate {
        key: a.key.clone(),
        sums: a.sums.iter().zip(&b.sums).map(|(x, y)| x + y).collect(),
        counts: a.counts.iter().zip(&b.counts).map(|(x, y)| x + y).collect(),
    })
}

/// Single-pass streaming reducer keyed by (group, metric, period).
#[derive(Debug)]
pub struct Aggregator {
    seed: HashSeed,
    buckets: u32,
    state: BTreeMap<AggregateKey, (Vec<NeumaierSum>, Vec<u64>)>,
    seen: usize,
}

impl Aggregator {
    pub fn new(bucket_seed: HashSeed, bucket_count: usize) -> Result<Self> {
        let buckets = u32::try_from(bucket_count)
            .ok()
            .filter(|&b| b >= 2)
            .ok_or_else(|| Error::contract(format!("bucket count must be in [2, 2^32), got {bucket_count}")))?;
        Ok(Self { seed: bucket_seed, buckets, state: BTreeMap::new(), seen: 0 })
    }

    pub fn push(&mut self, record: &ObservationRecord) -> Result<()> {
        let index = self.seen;
        self.seen += 1;
        if !record.value.is_finite() {
            return Err(Error::NonFiniteValue { record: index, value: record.value });
        }
        let bucket = diversion::assign_bucket(&record.user, self.seed, self.buckets)?.bucket as usize;
        let b = self.buckets as usize;
        let key = AggregateKey::new(&record.group, &record.metric, &record.period);
        let (sums, counts) = self
            .state
            .entry(key)
            .or_insert_with(|| (vec![NeumaierSum::new(); b], vec![0; b]));
        sums[bucket].add(record.value);
        counts[bucket] += 1;
        Ok(())
    }

    pub fn records_seen(&self) -> usize {
        self.seen
    }

    pub fn finish(self) -> BTreeMap<AggregateKey, BucketAggregate> {
        self.state
            .into_iter()
            .map(|(key, (sums, counts))| {
                let sums = sums.iter().map(NeumaierSum::value).collect();
                (key.clone(), BucketAggregate { key, sums, counts })
            })
            .collect()
    }
}

/// Reduces a record stream into one aggregate per key present in the stream.
pub fn aggregate<'a>(
    records: impl IntoIterator<Item = &'a ObservationRecord>,
    bucket_seed: HashSeed,
    bucket_count: usize,
) -> Result<BTreeMap<AggregateKey, BucketAggregate>> {
    let mut agg = Aggregator::new(bucket_seed, bucket_count)?;
    for r in records {
        agg.push(r)?;
    }
    Ok(agg.finish())
}

pub fn write_aggregates_to<'a, W: Write>(
    aggs: impl IntoIterator<Item = &'a BucketAggregate>,
    mut out: W,
    preamble: &[String],
) -> Result<()> {
    for line in preamble {
        writeln!(out, "# {line}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HEADER)?;
    for a in aggs {
        for (b, (s, c)) in a.sums.iter().zip(&a.counts).enumerate() {
            w.write_record([
                a.key.group.as_str(),
                a.key.metric.as_str(),
                a.key.period.as_str(),
                &b.to_string(),
                // Display for f64 is the shortest string that round-trips.
                &s.to_string(),
                &c.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_aggregates<'a>(
    aggs: impl IntoIterator<Item = &'a BucketAggregate>,
    path: impl AsRef<Path>,
    preamble: &[String],
) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_aggregates_to(aggs, file, preamble)
}

pub fn read_aggregates_from<R: Read>(input: R) -> Result<BTreeMap<AggregateKey, BucketAggregate>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(true)
        .from_reader(input);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(Error::Parse { line: 1, message: format!("expected header {}", HEADER.join(",")) });
    }

    let mut rows: BTreeMap<AggregateKey, Vec<(usize, usize, f64, u64)>> = BTreeMap::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let bad = |message: String| Error::Parse { line, message };
        if row.len() != HEADER.len() {
            return Err(bad(format!("expected {} fields, found {}", HEADER.len(), row.len())));
        }
        let bucket: usize = row[3].trim().parse().map_err(|_| bad(format!("bad bucket index {:?}", &row[3])))?;
        let sum: f64 = row[4].trim().parse().map_err(|_| bad(format!("bad sum {:?}", &row[4])))?;
        if !sum.is_finite() {
            return Err(bad(format!("non-finite sum {sum}")));
        }
        let count: u64 = row[5].trim().parse().map_err(|_| bad(format!("bad count {:?}", &row[5])))?;
        rows.entry(AggregateKey::new(&row[0], &row[1], &row[2]))
            .or_default()
            .push((line, bucket, sum, count));
    }

    let mut out = BTreeMap::new();
    for (key, entries) in rows {
        let b = entries.len();
        let mut agg = BucketAggregate::zero(key.clone(), b);
        let mut seen = vec![false; b];
        for (line, bucket, sum, count) in entries {
            if bucket >= b {
                return Err(Error::Parse {
                    line,
                    message: format!("bucket index {bucket} out of range for {key} with {b} buckets"),
                });
            }
            if std::mem::replace(&mut seen[bucket], true) {
                return Err(Error::Parse { line, message: format!("duplicate bucket {bucket} for {key}") });
            }
            agg.sums[bucket] = sum;
            agg.counts[bucket] = count;
        }
        if b < 2 {
            return Err(Error::Parse { line: 0, message: format!("{key} has fewer than 2 buckets") });
        }
        out.insert(key, agg);
    }
    Ok(out)
}

pub fn read_aggregates(path: impl AsRef<Path>) -> Result<BTreeMap<AggregateKey, BucketAggregate>> {
    read_aggregates_from(std::fs::File::open(path)?)
}

/// Reads `user,group,metric,period,value` records.
pub fn read_records_from<R: Read>(input: R) -> Result<Vec<ObservationRecord>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<ObservationRecord>> {
    read_records_from(std::fs::File::open(path)?)
}

pub fn write_records_to<W: Write>(records: &[ObservationRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
