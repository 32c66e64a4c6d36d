//! Pair comparison matrices, ACR rating tables and the conversion between them.
//!
//! A [`PairComparisonMatrix`] stores `m_ij`, the accumulated preference mass of
//! stimulus `i` over stimulus `j`. Counts are reals so that the half-counts
//! produced by tied ratings are held exactly.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairComparisonMatrix {
    ids: Vec<String>,
    counts: Vec<f64>,
}

impl PairComparisonMatrix {
    /// All-zero matrix over the given stimuli.
    pub fn zeros(ids: Vec<String>) -> Self {
        let n = ids.len();
        Self {
            ids,
            counts: vec![0.0; n * n],
        }
    }

    /// Builds a matrix from dense rows. The diagonal must be zero and all
    /// counts finite and non-negative.
    pub fn from_rows(ids: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let n = ids.len();
        if rows.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: rows.len(),
            });
        }
        let mut m = Self::zeros(ids);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: row.len(),
                });
            }
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() || v < 0.0 || (i == j && v != 0.0) {
                    return Err(Error::InvalidCount(v));
                }
                m.counts[i * n + j] = v;
            }
        }
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|s| s == id)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.counts[i * self.n() + j]
    }

    /// Adds preference mass for `winner` over `loser`.
    pub fn add(&mut self, winner: usize, loser: usize, mass: f64) -> Result<()> {
        let n = self.n();
        if winner >= n || loser >= n || winner == loser {
            return Err(Error::InvalidPair(winner, loser));
        }
        if !mass.is_finite() || mass < 0.0 {
            return Err(Error::InvalidCount(mass));
        }
        self.counts[winner * n + loser] += mass;
        Ok(())
    }

    /// `m_ij + m_ji`.
    pub fn pair_total(&self, i: usize, j: usize) -> f64 {
        self.get(i, j) + self.get(j, i)
    }

    pub fn total_mass(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.counts.chunks(self.n().max(1)).map(|r| r.to_vec()).collect()
    }

    /// Every count scaled by `weight`.
    pub fn scaled(&self, weight: f64) -> Self {
        Self {
            ids: self.ids.clone(),
            counts: self.counts.iter().map(|c| c * weight).collect(),
        }
    }

    /// Unordered pairs `(i, j)`, `i < j`, carrying any mass.
    pub fn observed_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        let mut out = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if self.pair_total(i, j) > 0.0 {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Hex SHA-256 over the ids and the bit patterns of the counts.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for id in &self.ids {
            h.update((id.len() as u64).to_le_bytes());
            h.update(id.as_bytes());
        }
        for c in &self.counts {
            h.update(c.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Canonical long-form CSV: every ordered off-diagonal pair in id order,
    /// zero rows included so that the stimulus set survives a round trip.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let n = self.n();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| self.ids[a].cmp(&self.ids[b]));
        let mut wtr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(w);
        let io = |e: csv::Error| Error::Io(e.to_string());
        wtr.write_record(["winner_id", "loser_id", "count"]).map_err(io)?;
        for &i in &order {
            for &j in &order {
                if i != j {
                    wtr.write_record([
                        self.ids[i].as_str(),
                        self.ids[j].as_str(),
                        &format_count(self.get(i, j)),
                    ])
                    .map_err(io)?;
                }
            }
        }
        wtr.flush()?;
        Ok(())
    }

    /// Parses the long-form CSV. Ids are the sorted union of all ids seen.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        check_header(&mut rdr, &["winner_id", "loser_id", "count"])?;
        let mut rows: Vec<(String, String, f64)> = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(csv_error)?;
            let line = record_line(&rec);
            if rec.len() != 3 {
                return Err(Error::Parse {
                    line,
                    message: format!("expected 3 fields, found {}", rec.len()),
                });
            }
            let count: f64 = rec[2].parse().map_err(|_| Error::Parse {
                line,
                message: format!("invalid count {:?}", &rec[2]),
            })?;
            if !count.is_finite() || count < 0.0 {
                return Err(Error::Parse {
                    line,
                    message: format!("count must be non-negative, got {count}"),
                });
            }
            if rec[0] == rec[1] {
                return Err(Error::Parse {
                    line,
                    message: "winner and loser are the same stimulus".into(),
                });
            }
            rows.push((rec[0].to_string(), rec[1].to_string(), count));
        }
        let ids: BTreeSet<&str> = rows
            .iter()
            .flat_map(|(a, b, _)| [a.as_str(), b.as_str()])
            .collect();
        let ids: Vec<String> = ids.into_iter().map(str::to_string).collect();
        let index: HashMap<&str, usize> =
            ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut m = Self::zeros(ids.clone());
        for (a, b, c) in &rows {
            m.add(index[a.as_str()], index[b.as_str()], *c)?;
        }
        Ok(m)
    }
}

/// Shortest decimal that round-trips the value.
pub(crate) fn format_count(v: f64) -> String {
    format!("{v}")
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

fn record_line(rec: &csv::StringRecord) -> usize {
    rec.position().map(|p| p.line() as usize).unwrap_or(0)
}

fn check_header<R: Read>(rdr: &mut csv::Reader<R>, expected: &[&str]) -> Result<()> {
    let header = rdr.headers().map_err(csv_error)?;
    let got: Vec<&str> = header.iter().collect();
    if got != expected {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {}, found {}", expected.join(","), got.join(",")),
        });
    }
    Ok(())
}

/// Raw single-stimulus ratings, one value per (observer, stimulus).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AcrRatingTable {
    ratings: BTreeMap<String, BTreeMap<String, f64>>,
    bounds: Option<(f64, f64)>,
}

impl AcrRatingTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Ratings outside `[min, max]` are rejected on insert.
    pub fn with_bounds(min: f64, max: f64) -> Self {
        Self {
            ratings: BTreeMap::new(),
            bounds: Some((min, max)),
        }
    }

    pub fn insert(&mut self, observer: &str, stimulus: &str, rating: f64) -> Result<()> {
        if !rating.is_finite() {
            return Err(Error::RatingOutOfBounds(rating));
        }
        if let Some((lo, hi)) = self.bounds {
            if rating < lo || rating > hi {
                return Err(Error::RatingOutOfBounds(rating));
            }
        }
        let row = self.ratings.entry(observer.to_string()).or_default();
        if row.contains_key(stimulus) {
            return Err(Error::DuplicateRating {
                observer: observer.to_string(),
                stimulus: stimulus.to_string(),
            });
        }
        row.insert(stimulus.to_string(), rating);
        Ok(())
    }

    pub fn n_obs(&self) -> usize {
        self.ratings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratings.values().all(|r| r.is_empty())
    }

    pub fn rating(&self, observer: &str, stimulus: &str) -> Option<f64> {
        self.ratings.get(observer)?.get(stimulus).copied()
    }

    /// Sorted union of every rated stimulus id.
    pub fn stimulus_ids(&self) -> Vec<String> {
        let ids: BTreeSet<&String> = self.ratings.values().flat_map(|r| r.keys()).collect();
        ids.into_iter().cloned().collect()
    }

    pub fn observers(&self) -> impl Iterator<Item = (&str, &BTreeMap<String, f64>)> {
        self.ratings.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        check_header(&mut rdr, &["observer_id", "stimulus_id", "rating"])?;
        let mut table = Self::new();
        for rec in rdr.records() {
            let rec = rec.map_err(csv_error)?;
            let line = record_line(&rec);
            if rec.len() != 3 {
                return Err(Error::Parse {
                    line,
                    message: format!("expected 3 fields, found {}", rec.len()),
                });
            }
            let rating: f64 = rec[2].parse().map_err(|_| Error::Parse {
                line,
                message: format!("invalid rating {:?}", &rec[2]),
            })?;
            table
                .insert(&rec[0], &rec[1], rating)
                .map_err(|e| Error::Parse {
                    line,
                    message: e.to_string(),
                })?;
        }
        Ok(table)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(w);
        let io = |e: csv::Error| Error::Io(e.to_string());
        wtr.write_record(["observer_id", "stimulus_id", "rating"]).map_err(io)?;
        for (obs, row) in &self.ratings {
            for (stim, r) in row {
                wtr.write_record([obs.as_str(), stim.as_str(), &format_count(*r)])
                    .map_err(io)?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Converts ACR ratings to preference counts over the table's own stimuli
/// (sorted union of rated ids).
pub fn pcm_from_acr(ratings: &AcrRatingTable) -> Result<PairComparisonMatrix> {
    pcm_from_acr_over(ratings, ratings.stimulus_ids())
}

/// Converts ACR ratings to preference counts over an explicit stimulus list.
///
/// Each observer contributes once per unordered pair it rated both sides of:
/// a full count to the higher-rated stimulus, or half to each on a tie.
/// Pairs where the observer skipped either stimulus are left untouched.
pub fn pcm_from_acr_over(
    ratings: &AcrRatingTable,
    ids: Vec<String>,
) -> Result<PairComparisonMatrix> {
    if ratings.is_empty() {
        return Err(Error::NoRatings);
    }
    if ids.len() < 2 {
        return Err(Error::TooFewStimuli(ids.len()));
    }
    let index: HashMap<&str, usize> =
        ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let n = ids.len();
    let mut pcm = PairComparisonMatrix::zeros(ids.clone());
    let mut rated: Vec<Option<f64>> = vec![None; n];
    for (_, row) in ratings.observers() {
        rated.iter_mut().for_each(|r| *r = None);
        for (stim, &r) in row {
            let &k = index
                .get(stim.as_str())
                .ok_or_else(|| Error::UnknownStimulus(stim.clone()))?;
            rated[k] = Some(r);
        }
        for i in 0..n {
            let Some(ri) = rated[i] else { continue };
            for j in (i + 1)..n {
                let Some(rj) = rated[j] else { continue };
                if ri > rj {
                    pcm.counts[i * n + j] += 1.0;
                } else if rj > ri {
                    pcm.counts[j * n + i] += 1.0;
                } else {
                    pcm.counts[i * n + j] += 0.5;
                    pcm.counts[j * n + i] += 0.5;
                }
            }
        }
    }
    Ok(pcm)
}

/// Element-wise sum of two matrices over the same stimuli in the same order.
pub fn pcm_merge(
    base: &PairComparisonMatrix,
    delta: &PairComparisonMatrix,
) -> Result<PairComparisonMatrix> {
    if base.ids != delta.ids {
        return Err(Error::IncompatibleMatrices(format!(
            "{} vs {} stimuli or differing ids",
            base.n(),
            delta.n()
        )));
    }
    Ok(PairComparisonMatrix {
        ids: base.ids.clone(),
        counts: base
            .counts
            .iter()
            .zip(&delta.counts)
            .map(|(a, b)| a + b)
            .collect(),
    })
}

/// Thresholded preference matrix. `None` marks the diagonal and pairs with
/// no comparisons.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryPreferenceMatrix {
    n: usize,
    values: Vec<Option<bool>>,
    /// Unordered pairs `(i, j)`, `i < j`, whose proportion sat exactly on the threshold.
    pub ties: Vec<(usize, usize)>,
    /// Unordered pairs with zero total count.
    pub missing: Vec<(usize, usize)>,
}

impl BinaryPreferenceMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> Option<bool> {
        self.values[i * self.n + j]
    }
}

/// Binarizes per-pair proportions `m_ij / (m_ij + m_ji)` with a strict
/// `> threshold` rule.
pub fn pcm_binarize(pcm: &PairComparisonMatrix, threshold: f64) -> BinaryPreferenceMatrix {
    let n = pcm.n();
    let mut out = BinaryPreferenceMatrix {
        n,
        values: vec![None; n * n],
        ties: Vec::new(),
        missing: Vec::new(),
    };
    for i in 0..n {
        for j in (i + 1)..n {
            let total = pcm.pair_total(i, j);
            if total <= 0.0 {
                out.missing.push((i, j));
                continue;
            }
            let pij = pcm.get(i, j) / total;
            let pji = pcm.get(j, i) / total;
            if pij == threshold || pji == threshold {
                out.ties.push((i, j));
            }
            out.values[i * n + j] = Some(pij > threshold);
            out.values[j * n + i] = Some(pji > threshold);
        }
    }
    out
}
