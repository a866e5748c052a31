//! Empirical loss distributions.
//!
//! Every solver in this crate consumes an [`EmpiricalDistribution`]: a sorted
//! list of weighted atoms in the losses-positive convention. Conversion from
//! signed PnL happens once, at ingestion.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance under which two sample values are merged into one atom.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Tolerance on the total mass of a distribution.
pub const MASS_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignConvention {
    /// Column holds profit-and-loss; a loss is the negated value.
    PnlSigned,
    /// Column already holds losses as positive numbers.
    LossesPositive,
}

impl SignConvention {
    fn to_loss(self, x: f64) -> f64 {
        match self {
            SignConvention::PnlSigned => -x,
            SignConvention::LossesPositive => x,
        }
    }
}

/// One support point of an empirical distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub value: f64,
    pub weight: f64,
    /// Number of raw observations merged into this atom.
    pub count: u64,
}

/// Sums of `w`, `w x` and `w x^2` over a contiguous range of atoms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RangeSums {
    pub mass: f64,
    pub first: f64,
    pub second: f64,
}

impl RangeSums {
    /// `sum w (x - c)^2` over the range.
    #[inline]
    pub fn squared_deviation(&self, c: f64) -> f64 {
        let v = self.second - 2.0 * c * self.first + c * c * self.mass;
        v.max(0.0)
    }
}

/// Weighted atoms representing a loss sample, sorted ascending with ties merged.
///
/// Immutable after construction. Prefix sums of the weights and of the first
/// two weighted moments are kept so that interval masses and conditional
/// means cost `O(log n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalDistribution {
    atoms: Vec<Atom>,
    sample_size: u64,
    cum_mass: Vec<f64>,
    cum_first: Vec<f64>,
    cum_second: Vec<f64>,
}

impl EmpiricalDistribution {
    /// Equally weighted observations (`1/S` each).
    pub fn from_samples(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Malformed(format!("non-finite observation {bad}")));
        }
        let s = values.len() as f64;
        let raw: Vec<Atom> = values
            .iter()
            .map(|&value| Atom {
                value,
                weight: 1.0 / s,
                count: 1,
            })
            .collect();
        Ok(Self::build(merge_sorted(raw), values.len() as u64))
    }

    /// Arbitrary positive weights, normalized to unit mass.
    pub fn from_weighted(pairs: &[(f64, f64)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut total = 0.0;
        for &(v, w) in pairs {
            if !v.is_finite() {
                return Err(Error::Malformed(format!("non-finite observation {v}")));
            }
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::InvalidWeight(w));
            }
            total += w;
        }
        let raw: Vec<Atom> = pairs
            .iter()
            .map(|&(value, w)| Atom {
                value,
                weight: w / total,
                count: 1,
            })
            .collect();
        Ok(Self::build(merge_sorted(raw), pairs.len() as u64))
    }

    /// Rebuild from atoms that already satisfy the sorted, merged and
    /// normalized invariants (used when reading serialized distributions).
    pub fn from_atoms(atoms: Vec<Atom>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut total = 0.0;
        for (i, a) in atoms.iter().enumerate() {
            if !a.value.is_finite() {
                return Err(Error::Malformed(format!("non-finite atom {}", a.value)));
            }
            if !(a.weight.is_finite() && a.weight > 0.0) {
                return Err(Error::InvalidWeight(a.weight));
            }
            if i > 0 && atoms[i - 1].value >= a.value {
                return Err(Error::Malformed("atoms must be strictly ascending".into()));
            }
            total += a.weight;
        }
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::Malformed(format!("weights sum to {total}, expected 1")));
        }
        let sample_size = atoms.iter().map(|a| a.count.max(1)).sum();
        Ok(Self::build(atoms, sample_size))
    }

    fn build(atoms: Vec<Atom>, sample_size: u64) -> Self {
        let n = atoms.len();
        let mut cum_mass = Vec::with_capacity(n + 1);
        let mut cum_first = Vec::with_capacity(n + 1);
        let mut cum_second = Vec::with_capacity(n + 1);
        let (mut m, mut f, mut s) = (Neumaier::default(), Neumaier::default(), Neumaier::default());
        cum_mass.push(0.0);
        cum_first.push(0.0);
        cum_second.push(0.0);
        for a in &atoms {
            m.add(a.weight);
            f.add(a.weight * a.value);
            s.add(a.weight * a.value * a.value);
            cum_mass.push(m.total());
            cum_first.push(f.total());
            cum_second.push(s.total());
        }
        Self {
            atoms,
            sample_size,
            cum_mass,
            cum_first,
            cum_second,
        }
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    /// Number of distinct support points.
    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Number of raw (unmerged) observations `S`.
    pub fn sample_size(&self) -> u64 {
        self.sample_size
    }

    pub fn min(&self) -> f64 {
        self.atoms[0].value
    }

    pub fn max(&self) -> f64 {
        self.atoms[self.atoms.len() - 1].value
    }

    pub fn total_mass(&self) -> f64 {
        self.cum_mass[self.atoms.len()]
    }

    pub fn mean(&self) -> f64 {
        self.cum_first[self.atoms.len()] / self.total_mass()
    }

    pub fn second_moment(&self) -> f64 {
        self.cum_second[self.atoms.len()] / self.total_mass()
    }

    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        self.atoms
            .iter()
            .map(|a| a.weight * (a.value - mean).powi(2))
            .sum::<f64>()
            / self.total_mass()
    }

    /// Index of the first atom with value strictly greater than `z`.
    #[inline]
    pub fn index_above(&self, z: f64) -> usize {
        self.atoms.partition_point(|a| a.value <= z)
    }

    /// Sums over atoms `lo..hi` (half-open index range).
    #[inline]
    pub fn range_sums(&self, lo: usize, hi: usize) -> RangeSums {
        if hi <= lo {
            return RangeSums::default();
        }
        RangeSums {
            mass: (self.cum_mass[hi] - self.cum_mass[lo]).max(0.0),
            first: self.cum_first[hi] - self.cum_first[lo],
            second: (self.cum_second[hi] - self.cum_second[lo]).max(0.0),
        }
    }

    /// Sums over atoms with value in `(lower, upper]`.
    #[inline]
    pub fn interval_sums(&self, lower: f64, upper: f64) -> RangeSums {
        let lo = self.index_above(lower);
        let hi = if upper == f64::INFINITY {
            self.atoms.len()
        } else {
            self.index_above(upper)
        };
        self.range_sums(lo, hi)
    }

    /// `P(lower < X <= upper)`.
    pub fn mass_between(&self, lower: f64, upper: f64) -> f64 {
        let lo = self.index_above(lower);
        let hi = self.index_above(upper);
        if hi <= lo {
            0.0
        } else {
            self.cum_mass[hi] - self.cum_mass[lo]
        }
    }

    /// Right-continuous empirical distribution function `F(z) = P(X <= z)`.
    pub fn cdf(&self, z: f64) -> f64 {
        let i = self.index_above(z);
        if i == self.atoms.len() {
            1.0
        } else {
            self.cum_mass[i]
        }
    }

    /// Left inverse of [`cdf`](Self::cdf): the smallest atom `v` with `F(v) >= u`.
    pub fn quantile(&self, u: f64) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::LevelOutOfRange(u));
        }
        let n = self.atoms.len();
        let idx = self.cum_mass[1..].partition_point(|&c| c < u - MASS_TOLERANCE);
        Ok(self.atoms[idx.min(n - 1)].value)
    }

    /// Mass-weighted mean of atoms in `(lower, upper]`; pass `f64::INFINITY`
    /// as `upper` for the tail `X > lower`.
    pub fn conditional_mean(&self, lower: f64, upper: f64) -> Result<f64> {
        if !(lower < upper) {
            return Err(Error::EmptyEvent { lower, upper });
        }
        let lo = self.index_above(lower);
        let hi = if upper == f64::INFINITY {
            self.atoms.len()
        } else {
            self.index_above(upper)
        };
        self.range_mean(lo, hi)
            .ok_or(Error::EmptyEvent { lower, upper })
    }

    /// Mass-weighted mean of atoms `lo..hi`, exact when the range holds a
    /// single atom; `None` for an empty range.
    #[inline]
    pub fn range_mean(&self, lo: usize, hi: usize) -> Option<f64> {
        if hi == lo + 1 {
            return Some(self.atoms[lo].value);
        }
        let sums = self.range_sums(lo, hi);
        (sums.mass > 0.0).then(|| sums.first / sums.mass)
    }

    /// Count of distinct support points in `[0, inf)` after clamping, i.e.
    /// the support size seen by the quantizers.
    pub fn clamped_support_size(&self) -> usize {
        let positives = self.atoms.iter().filter(|a| a.value > 0.0).count();
        positives + usize::from(positives < self.atoms.len())
    }

    /// Moves all negative mass (profits) into a single atom at zero.
    pub fn clamp_nonnegative(&self) -> Self {
        if self.min() >= 0.0 {
            return self.clone();
        }
        let mut zero = Atom {
            value: 0.0,
            weight: 0.0,
            count: 0,
        };
        let mut out = Vec::with_capacity(self.atoms.len() + 1);
        for a in &self.atoms {
            if a.value <= 0.0 {
                zero.weight += a.weight;
                zero.count += a.count;
            } else {
                out.push(*a);
            }
        }
        out.insert(0, zero);
        Self::build(out, self.sample_size)
    }

    /// Distribution of `c X` for `c > 0`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::InvalidConfig(format!("scale factor {c} must be positive")));
        }
        let atoms = self
            .atoms
            .iter()
            .map(|a| Atom {
                value: a.value * c,
                ..*a
            })
            .collect();
        Ok(Self::build(atoms, self.sample_size))
    }

    /// Conditional distribution of `X` given `X > 0`, if any positive mass exists.
    pub fn positive_part(&self) -> Option<Self> {
        let lo = self.index_above(0.0);
        if lo == self.atoms.len() {
            return None;
        }
        let mass = self.cum_mass[self.atoms.len()] - self.cum_mass[lo];
        let atoms: Vec<Atom> = self.atoms[lo..]
            .iter()
            .map(|a| Atom {
                weight: a.weight / mass,
                ..*a
            })
            .collect();
        let s = atoms.iter().map(|a| a.count).sum();
        Some(Self::build(atoms, s))
    }

    /// Writes `loss,weight,count` rows; [`read_atoms_csv`] restores the
    /// distribution exactly.
    pub fn write_atoms_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["loss", "weight", "count"]).map_err(csv_err)?;
        for a in &self.atoms {
            w.write_record([a.value.to_string(), a.weight.to_string(), a.count.to_string()])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

/// Sorts atoms by value and merges values within [`TIE_TOLERANCE`].
fn merge_sorted(mut raw: Vec<Atom>) -> Vec<Atom> {
    raw.sort_by(|a, b| a.value.total_cmp(&b.value));
    let mut out: Vec<Atom> = Vec::with_capacity(raw.len());
    let mut anchor = f64::NAN;
    for a in raw {
        match out.last_mut() {
            Some(last) if is_tie(anchor, a.value) => {
                last.weight += a.weight;
                last.count += a.count;
            }
            _ => {
                anchor = a.value;
                out.push(a);
            }
        }
    }
    out
}

#[inline]
fn is_tie(anchor: f64, v: f64) -> bool {
    (v - anchor).abs() <= TIE_TOLERANCE * anchor.abs().max(v.abs())
}

#[derive(Default)]
pub(crate) struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

/// A parsed delimited table: header names and raw cells with their line numbers.
pub(crate) struct Table {
    pub(crate) header: Vec<String>,
    pub(crate) rows: Vec<(usize, Vec<String>)>,
}

fn detect_delimiter(text: &str) -> u8 {
    let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    [b',', b';', b'\t']
        .into_iter()
        .max_by_key(|&d| (line.bytes().filter(|&b| b == d).count(), d == b','))
        .unwrap_or(b',')
}

pub(crate) fn read_table<R: Read>(mut source: R) -> Result<Table> {
    let mut text = String::new();
    source
        .read_to_string(&mut text)
        .map_err(|e| Error::Io(e.to_string()))?;
    let text = text.strip_prefix('\u{feff}').unwrap_or(&text);
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(detect_delimiter(text))
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());

    let mut records = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Malformed(e.to_string()))?;
        if rec.iter().all(|c| c.is_empty()) {
            continue;
        }
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        records.push((line, rec.iter().map(str::to_owned).collect::<Vec<_>>()));
    }
    let Some((_, first)) = records.first() else {
        return Err(Error::EmptyInput);
    };
    let headerless = first.iter().all(|c| c.parse::<f64>().is_ok());
    if headerless {
        if first.len() != 1 {
            return Err(Error::Malformed(
                "headerless input must have exactly one column".into(),
            ));
        }
        return Ok(Table {
            header: Vec::new(),
            rows: records,
        });
    }
    let header = records.remove(0).1;
    Ok(Table {
        header,
        rows: records,
    })
}

impl Table {
    pub(crate) fn column_index(&self, name: Option<&str>) -> Result<usize> {
        match name {
            None => Ok(0),
            Some(name) if self.header.is_empty() => Err(Error::UnknownColumn(name.into())),
            Some(name) => self
                .header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::UnknownColumn(name.into())),
        }
    }

    pub(crate) fn column_name(&self, idx: usize) -> String {
        self.header
            .get(idx)
            .cloned()
            .unwrap_or_else(|| format!("#{}", idx + 1))
    }

    pub(crate) fn numeric<T: std::str::FromStr>(&self, line: usize, cells: &[String], idx: usize) -> Result<T> {
        let cell = cells.get(idx).map(String::as_str).unwrap_or("");
        cell.parse::<T>().map_err(|_| Error::NonNumeric {
            row: line,
            column: self.column_name(idx),
            value: cell.to_owned(),
        })
    }
}

/// Reads one numeric column of a CSV/TSV stream into an equally weighted
/// loss distribution.
///
/// The delimiter is detected among comma, semicolon and tab. A single
/// unlabeled numeric column is accepted without a header. `column = None`
/// selects the first column. Row numbers in errors are 1-based file lines.
pub fn load_pnl<R: Read>(
    source: R,
    column: Option<&str>,
    convention: SignConvention,
) -> Result<EmpiricalDistribution> {
    let table = read_table(source)?;
    let idx = table.column_index(column)?;
    let mut values = Vec::with_capacity(table.rows.len());
    for (line, cells) in &table.rows {
        let x: f64 = table.numeric(*line, cells, idx)?;
        if !x.is_finite() {
            return Err(Error::NonNumeric {
                row: *line,
                column: table.column_name(idx),
                value: cells[idx].clone(),
            });
        }
        values.push(convention.to_loss(x));
    }
    EmpiricalDistribution::from_samples(&values)
}

/// Reads the `loss,weight,count` format written by
/// [`EmpiricalDistribution::write_atoms_csv`].
pub fn read_atoms_csv<R: Read>(source: R) -> Result<EmpiricalDistribution> {
    let table = read_table(source)?;
    let (iv, iw, ic) = (
        table.column_index(Some("loss"))?,
        table.column_index(Some("weight"))?,
        table.column_index(Some("count"))?,
    );
    let mut atoms = Vec::with_capacity(table.rows.len());
    for (line, cells) in &table.rows {
        atoms.push(Atom {
            value: table.numeric(*line, cells, iv)?,
            weight: table.numeric(*line, cells, iw)?,
            count: table.numeric(*line, cells, ic)?,
        });
    }
    EmpiricalDistribution::from_atoms(atoms)
}
