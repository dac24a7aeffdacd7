//! Tercile segmentation by actual and total CLV, the 3x3 migration matrix
//! between the two, and the upward/static/downward upside decomposition.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{Cents, CustomerId};
use crate::error::{PclvError, Result};
use crate::valuation::ValuationRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Segment {
    Upper,
    Intermediate,
    Lower,
}

impl Segment {
    /// Table order: Upper first.
    pub const ALL: [Segment; 3] = [Segment::Upper, Segment::Intermediate, Segment::Lower];

    fn rank(self) -> u8 {
        match self {
            Segment::Lower => 0,
            Segment::Intermediate => 1,
            Segment::Upper => 2,
        }
    }
}

impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Segment {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.rank().cmp(&other.rank())
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Segment::Upper => "Upper",
            Segment::Intermediate => "Intermediate",
            Segment::Lower => "Lower",
        })
    }
}

/// Ranks by value descending (ties by ascending id). The top `ceil(N/3)` are
/// Upper, the next `ceil((N - upper)/2)` Intermediate, the rest Lower.
pub fn terciles(values: &[(CustomerId, f64)]) -> Result<BTreeMap<CustomerId, Segment>> {
    let n = values.len();
    if n < 3 {
        return Err(PclvError::input(format!(
            "tercile segmentation needs at least 3 customers, got {n}"
        )));
    }
    if values.iter().any(|(_, v)| v.is_nan()) {
        return Err(PclvError::input("NaN value in segmentation input"));
    }
    let mut order: Vec<&(CustomerId, f64)> = values.iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let upper = n.div_ceil(3);
    let intermediate = (n - upper).div_ceil(2);
    let mut out = BTreeMap::new();
    for (rank, (id, _)) in order.into_iter().enumerate() {
        let seg = if rank < upper {
            Segment::Upper
        } else if rank < upper + intermediate {
            Segment::Intermediate
        } else {
            Segment::Lower
        };
        if out.insert(*id, seg).is_some() {
            return Err(PclvError::input(format!("duplicate customer {id}")));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MigrationCell {
    pub from: Segment,
    pub to: Segment,
    pub n_customers: u64,
    pub actual_clv_sum: Cents,
    pub pclv_sum: Cents,
    pub total_clv_sum: Cents,
}

impl MigrationCell {
    pub fn empty(from: Segment, to: Segment) -> Self {
        MigrationCell {
            from,
            to,
            n_customers: 0,
            actual_clv_sum: Cents::ZERO,
            pclv_sum: Cents::ZERO,
            total_clv_sum: Cents::ZERO,
        }
    }

    pub fn direction(&self) -> Direction {
        match self.to.cmp(&self.from) {
            std::cmp::Ordering::Greater => Direction::Upward,
            std::cmp::Ordering::Equal => Direction::Static,
            std::cmp::Ordering::Less => Direction::Downward,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Upward,
    Static,
    Downward,
}

/// Cells in table order: actual segment major, total segment minor.
pub fn migration_matrix(
    actual: &BTreeMap<CustomerId, Segment>,
    total: &BTreeMap<CustomerId, Segment>,
    records: &[ValuationRecord],
) -> Result<Vec<MigrationCell>> {
    if actual.len() != total.len() || actual.keys().ne(total.keys()) {
        return Err(PclvError::input(
            "actual and total segmentations cover different customers",
        ));
    }
    if records.len() != actual.len() {
        return Err(PclvError::input(format!(
            "{} valuation records for {} segmented customers",
            records.len(),
            actual.len()
        )));
    }
    let mut cells: Vec<MigrationCell> = Segment::ALL
        .iter()
        .flat_map(|&f| Segment::ALL.iter().map(move |&t| MigrationCell::empty(f, t)))
        .collect();
    let slot = |s: Segment| Segment::ALL.iter().position(|&x| x == s).unwrap();
    for r in records {
        let (Some(&from), Some(&to)) = (actual.get(&r.customer), total.get(&r.customer)) else {
            return Err(PclvError::input(format!(
                "customer {} has a valuation but no segment",
                r.customer
            )));
        };
        let cell = &mut cells[slot(from) * 3 + slot(to)];
        cell.n_customers += 1;
        cell.actual_clv_sum += r.actual_clv;
        cell.pclv_sum += r.pclv_total;
        cell.total_clv_sum += r.total_clv;
    }
    Ok(cells)
}

/// PCLV moved in one direction, relative to total actual CLV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Flow {
    pub n_customers: u64,
    pub customer_share_pct: f64,
    pub pclv_sum: Cents,
    pub pct_of_actual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Upside {
    pub upward: Flow,
    #[serde(rename = "static")]
    pub static_: Flow,
    pub downward: Flow,
    pub total_pclv: Cents,
    pub total_actual_clv: Cents,
    pub overall_upside_pct: f64,
}

fn pct(part: i64, whole: i64) -> f64 {
    if whole == 0 {
        0.0
    } else {
        100.0 * part as f64 / whole as f64
    }
}

/// Classifies cells by segment movement and sums their PCLV.
pub fn upside_decomposition(cells: &[MigrationCell]) -> Upside {
    let total_actual: Cents = cells.iter().map(|c| c.actual_clv_sum).sum();
    let total_pclv: Cents = cells.iter().map(|c| c.pclv_sum).sum();
    let population: u64 = cells.iter().map(|c| c.n_customers).sum();
    let flow = |dir: Direction| {
        let (n, pclv) = cells
            .iter()
            .filter(|c| c.direction() == dir)
            .fold((0u64, Cents::ZERO), |(n, s), c| (n + c.n_customers, s + c.pclv_sum));
        Flow {
            n_customers: n,
            customer_share_pct: pct(n as i64, population as i64),
            pclv_sum: pclv,
            pct_of_actual: pct(pclv.0, total_actual.0),
        }
    };
    Upside {
        upward: flow(Direction::Upward),
        static_: flow(Direction::Static),
        downward: flow(Direction::Downward),
        total_pclv,
        total_actual_clv: total_actual,
        overall_upside_pct: pct(total_pclv.0, total_actual.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnTotals {
    pub n_customers: u64,
    pub actual_clv: Cents,
    pub pclv: Cents,
    pub total_clv: Cents,
}

/// A cell whose total differs from actual + PCLV.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InconsistentCell {
    pub from: Segment,
    pub to: Segment,
    pub gap: Cents,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MigrationReport {
    pub cells: Vec<MigrationCell>,
    pub totals: ColumnTotals,
    pub upside: Upside,
    pub inconsistent_cells: Vec<InconsistentCell>,
}

impl MigrationReport {
    /// Assembles a report from a complete 9-cell matrix. Column totals are
    /// sums of the cells as given.
    pub fn assemble(cells: Vec<MigrationCell>) -> Result<Self> {
        if cells.len() != 9 {
            return Err(PclvError::input(format!("expected 9 cells, got {}", cells.len())));
        }
        let mut cells = cells;
        let slot = |s: Segment| Segment::ALL.iter().position(|&x| x == s).unwrap();
        cells.sort_by_key(|c| (slot(c.from), slot(c.to)));
        for (i, c) in cells.iter().enumerate() {
            if (slot(c.from), slot(c.to)) != (i / 3, i % 3) {
                return Err(PclvError::input(format!(
                    "cell ({}, {}) duplicated or missing",
                    c.from, c.to
                )));
            }
        }
        let totals = ColumnTotals {
            n_customers: cells.iter().map(|c| c.n_customers).sum(),
            actual_clv: cells.iter().map(|c| c.actual_clv_sum).sum(),
            pclv: cells.iter().map(|c| c.pclv_sum).sum(),
            total_clv: cells.iter().map(|c| c.total_clv_sum).sum(),
        };
        let inconsistent_cells = cells
            .iter()
            .filter(|c| c.actual_clv_sum + c.pclv_sum != c.total_clv_sum)
            .map(|c| InconsistentCell {
                from: c.from,
                to: c.to,
                gap: Cents(c.total_clv_sum.0 - c.actual_clv_sum.0 - c.pclv_sum.0),
            })
            .collect();
        let upside = upside_decomposition(&cells);
        Ok(MigrationReport {
            cells,
            totals,
            upside,
            inconsistent_cells,
        })
    }

    pub fn cell(&self, from: Segment, to: Segment) -> &MigrationCell {
        self.cells
            .iter()
            .find(|c| c.from == from && c.to == to)
            .expect("complete matrix")
    }

    /// Writes the Table-1 layout: one row per cell then a total row, each
    /// money column with its share of the column total.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| PclvError::io(path, e);
        let mut w = std::io::BufWriter::new(File::create(path).map_err(io)?);
        writeln!(
            w,
            "actual_clv_segment,total_clv_segment,total_clv_cents,total_clv_pct,pclv_cents,pclv_pct,actual_clv_cents,actual_clv_pct,n_customers,customers_pct"
        )
        .map_err(io)?;
        let t = &self.totals;
        for c in &self.cells {
            writeln!(
                w,
                "{},{},{},{:.2},{},{:.2},{},{:.2},{},{:.2}",
                c.from,
                c.to,
                c.total_clv_sum.0,
                pct(c.total_clv_sum.0, t.total_clv.0),
                c.pclv_sum.0,
                pct(c.pclv_sum.0, t.pclv.0),
                c.actual_clv_sum.0,
                pct(c.actual_clv_sum.0, t.actual_clv.0),
                c.n_customers,
                pct(c.n_customers as i64, t.n_customers as i64),
            )
            .map_err(io)?;
        }
        writeln!(
            w,
            "Total,,{},100.00,{},100.00,{},100.00,{},100.00",
            t.total_clv.0, t.pclv.0, t.actual_clv.0, t.n_customers
        )
        .map_err(io)?;
        w.flush().map_err(io)
    }

    /// report.json: the upside decomposition with percentages to 2 decimals.
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let round2 = |v: f64| (v * 100.0).round() / 100.0;
        let flow = |f: &Flow| {
            serde_json::json!({
                "n_customers": f.n_customers,
                "customer_share_pct": round2(f.customer_share_pct),
                "pclv_cents": f.pclv_sum.0,
                "pct_of_actual_clv": round2(f.pct_of_actual),
            })
        };
        let u = &self.upside;
        let value = serde_json::json!({
            "population": self.totals.n_customers,
            "total_actual_clv_cents": u.total_actual_clv.0,
            "total_pclv_cents": u.total_pclv.0,
            "total_clv_cents": self.totals.total_clv.0,
            "overall_upside_pct": round2(u.overall_upside_pct),
            "upward": flow(&u.upward),
            "static": flow(&u.static_),
            "downward": flow(&u.downward),
            "inconsistent_cells": self.inconsistent_cells,
        });
        let text = serde_json::to_string_pretty(&value).map_err(|source| PclvError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        std::fs::write(path, text + "\n").map_err(|e| PclvError::io(path, e))
    }
}

/// Segments the records by actual and by total CLV and assembles the report.
pub fn build_report(records: &[ValuationRecord]) -> Result<MigrationReport> {
    let actual: Vec<(CustomerId, f64)> = records
        .iter()
        .map(|r| (r.customer, r.actual_clv.0 as f64))
        .collect();
    let total: Vec<(CustomerId, f64)> = records
        .iter()
        .map(|r| (r.customer, r.total_clv.0 as f64))
        .collect();
    let a = terciles(&actual)?;
    let t = terciles(&total)?;
    MigrationReport::assemble(migration_matrix(&a, &t, records)?)
}

/// Add-on selling targets: descending PCLV, ties by ascending customer id.
pub fn rank_by_pclv(records: &[ValuationRecord]) -> Vec<&ValuationRecord> {
    let mut out: Vec<&ValuationRecord> = records.iter().collect();
    out.sort_by(|a, b| b.pclv_total.cmp(&a.pclv_total).then(a.customer.cmp(&b.customer)));
    out
}

pub fn write_targets_csv(path: impl AsRef<Path>, ranked: &[&ValuationRecord]) -> Result<()> {
    let path = path.as_ref();
    let io = |e| PclvError::io(path, e);
    let mut w = std::io::BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "rank,customer_id,pclv_total_cents").map_err(io)?;
    for (i, r) in ranked.iter().enumerate() {
        writeln!(w, "{},{},{}", i + 1, r.customer, r.pclv_total.0).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::CompetitorId;

    fn vals(v: &[f64]) -> Vec<(CustomerId, f64)> {
        v.iter()
            .enumerate()
            .map(|(i, &x)| (CustomerId(i as u64 + 1), x))
            .collect()
    }

    fn sizes(m: &BTreeMap<CustomerId, Segment>) -> [usize; 3] {
        let mut s = [0; 3];
        for seg in m.values() {
            s[Segment::ALL.iter().position(|x| x == seg).unwrap()] += 1;
        }
        s
    }

    #[test]
    fn segment_order() {
        assert!(Segment::Upper > Segment::Intermediate);
        assert!(Segment::Intermediate > Segment::Lower);
    }

    #[test]
    fn nine_values_split_evenly() {
        let m = terciles(&vals(&[5.0, 1.0, 9.0, 3.0, 7.0, 2.0, 8.0, 4.0, 6.0])).unwrap();
        assert_eq!(sizes(&m), [3, 3, 3]);
        for id in [3, 7, 5] {
            assert_eq!(m[&CustomerId(id)], Segment::Upper);
        }
    }

    #[test]
    fn ten_values_use_nested_ceil() {
        let m = terciles(&vals(&(0..10).map(f64::from).collect::<Vec<_>>())).unwrap();
        assert_eq!(sizes(&m), [4, 3, 3]);
    }

    #[test]
    fn ties_resolve_by_id() {
        let m = terciles(&vals(&[1.0; 7])).unwrap();
        assert_eq!(sizes(&m), [3, 2, 2]);
        assert_eq!(m[&CustomerId(1)], Segment::Upper);
        assert_eq!(m[&CustomerId(3)], Segment::Upper);
        assert_eq!(m[&CustomerId(4)], Segment::Intermediate);
        assert_eq!(m[&CustomerId(7)], Segment::Lower);
        assert!(terciles(&vals(&[1.0, 2.0])).is_err());
    }

    fn record(id: u64, actual: i64, pclv: i64) -> ValuationRecord {
        let per = if pclv != 0 {
            vec![(CompetitorId(1), Cents(pclv))]
        } else {
            vec![]
        };
        ValuationRecord {
            customer: CustomerId(id),
            actual_clv: Cents(actual),
            pclv_by_competitor: per,
            pclv_total: Cents(pclv),
            total_clv: Cents(actual + pclv),
        }
    }

    #[test]
    fn zero_pclv_stays_on_diagonal() {
        let recs: Vec<_> = (1..=9).map(|i| record(i, i as i64 * 100, 0)).collect();
        let rep = build_report(&recs).unwrap();
        for c in &rep.cells {
            if c.from != c.to {
                assert_eq!(c.n_customers, 0);
            }
        }
        assert_eq!(rep.upside.total_pclv, Cents::ZERO);
        assert_eq!(rep.upside.overall_upside_pct, 0.0);
        assert_eq!(rep.upside.upward.pclv_sum, Cents::ZERO);
        assert!(rep.inconsistent_cells.is_empty());
    }

    #[test]
    fn lifting_a_lower_customer_displaces_others() {
        // Actual CLV 1..9; customer 1 (Lower) gains enough PCLV to top the
        // total ranking, pushing customer 7 down to Intermediate and
        // customer 4 down to Lower.
        let mut recs: Vec<_> = (1..=9).map(|i| record(i, i as i64, 0)).collect();
        recs[0] = record(1, 1, 99);
        let actual: Vec<_> = recs.iter().map(|r| (r.customer, r.actual_clv.0 as f64)).collect();
        let total: Vec<_> = recs.iter().map(|r| (r.customer, r.total_clv.0 as f64)).collect();
        let a = terciles(&actual).unwrap();
        let t = terciles(&total).unwrap();
        // Brute force: recompute tercile membership by counting strictly larger values.
        let brute = |v: &[(CustomerId, f64)], id: u64| {
            let x = v[id as usize - 1].1;
            let above = v.iter().filter(|(c, y)| *y > x || (*y == x && c.0 < id)).count();
            match above {
                0..=2 => Segment::Upper,
                3..=5 => Segment::Intermediate,
                _ => Segment::Lower,
            }
        };
        for id in 1..=9 {
            assert_eq!(a[&CustomerId(id)], brute(&actual, id));
            assert_eq!(t[&CustomerId(id)], brute(&total, id));
        }
        let rep = MigrationReport::assemble(migration_matrix(&a, &t, &recs).unwrap()).unwrap();
        assert_eq!(rep.cell(Segment::Lower, Segment::Upper).n_customers, 1);
        assert_eq!(rep.cell(Segment::Upper, Segment::Intermediate).n_customers, 1);
        assert_eq!(rep.cell(Segment::Intermediate, Segment::Lower).n_customers, 1);
        assert_eq!(rep.upside.upward.pclv_sum, Cents(99));
        assert_eq!(rep.upside.upward.n_customers, 1);
        assert_eq!(rep.upside.downward.n_customers, 2);
    }

    #[test]
    fn mismatched_populations_rejected() {
        let recs: Vec<_> = (1..=3).map(|i| record(i, i as i64, 0)).collect();
        let a = terciles(&vals(&[1.0, 2.0, 3.0])).unwrap();
        let mut other = vals(&[1.0, 2.0, 3.0]);
        other[2].0 = CustomerId(99);
        let t = terciles(&other).unwrap();
        assert!(migration_matrix(&a, &t, &recs).is_err());
    }

    #[test]
    fn ranking_by_pclv() {
        let recs = vec![record(1, 0, 5), record(2, 0, 9), record(3, 0, 9), record(4, 0, 1)];
        let ids: Vec<u64> = rank_by_pclv(&recs).iter().map(|r| r.customer.0).collect();
        assert_eq!(ids, vec![2, 3, 1, 4]);
        let zeros = vec![record(3, 0, 0), record(1, 0, 0), record(2, 0, 0)];
        let ids: Vec<u64> = rank_by_pclv(&zeros).iter().map(|r| r.customer.0).collect();
        assert_eq!(ids, vec![1, 2, 3]);
        let single = vec![record(8, 1, 2)];
        assert_eq!(rank_by_pclv(&single)[0].customer, CustomerId(8));
    }
}
