//! Core data model: product categories, identifiers, money, the three
//! input record kinds and their CSV files, and month snapshots.
//!
//! Credit amounts are end-of-month balances. Money is stored as integer
//! cents in records and files and converted to `f64` dollars for modeling.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PclvError, Result};

pub const N_PSC: usize = 8;

/// Open Banking credit product-service category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PscCode {
    CreditCard = 0,
    AutoLoan = 1,
    Mortgage = 2,
    PersonalLoan = 3,
    PayrollLoan = 4,
    Overdraft = 5,
    BusinessLoan = 6,
    RuralCredit = 7,
}

impl PscCode {
    pub const ALL: [PscCode; N_PSC] = [
        PscCode::CreditCard,
        PscCode::AutoLoan,
        PscCode::Mortgage,
        PscCode::PersonalLoan,
        PscCode::PayrollLoan,
        PscCode::Overdraft,
        PscCode::BusinessLoan,
        PscCode::RuralCredit,
    ];

    pub fn tag(self) -> usize {
        self as usize
    }

    pub fn from_tag(tag: usize) -> Option<PscCode> {
        PscCode::ALL.get(tag).copied()
    }

    pub fn token(self) -> &'static str {
        match self {
            PscCode::CreditCard => "CREDIT_CARD",
            PscCode::AutoLoan => "AUTO_LOAN",
            PscCode::Mortgage => "MORTGAGE",
            PscCode::PersonalLoan => "PERSONAL_LOAN",
            PscCode::PayrollLoan => "PAYROLL_LOAN",
            PscCode::Overdraft => "OVERDRAFT",
            PscCode::BusinessLoan => "BUSINESS_LOAN",
            PscCode::RuralCredit => "RURAL_CREDIT",
        }
    }

    pub fn from_token(token: &str) -> Result<PscCode> {
        PscCode::ALL
            .into_iter()
            .find(|p| p.token() == token)
            .ok_or_else(|| PclvError::UnknownPsc {
                token: token.to_string(),
                valid: PscCode::ALL.map(PscCode::token).join(", "),
            })
    }
}

impl fmt::Display for PscCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CustomerId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CompetitorId(pub u64);

/// Month offset from the start of the dataset; month 0 is the earliest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MonthIndex(pub u32);

impl fmt::Display for CustomerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl fmt::Display for CompetitorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Money in integer cents.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Cents(pub i64);

impl Cents {
    pub const ZERO: Cents = Cents(0);

    /// Rounds half away from zero.
    pub fn from_dollars(dollars: f64) -> Cents {
        Cents((dollars * 100.0).round() as i64)
    }

    pub fn dollars(self) -> f64 {
        self.0 as f64 / 100.0
    }
}

impl std::ops::Add for Cents {
    type Output = Cents;
    fn add(self, rhs: Cents) -> Cents {
        Cents(self.0 + rhs.0)
    }
}

impl std::ops::AddAssign for Cents {
    fn add_assign(&mut self, rhs: Cents) {
        self.0 += rhs.0;
    }
}

impl std::iter::Sum for Cents {
    fn sum<I: Iterator<Item = Cents>>(iter: I) -> Cents {
        Cents(iter.map(|c| c.0).sum())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TransactionRecord {
    pub customer: CustomerId,
    pub month: MonthIndex,
    pub psc: PscCode,
    pub credit_amount: Cents,
    pub contribution_margin: Cents,
}

/// Credit held across the whole national financial system at the snapshot
/// month. Not required to dominate the focal exposure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SystemExposure {
    pub customer: CustomerId,
    pub psc: PscCode,
    pub credit_amount: Cents,
}

/// Competitor exposure shared through Open Banking at the snapshot month.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ObSnapshot {
    pub customer: CustomerId,
    pub competitor: CompetitorId,
    pub psc: PscCode,
    pub credit_amount: Cents,
}

/// Total contribution margin across all PSCs at the last training month.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginTarget {
    pub customer: CustomerId,
    pub monthly_margin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Transactions,
    SystemExposure,
    ObSnapshot,
}

impl DatasetKind {
    pub fn header(self) -> &'static [&'static str] {
        match self {
            DatasetKind::Transactions => &[
                "customer_id",
                "month",
                "psc",
                "credit_amount_cents",
                "contribution_margin_cents",
            ],
            DatasetKind::SystemExposure => &["customer_id", "psc", "credit_amount_cents"],
            DatasetKind::ObSnapshot => {
                &["customer_id", "competitor_id", "psc", "credit_amount_cents"]
            }
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            DatasetKind::Transactions => "transactions.csv",
            DatasetKind::SystemExposure => "system_exposure.csv",
            DatasetKind::ObSnapshot => "ob_snapshot.csv",
        }
    }
}

/// A loaded, validated dataset of one kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Transactions(Vec<TransactionRecord>),
    SystemExposure(Vec<SystemExposure>),
    ObSnapshot(Vec<ObSnapshot>),
}

impl Dataset {
    pub fn kind(&self) -> DatasetKind {
        match self {
            Dataset::Transactions(_) => DatasetKind::Transactions,
            Dataset::SystemExposure(_) => DatasetKind::SystemExposure,
            Dataset::ObSnapshot(_) => DatasetKind::ObSnapshot,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::Transactions(r) => r.len(),
            Dataset::SystemExposure(r) => r.len(),
            Dataset::ObSnapshot(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn customer_count(&self) -> usize {
        let mut ids: Vec<CustomerId> = match self {
            Dataset::Transactions(r) => r.iter().map(|t| t.customer).collect(),
            Dataset::SystemExposure(r) => r.iter().map(|t| t.customer).collect(),
            Dataset::ObSnapshot(r) => r.iter().map(|t| t.customer).collect(),
        };
        ids.dedup();
        ids.len()
    }
}

/// Row and customer counts reported by a load.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadSummary {
    pub rows_read: usize,
    pub records: usize,
    pub customers: usize,
}

struct RowReader<'a> {
    path: &'a Path,
    line: u64,
    record: &'a csv::StringRecord,
}

impl RowReader<'_> {
    fn err(&self, message: impl Into<String>) -> PclvError {
        PclvError::Parse {
            path: self.path.to_path_buf(),
            line: self.line,
            message: message.into(),
        }
    }

    fn int<T: std::str::FromStr>(&self, col: usize, name: &str) -> Result<T> {
        let raw = self.record.get(col).unwrap_or("").trim();
        raw.parse()
            .map_err(|_| self.err(format!("column `{name}`: `{raw}` is not a valid integer")))
    }

    fn amount(&self, col: usize, name: &str) -> Result<Cents> {
        let v: i64 = self.int(col, name)?;
        if v < 0 {
            return Err(self.err(format!("column `{name}`: negative credit amount {v}")));
        }
        Ok(Cents(v))
    }

    fn psc(&self, col: usize) -> Result<PscCode> {
        PscCode::from_token(self.record.get(col).unwrap_or("").trim())
    }
}

fn read_rows<T>(
    path: &Path,
    kind: DatasetKind,
    mut parse: impl FnMut(&RowReader<'_>) -> Result<T>,
) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| PclvError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(std::io::BufReader::new(file));
    let expected = kind.header();
    let header = reader.headers().map_err(|e| PclvError::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: e.to_string(),
    })?;
    if header.iter().map(str::trim).ne(expected.iter().copied()) {
        return Err(PclvError::Header {
            path: path.to_path_buf(),
            expected: expected.join(","),
            found: header.iter().collect::<Vec<_>>().join(","),
        });
    }
    let mut out = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        let line = reader.position().line();
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                return Err(PclvError::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: e.to_string(),
                })
            }
        }
        let line = record.position().map_or(line, |p| p.line());
        let row = RowReader {
            path,
            line,
            record: &record,
        };
        if record.len() != expected.len() {
            return Err(row.err(format!(
                "expected {} fields, found {}",
                expected.len(),
                record.len()
            )));
        }
        out.push(parse(&row)?);
    }
    Ok(out)
}

/// Loads and validates a dataset file, summing duplicate keys.
pub fn load_dataset(path: impl AsRef<Path>, kind: DatasetKind) -> Result<(Dataset, LoadSummary)> {
    let path = path.as_ref();
    let (dataset, rows_read) = match kind {
        DatasetKind::Transactions => {
            let rows = read_rows(path, kind, |r| {
                Ok(TransactionRecord {
                    customer: CustomerId(r.int(0, "customer_id")?),
                    month: MonthIndex(r.int(1, "month")?),
                    psc: r.psc(2)?,
                    credit_amount: r.amount(3, "credit_amount_cents")?,
                    contribution_margin: Cents(r.int(4, "contribution_margin_cents")?),
                })
            })?;
            let n = rows.len();
            (Dataset::Transactions(aggregate_transactions(rows)), n)
        }
        DatasetKind::SystemExposure => {
            let rows = read_rows(path, kind, |r| {
                Ok(SystemExposure {
                    customer: CustomerId(r.int(0, "customer_id")?),
                    psc: r.psc(1)?,
                    credit_amount: r.amount(2, "credit_amount_cents")?,
                })
            })?;
            let n = rows.len();
            (Dataset::SystemExposure(aggregate_system(rows)), n)
        }
        DatasetKind::ObSnapshot => {
            let rows = read_rows(path, kind, |r| {
                Ok(ObSnapshot {
                    customer: CustomerId(r.int(0, "customer_id")?),
                    competitor: CompetitorId(r.int(1, "competitor_id")?),
                    psc: r.psc(2)?,
                    credit_amount: r.amount(3, "credit_amount_cents")?,
                })
            })?;
            let n = rows.len();
            (Dataset::ObSnapshot(aggregate_ob(rows)), n)
        }
    };
    let summary = LoadSummary {
        rows_read,
        records: dataset.len(),
        customers: dataset.customer_count(),
    };
    log::debug!(
        "loaded {}: {} rows, {} records, {} customers",
        path.display(),
        summary.rows_read,
        summary.records,
        summary.customers
    );
    Ok((dataset, summary))
}

pub fn load_transactions(path: impl AsRef<Path>) -> Result<Vec<TransactionRecord>> {
    match load_dataset(path, DatasetKind::Transactions)?.0 {
        Dataset::Transactions(r) => Ok(r),
        _ => unreachable!(),
    }
}

pub fn load_system_exposure(path: impl AsRef<Path>) -> Result<Vec<SystemExposure>> {
    match load_dataset(path, DatasetKind::SystemExposure)?.0 {
        Dataset::SystemExposure(r) => Ok(r),
        _ => unreachable!(),
    }
}

pub fn load_ob_snapshots(path: impl AsRef<Path>) -> Result<Vec<ObSnapshot>> {
    match load_dataset(path, DatasetKind::ObSnapshot)?.0 {
        Dataset::ObSnapshot(r) => Ok(r),
        _ => unreachable!(),
    }
}

/// Sorts by (customer, month, psc) and sums duplicate keys.
pub fn aggregate_transactions(mut rows: Vec<TransactionRecord>) -> Vec<TransactionRecord> {
    rows.sort_by_key(|r| (r.customer, r.month, r.psc));
    let mut out: Vec<TransactionRecord> = Vec::with_capacity(rows.len());
    for r in rows {
        match out.last_mut() {
            Some(last) if (last.customer, last.month, last.psc) == (r.customer, r.month, r.psc) => {
                last.credit_amount += r.credit_amount;
                last.contribution_margin += r.contribution_margin;
            }
            _ => out.push(r),
        }
    }
    out
}

pub fn aggregate_system(mut rows: Vec<SystemExposure>) -> Vec<SystemExposure> {
    rows.sort_by_key(|r| (r.customer, r.psc));
    let mut out: Vec<SystemExposure> = Vec::with_capacity(rows.len());
    for r in rows {
        match out.last_mut() {
            Some(last) if (last.customer, last.psc) == (r.customer, r.psc) => {
                last.credit_amount += r.credit_amount;
            }
            _ => out.push(r),
        }
    }
    out
}

pub fn aggregate_ob(mut rows: Vec<ObSnapshot>) -> Vec<ObSnapshot> {
    rows.sort_by_key(|r| (r.customer, r.competitor, r.psc));
    let mut out: Vec<ObSnapshot> = Vec::with_capacity(rows.len());
    for r in rows {
        match out.last_mut() {
            Some(last)
                if (last.customer, last.competitor, last.psc)
                    == (r.customer, r.competitor, r.psc) =>
            {
                last.credit_amount += r.credit_amount;
            }
            _ => out.push(r),
        }
    }
    out
}

/// Writes a dataset with its schema header. Records are written in the
/// order given.
pub fn save_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| PclvError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| PclvError::io(path, e);
    writeln!(w, "{}", dataset.kind().header().join(",")).map_err(io)?;
    match dataset {
        Dataset::Transactions(rows) => {
            for r in rows {
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    r.customer, r.month.0, r.psc, r.credit_amount.0, r.contribution_margin.0
                )
                .map_err(io)?;
            }
        }
        Dataset::SystemExposure(rows) => {
            for r in rows {
                writeln!(w, "{},{},{}", r.customer, r.psc, r.credit_amount.0).map_err(io)?;
            }
        }
        Dataset::ObSnapshot(rows) => {
            for r in rows {
                writeln!(
                    w,
                    "{},{},{},{}",
                    r.customer, r.competitor, r.psc, r.credit_amount.0
                )
                .map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

/// Number of months covered by a transaction set (max month + 1).
pub fn horizon_of(transactions: &[TransactionRecord]) -> u32 {
    transactions.iter().map(|t| t.month.0 + 1).max().unwrap_or(0)
}

/// Per-customer PSC exposure and margin total at one month.
#[derive(Debug, Clone, PartialEq)]
pub struct MonthSnapshot {
    pub month: MonthIndex,
    pub customers: Vec<CustomerId>,
    pub exposure: Vec<[f64; N_PSC]>,
    pub margin: Vec<f64>,
}

impl MonthSnapshot {
    pub fn len(&self) -> usize {
        self.customers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.customers.is_empty()
    }

    pub fn index_of(&self, customer: CustomerId) -> Option<usize> {
        self.customers.binary_search(&customer).ok()
    }

    /// Customers with a nonzero record at the snapshot month.
    pub fn active(&self, i: usize) -> bool {
        self.margin[i] != 0.0 || self.exposure[i].iter().any(|&c| c != 0.0)
    }
}

/// Exposure matrix and margin totals at `month` for every customer with a
/// record at or before it. Customers without a record at `month` get zeros.
pub fn snapshot_at(transactions: &[TransactionRecord], month: MonthIndex) -> Result<MonthSnapshot> {
    let horizon = horizon_of(transactions);
    if month.0 >= horizon {
        return Err(PclvError::input(format!(
            "month {} outside dataset horizon [0, {horizon})",
            month.0
        )));
    }
    let mut by_customer: BTreeMap<CustomerId, ([f64; N_PSC], f64)> = BTreeMap::new();
    for t in transactions.iter().filter(|t| t.month <= month) {
        let entry = by_customer.entry(t.customer).or_insert(([0.0; N_PSC], 0.0));
        if t.month == month {
            entry.0[t.psc.tag()] += t.credit_amount.dollars();
            entry.1 += t.contribution_margin.dollars();
        }
    }
    let mut snap = MonthSnapshot {
        month,
        customers: Vec::with_capacity(by_customer.len()),
        exposure: Vec::with_capacity(by_customer.len()),
        margin: Vec::with_capacity(by_customer.len()),
    };
    for (id, (exposure, margin)) in by_customer {
        snap.customers.push(id);
        snap.exposure.push(exposure);
        snap.margin.push(margin);
    }
    Ok(snap)
}

/// System exposure vectors keyed by customer.
pub fn system_exposure_map(rows: &[SystemExposure]) -> BTreeMap<CustomerId, [f64; N_PSC]> {
    let mut out: BTreeMap<CustomerId, [f64; N_PSC]> = BTreeMap::new();
    for r in rows {
        out.entry(r.customer).or_insert([0.0; N_PSC])[r.psc.tag()] += r.credit_amount.dollars();
    }
    out
}

/// Competitor exposure vectors keyed by (customer, competitor).
pub fn ob_exposure_map(
    rows: &[ObSnapshot],
) -> BTreeMap<(CustomerId, CompetitorId), [f64; N_PSC]> {
    let mut out: BTreeMap<(CustomerId, CompetitorId), [f64; N_PSC]> = BTreeMap::new();
    for r in rows {
        out.entry((r.customer, r.competitor))
            .or_insert([0.0; N_PSC])[r.psc.tag()] += r.credit_amount.dollars();
    }
    out
}

/// Logs (customer, psc) pairs whose focal exposure exceeds the system total.
/// Source data may legitimately disagree, so this never fails.
pub fn warn_inconsistent_exposure(snapshot: &MonthSnapshot, system: &[SystemExposure]) -> usize {
    let sys = system_exposure_map(system);
    let mut n = 0;
    for (i, id) in snapshot.customers.iter().enumerate() {
        let s = sys.get(id).copied().unwrap_or([0.0; N_PSC]);
        for c in 0..N_PSC {
            if snapshot.exposure[i][c] > s[c] + 1e-9 {
                n += 1;
            }
        }
    }
    if n > 0 {
        log::warn!("{n} (customer, psc) pairs hold more focal credit than the system total");
    }
    n
}
