//! CSV parsing, per-vessel sequence assembly, dataset splits and
//! normalization statistics, plus the on-disk dataset directory.
//!
//! A dataset directory holds:
//!
//! * `records.csv` ground-truth rows in the standard schema, sequences back to back
//! * `sequences.csv` `seq,mmsi,start_row,len,split`
//! * `targets.csv` `seq,t,attribute,flag` for every target cell
//! * `inputs.csv` (optional) model-visible values after noise injection, row aligned with `records.csv`
//! * `norm_stats.csv` training-split statistics

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::IngestConfig;
use crate::error::{Error, Result};
use crate::geo::angular_delta;
use crate::numeric::RngStream;
use crate::types::{check_value, AttributeId, CategoryCounts, RecordSequence, Row, N_ATTR};

/// The standard header: vessel id followed by the attribute columns.
pub const STANDARD_HEADER: [&str; 13] = [
    "mmsi",
    "timestamp",
    "lat",
    "lon",
    "sog",
    "cog",
    "heading",
    "navstatus",
    "cargo",
    "draught",
    "length",
    "width",
    "vtype",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RawRecord {
    pub vessel_id: String,
    pub values: Row,
}

impl RawRecord {
    pub fn time(&self) -> f64 {
        self.values[AttributeId::Time.index()].expect("raw records carry a timestamp")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowError {
    pub line: usize,
    pub msg: String,
}

#[derive(Clone, Debug, Default)]
pub struct ParsedCsv {
    pub records: Vec<RawRecord>,
    /// Rows skipped because `skip_malformed` was set.
    pub rejected: Vec<RowError>,
}

/// Parses an AIS CSV file.
///
/// Empty cells are missing values. Every row must carry a vessel id and a
/// timestamp. Range violations (`lat out of range`, …) and unparseable cells
/// fail the whole file unless `cfg.skip_malformed` is set, in which case the
/// offending rows are collected in [`ParsedCsv::rejected`].
pub fn parse_csv(path: &Path, cfg: &IngestConfig, categories: CategoryCounts) -> Result<ParsedCsv> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_reader(file, path, cfg, categories)
}

pub fn parse_reader<R: std::io::Read>(
    reader: R,
    path: &Path,
    cfg: &IngestConfig,
    categories: CategoryCounts,
) -> Result<ParsedCsv> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let id_col =
        find(&cfg.mmsi_column).ok_or_else(|| parse_err(1, format!("header lacks column `{}`", cfg.mmsi_column)))?;
    let mut cols = [0usize; N_ATTR];
    for a in AttributeId::ALL {
        let name = &cfg.columns[a.index()];
        cols[a.index()] = find(name).ok_or_else(|| parse_err(1, format!("header lacks column `{name}`")))?;
    }

    let mut out = ParsedCsv::default();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| parse_err(line, e.to_string()))?;
        match parse_row(&row, id_col, &cols, categories) {
            Ok(rec) => out.records.push(rec),
            Err(msg) if cfg.skip_malformed => out.rejected.push(RowError { line, msg }),
            Err(msg) => return Err(parse_err(line, msg)),
        }
    }
    Ok(out)
}

fn parse_row(
    row: &csv::StringRecord,
    id_col: usize,
    cols: &[usize; N_ATTR],
    categories: CategoryCounts,
) -> std::result::Result<RawRecord, String> {
    let cell = |c: usize| row.get(c).map(str::trim).unwrap_or("");
    let vessel_id = cell(id_col);
    if vessel_id.is_empty() {
        return Err("vessel id missing".into());
    }
    let mut values: Row = [None; N_ATTR];
    for a in AttributeId::ALL {
        let text = cell(cols[a.index()]);
        if text.is_empty() {
            continue;
        }
        let v: f64 = text
            .parse()
            .map_err(|_| format!("{}: cannot parse `{text}`", a.column()))?;
        if let Some(rule) = check_value(a, v, categories) {
            return Err(match a {
                AttributeId::Lat | AttributeId::Lon => rule.to_string(),
                _ => format!("{}: {rule}", a.column()),
            });
        }
        values[a.index()] = Some(v);
    }
    if values[AttributeId::Time.index()].is_none() {
        return Err("timestamp missing".into());
    }
    Ok(RawRecord {
        vessel_id: vessel_id.to_string(),
        values,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Duplicate {
    pub vessel_id: String,
    pub time: f64,
}

/// Groups records by vessel, sorts each group by time and cuts it wherever two
/// consecutive timestamps are more than `gap_seconds` apart. Repeated
/// `(vessel, τ)` pairs keep their first occurrence and are reported. Pieces
/// shorter than two records are dropped. Output is ordered by vessel id, then
/// time.
pub fn build_sequences(records: &[RawRecord], gap_seconds: f64) -> (Vec<RecordSequence>, Vec<Duplicate>) {
    let mut groups: BTreeMap<&str, Vec<&RawRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(&r.vessel_id).or_default().push(r);
    }
    let mut seqs = Vec::new();
    let mut dups = Vec::new();
    for (id, mut rows) in groups {
        // stable: the first occurrence of a duplicate stays first
        rows.sort_by(|a, b| a.time().total_cmp(&b.time()));
        let mut current: Vec<Row> = Vec::new();
        let mut last: Option<f64> = None;
        for r in rows {
            let t = r.time();
            match last {
                Some(prev) if t == prev => {
                    dups.push(Duplicate {
                        vessel_id: id.to_string(),
                        time: t,
                    });
                    continue;
                }
                Some(prev) if t - prev > gap_seconds => {
                    if current.len() >= 2 {
                        seqs.push(RecordSequence::new(id, std::mem::take(&mut current)));
                    }
                    current.clear();
                }
                _ => {}
            }
            current.push(r.values);
            last = Some(t);
        }
        if current.len() >= 2 {
            seqs.push(RecordSequence::new(id, current));
        }
    }
    (seqs, dups)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<RecordSequence>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.sequences.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn split(&self, split: Split) -> Vec<&RecordSequence> {
        self.indices(split).into_iter().map(|i| &self.sequences[i]).collect()
    }
}

/// Seeded shuffle followed by an 80/10/10 assignment by count.
///
/// Validation gets at least one sequence; the test share is rounded and may be
/// empty for tiny datasets.
pub fn split_dataset(seqs: Vec<RecordSequence>, seed: u64) -> Result<Dataset> {
    let n = seqs.len();
    if n < 3 {
        return Err(Error::invalid(format!("need at least 3 sequences to split, got {n}")));
    }
    let n_val = ((n as f64 * 0.1).round() as usize).max(1);
    let n_test = (n as f64 * 0.1).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    RngStream::new(seed, crate::numeric::hash_bytes(b"split")).shuffle(&mut order);
    let mut splits = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_val {
            splits[i] = Split::Val;
        } else if rank < n_val + n_test {
            splits[i] = Split::Test;
        }
    }
    Ok(Dataset {
        sequences: seqs,
        splits,
    })
}

pub const SIGMA_FLOOR: f64 = 1e-8;

/// Attributes whose step-to-step delta spread is tracked.
pub const DELTA_CHANNELS: [AttributeId; 5] = [
    AttributeId::Lon,
    AttributeId::Lat,
    AttributeId::Time,
    AttributeId::Heading,
    AttributeId::Course,
];

/// Training-split statistics. `None` marks an attribute (or delta channel)
/// that never had enough observations.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: [Option<f64>; N_ATTR],
    pub std: [Option<f64>; N_ATTR],
    pub delta_std: [Option<f64>; N_ATTR],
    /// Mean step between consecutive observed timestamps.
    pub mean_interval: Option<f64>,
}

fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt().max(SIGMA_FLOOR)))
}

/// Population statistics over observed values of the given (training) sequences.
pub fn compute_norm_stats<'a>(train: impl IntoIterator<Item = &'a RecordSequence>) -> Result<NormStats> {
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); N_ATTR];
    let mut deltas: Vec<Vec<f64>> = vec![Vec::new(); N_ATTR];
    let mut n_seq = 0;
    for seq in train {
        n_seq += 1;
        for a in AttributeId::ALL {
            for t in 0..seq.len() {
                let Some(v) = seq.value(t, a) else { continue };
                values[a.index()].push(v);
                if !DELTA_CHANNELS.contains(&a) || t == 0 {
                    continue;
                }
                if let Some(prev) = seq.value(t - 1, a) {
                    let d = match a {
                        AttributeId::Lon | AttributeId::Heading | AttributeId::Course => angular_delta(prev, v),
                        _ => v - prev,
                    };
                    deltas[a.index()].push(d);
                }
            }
        }
    }
    if n_seq == 0 {
        return Err(Error::invalid("training split is empty"));
    }
    let mut stats = NormStats {
        mean: [None; N_ATTR],
        std: [None; N_ATTR],
        delta_std: [None; N_ATTR],
        mean_interval: None,
    };
    for a in AttributeId::ALL {
        if let Some((m, s)) = mean_std(&values[a.index()]) {
            stats.mean[a.index()] = Some(m);
            stats.std[a.index()] = Some(s);
        }
        if let Some((m, s)) = mean_std(&deltas[a.index()]) {
            stats.delta_std[a.index()] = Some(s);
            if a == AttributeId::Time {
                stats.mean_interval = Some(m);
            }
        }
    }
    Ok(stats)
}

impl NormStats {
    pub fn mean_of(&self, a: AttributeId) -> Result<f64> {
        self.mean[a.index()].ok_or_else(|| Error::invalid(format!("{a} never observed in training split")))
    }

    pub fn std_of(&self, a: AttributeId) -> Result<f64> {
        self.std[a.index()].ok_or_else(|| Error::invalid(format!("{a} never observed in training split")))
    }

    /// `(μ, σ)` for normalization, `(0, 1)` when the attribute was never
    /// observed.
    pub fn scale_of(&self, a: AttributeId) -> (f64, f64) {
        (self.mean[a.index()].unwrap_or(0.0), self.std[a.index()].unwrap_or(1.0))
    }

    pub fn delta_std_of(&self, a: AttributeId) -> Result<f64> {
        self.delta_std[a.index()]
            .ok_or_else(|| Error::invalid(format!("{a} has no consecutive observed pair in training split")))
    }

    /// Attributes (or delta channels) left undefined.
    pub fn undefined(&self) -> Vec<String> {
        let mut out = Vec::new();
        for a in AttributeId::ALL {
            if self.mean[a.index()].is_none() {
                out.push(a.to_string());
            }
        }
        for a in DELTA_CHANNELS {
            if self.delta_std[a.index()].is_none() {
                out.push(format!("Δ{a}"));
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from("attribute,mean,std,delta_std\n");
        for a in AttributeId::ALL {
            let i = a.index();
            s += &format!("{a},{},{},{}\n", f(self.mean[i]), f(self.std[i]), f(self.delta_std[i]));
        }
        s += &format!("mean_interval,{},,\n", f(self.mean_interval));
        s
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let mut stats = NormStats {
            mean: [None; N_ATTR],
            std: [None; N_ATTR],
            delta_std: [None; N_ATTR],
            mean_interval: None,
        };
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 4 {
                return Err(err(n + 1, "expected 4 cells".into()));
            }
            let num = |c: &str| -> Result<Option<f64>> {
                if c.is_empty() {
                    return Ok(None);
                }
                c.parse()
                    .map(Some)
                    .map_err(|_| err(n + 1, format!("cannot parse `{c}`")))
            };
            if cells[0] == "mean_interval" {
                stats.mean_interval = num(cells[1])?;
                continue;
            }
            let a = AttributeId::from_column(cells[0])
                .ok_or_else(|| err(n + 1, format!("unknown attribute `{}`", cells[0])))?;
            stats.mean[a.index()] = num(cells[1])?;
            stats.std[a.index()] = num(cells[2])?;
            stats.delta_std[a.index()] = num(cells[3])?;
        }
        Ok(stats)
    }
}

fn write_row(w: &mut csv::Writer<Vec<u8>>, id: &str, row: &Row) -> Result<()> {
    let mut cells: Vec<String> = vec![id.to_string()];
    for name in &STANDARD_HEADER[1..] {
        let a = AttributeId::from_column(name).unwrap();
        cells.push(row[a.index()].map(|v| v.to_string()).unwrap_or_default());
    }
    w.write_record(&cells).map_err(csv_err)
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(format!("csv: {e}"))
}

/// Serializes rows in the standard schema; `extra` adds a trailing column.
pub fn rows_to_csv<'a>(
    rows: impl IntoIterator<Item = (&'a str, &'a Row)>,
    extra: Option<(&str, Vec<String>)>,
) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = STANDARD_HEADER.to_vec();
    let (extra_name, extra_cells) = match extra {
        Some((n, c)) => (Some(n), c),
        None => (None, Vec::new()),
    };
    header.extend(extra_name);
    w.write_record(&header).map_err(csv_err)?;
    for (i, (id, row)) in rows.into_iter().enumerate() {
        if extra_name.is_some() {
            let mut cells: Vec<String> = vec![id.to_string()];
            for name in &STANDARD_HEADER[1..] {
                let a = AttributeId::from_column(name).unwrap();
                cells.push(row[a.index()].map(|v| v.to_string()).unwrap_or_default());
            }
            cells.push(extra_cells.get(i).cloned().unwrap_or_default());
            w.write_record(&cells).map_err(csv_err)?;
        } else {
            write_row(&mut w, id, row)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn write_file(path: PathBuf, text: &str) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

impl Dataset {
    /// Writes the dataset directory (creating it if needed).
    pub fn save(&self, dir: &Path, stats: Option<&NormStats>) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let rows = self
            .sequences
            .iter()
            .flat_map(|s| s.values.iter().map(move |r| (s.vessel_id.as_str(), r)));
        write_file(dir.join("records.csv"), &rows_to_csv(rows, None)?)?;

        let mut seqs = String::from("seq,mmsi,start_row,len,split\n");
        let mut targets = String::from("seq,t,attribute,flag\n");
        let mut start = 0;
        for (i, s) in self.sequences.iter().enumerate() {
            seqs += &format!("{i},{},{start},{},{}\n", s.vessel_id, s.len(), self.splits[i]);
            start += s.len();
            for (t, row) in s.targets.iter().enumerate() {
                for a in AttributeId::ALL {
                    if row[a.index()] {
                        targets += &format!("{i},{t},{a},1\n");
                    }
                }
            }
        }
        write_file(dir.join("sequences.csv"), &seqs)?;
        write_file(dir.join("targets.csv"), &targets)?;

        let inputs = dir.join("inputs.csv");
        if self.sequences.iter().any(|s| s.noisy_inputs.is_some()) {
            let rows = self.sequences.iter().flat_map(|s| {
                let grid = s.noisy_inputs.as_ref().unwrap_or(&s.values);
                grid.iter().map(move |r| (s.vessel_id.as_str(), r))
            });
            write_file(inputs, &rows_to_csv(rows, None)?)?;
        } else if inputs.exists() {
            fs::remove_file(&inputs).map_err(|e| Error::io(&inputs, e))?;
        }
        if let Some(stats) = stats {
            write_file(dir.join("norm_stats.csv"), &stats.to_csv())?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let records_path = dir.join("records.csv");
        let records = read_rows(&records_path)?;

        let seq_path = dir.join("sequences.csv");
        let seq_text = read_file(&seq_path)?;
        let perr = |path: &Path, line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut sequences = Vec::new();
        let mut splits = Vec::new();
        for (n, line) in seq_text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let c: Vec<&str> = line.split(',').collect();
            if c.len() != 5 {
                return Err(perr(&seq_path, n + 1, "expected 5 cells".into()));
            }
            let num = |s: &str| -> Result<usize> {
                s.parse()
                    .map_err(|_| perr(&seq_path, n + 1, format!("cannot parse `{s}`")))
            };
            let (start, len) = (num(c[2])?, num(c[3])?);
            if start + len > records.len() {
                return Err(perr(&seq_path, n + 1, "row range exceeds records.csv".into()));
            }
            let values = records[start..start + len].iter().map(|r| r.values).collect();
            sequences.push(RecordSequence::new(c[1], values));
            splits.push(c[4].parse().map_err(|e| perr(&seq_path, n + 1, e))?);
        }

        let tgt_path = dir.join("targets.csv");
        if tgt_path.exists() {
            let text = read_file(&tgt_path)?;
            for (n, line) in text.lines().enumerate().skip(1) {
                if line.trim().is_empty() {
                    continue;
                }
                let c: Vec<&str> = line.split(',').collect();
                let bad = || perr(&tgt_path, n + 1, format!("malformed target `{line}`"));
                if c.len() != 4 {
                    return Err(bad());
                }
                let s: usize = c[0].parse().map_err(|_| bad())?;
                let t: usize = c[1].parse().map_err(|_| bad())?;
                let a = AttributeId::from_column(c[2]).ok_or_else(bad)?;
                let flag = match c[3] {
                    "1" => true,
                    "0" => false,
                    _ => return Err(bad()),
                };
                let seq: &mut RecordSequence = sequences.get_mut(s).ok_or_else(bad)?;
                if t >= seq.len() {
                    return Err(bad());
                }
                seq.targets[t][a.index()] = flag;
            }
        }

        let inputs_path = dir.join("inputs.csv");
        if inputs_path.exists() {
            let noisy = read_rows(&inputs_path)?;
            if noisy.len() != records.len() {
                return Err(perr(&inputs_path, 1, "row count differs from records.csv".into()));
            }
            let mut start = 0;
            for s in &mut sequences {
                let grid: Vec<Row> = noisy[start..start + s.len()].iter().map(|r| r.values).collect();
                start += s.len();
                if grid != s.values {
                    s.noisy_inputs = Some(grid);
                }
            }
        }
        Ok(Dataset { sequences, splits })
    }
}

/// Reads a file of rows in the standard schema, locating columns by header
/// name. Extra columns (such as `imputed`) are ignored.
pub fn read_rows(path: &Path) -> Result<Vec<RawRecord>> {
    let text = read_file(path)?;
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg: e.to_string(),
    })?;
    let mut cols = [0usize; N_ATTR];
    for name in STANDARD_HEADER {
        let pos = header.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("missing column `{name}`"),
        })?;
        match AttributeId::from_column(name) {
            Some(a) => cols[a.index()] = pos,
            None if pos != 0 => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: 1,
                    msg: format!("`{name}` must be the first column"),
                })
            }
            None => {}
        }
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let perr = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            msg,
        };
        let row = row.map_err(|e| perr(e.to_string()))?;
        out.push(parse_stored_row(&row, &cols).map_err(perr)?);
    }
    Ok(out)
}

fn parse_stored_row(row: &csv::StringRecord, cols: &[usize; N_ATTR]) -> std::result::Result<RawRecord, String> {
    let vessel_id = row.get(0).unwrap_or("").to_string();
    let mut values: Row = [None; N_ATTR];
    for a in AttributeId::ALL {
        let text = row.get(cols[a.index()]).unwrap_or("");
        if !text.is_empty() {
            values[a.index()] = Some(
                text.parse()
                    .map_err(|_| format!("{}: cannot parse `{text}`", a.column()))?,
            );
        }
    }
    Ok(RawRecord { vessel_id, values })
}

/// Reads the normalization statistics of a dataset directory.
pub fn load_norm_stats(dir: &Path) -> Result<NormStats> {
    let path = dir.join("norm_stats.csv");
    NormStats::from_csv(&read_file(&path)?, &path)
}
