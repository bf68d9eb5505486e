//! Campaigns: IV sweeps, read and write batches, and mass characterization
//! of whole address ranges.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{save_records_csv, ChipPort, Driver, Flags, LaneHasher, MeasurementRecord, Transcript, WriteParams};
use crate::array::{CellAddress, Polarity, COLS, ROWS, SUB_ARRAYS};
use crate::controller::{Chip, LaneTransfer};
use crate::device::DeviceModelSpec;
use crate::error::{Error, Result};

/// Inclusive rectangle of cells in one sub-array. Serialized in its
/// `sub:r0-r1:c0-c1` text form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AddressSpan {
    pub sub_array: u8,
    pub rows: [u16; 2],
    pub cols: [u16; 2],
}

impl AddressSpan {
    pub fn whole(sub_array: u8) -> Self {
        AddressSpan { sub_array, rows: [0, ROWS as u16 - 1], cols: [0, COLS as u16 - 1] }
    }

    pub fn cell(a: CellAddress) -> Self {
        let (r, c) = (a.row() as u16, a.col() as u16);
        AddressSpan { sub_array: a.sub_array() as u8, rows: [r, r], cols: [c, c] }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = usize::from(self.sub_array) < SUB_ARRAYS
            && self.rows[0] <= self.rows[1]
            && usize::from(self.rows[1]) < ROWS
            && self.cols[0] <= self.cols[1]
            && usize::from(self.cols[1]) < COLS;
        if !ok {
            return Err(Error::Selection(format!("address span {self} out of bounds")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        if self.is_empty() {
            return 0;
        }
        usize::from(self.rows[1] - self.rows[0] + 1) * usize::from(self.cols[1] - self.cols[0] + 1)
    }

    pub fn is_empty(&self) -> bool {
        self.rows[0] > self.rows[1] || self.cols[0] > self.cols[1]
    }

    /// Row-major cell order.
    pub fn iter(&self) -> impl Iterator<Item = CellAddress> + '_ {
        let s = usize::from(self.sub_array);
        (self.rows[0]..=self.rows[1]).flat_map(move |r| {
            (self.cols[0]..=self.cols[1]).map(move |c| CellAddress::new(s, r.into(), c.into()).expect("span validated"))
        })
    }
}

impl fmt::Display for AddressSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}-{}:{}-{}", self.sub_array, self.rows[0], self.rows[1], self.cols[0], self.cols[1])
    }
}

impl From<AddressSpan> for String {
    fn from(s: AddressSpan) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for AddressSpan {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for AddressSpan {
    type Err = Error;

    /// `sub:rows:cols` where rows and cols are `n`, `a-b` or `*`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Input(format!("bad address span `{s}`, expected sub:r0-r1:c0-c1"));
        let parts: Vec<&str> = s.trim().split(':').collect();
        let [sub, rows, cols] = parts.as_slice() else { return Err(bad()) };
        let range = |p: &str, limit: usize| -> Result<[u16; 2]> {
            if p == "*" {
                return Ok([0, limit as u16 - 1]);
            }
            let n = |x: &str| x.trim().parse::<u16>().map_err(|_| bad());
            match p.split_once('-') {
                Some((a, b)) => Ok([n(a)?, n(b)?]),
                None => Ok([n(p)?, n(p)?]),
            }
        };
        let span = AddressSpan {
            sub_array: sub.trim().parse().map_err(|_| bad())?,
            rows: range(rows, ROWS)?,
            cols: range(cols, COLS)?,
        };
        span.validate()?;
        Ok(span)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PolarityMode {
    #[default]
    Forward,
    Reverse,
    Both,
}

impl PolarityMode {
    pub fn polarities(self) -> &'static [Polarity] {
        match self {
            PolarityMode::Forward => &[Polarity::Forward],
            PolarityMode::Reverse => &[Polarity::Reverse],
            PolarityMode::Both => &[Polarity::Forward, Polarity::Reverse],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CampaignKind {
    IvSweep,
    ReadResistance,
    /// One pulse of amplitude `v_start` per polarity, each followed by a read.
    WritePulse,
    MassCharacterize,
}

fn default_v_read() -> f64 {
    super::DEFAULT_V_READ
}

fn default_pulse_width() -> f64 {
    10e-9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignSpec {
    pub kind: CampaignKind,
    pub address_range: Vec<AddressSpan>,
    #[serde(default)]
    pub v_start: f64,
    #[serde(default)]
    pub v_stop: f64,
    #[serde(default)]
    pub v_step: f64,
    #[serde(default = "default_v_read")]
    pub v_read: f64,
    #[serde(default)]
    pub polarity_mode: PolarityMode,
    #[serde(default = "default_pulse_width")]
    pub pulse_width_s: f64,
    pub output_path: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl CampaignSpec {
    pub fn new(kind: CampaignKind, address_range: Vec<AddressSpan>, output_path: impl Into<PathBuf>) -> Self {
        CampaignSpec {
            kind,
            address_range,
            v_start: 0.0,
            v_stop: 0.0,
            v_step: 0.0,
            v_read: default_v_read(),
            polarity_mode: PolarityMode::Forward,
            pulse_width_s: default_pulse_width(),
            output_path: output_path.into(),
            seed: 0,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: CampaignSpec = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.address_range {
            s.validate()?;
        }
        if !(self.v_read > 0.0) {
            return Err(Error::Input("v_read must be positive".into()));
        }
        match self.kind {
            CampaignKind::IvSweep => {
                self.voltage_grid()?;
            }
            CampaignKind::WritePulse => {
                if !(self.v_start > 0.0) {
                    return Err(Error::Input("write pulse amplitude v_start must be positive".into()));
                }
                super::pulse_ticks(self.pulse_width_s)?;
            }
            _ => {}
        }
        Ok(())
    }

    /// Sweep magnitudes from `v_start` towards `v_stop` in `v_step`
    /// increments, ending exactly on `v_stop`.
    pub fn voltage_grid(&self) -> Result<Vec<f64>> {
        if !(self.v_step > 0.0) {
            return Err(Error::Input("v_step must be positive".into()));
        }
        if !(self.v_start > 0.0 && self.v_stop > 0.0) {
            return Err(Error::Input("sweep magnitudes must be positive; polarity_mode sets the sign".into()));
        }
        let dir = if self.v_stop >= self.v_start { 1.0 } else { -1.0 };
        let n = ((self.v_stop - self.v_start).abs() / self.v_step + 1e-9).floor() as usize;
        let mut grid: Vec<f64> = (0..=n).map(|k| self.v_start + dir * k as f64 * self.v_step).collect();
        if (grid[n] - self.v_stop).abs() > 1e-9 {
            grid.push(self.v_stop);
        }
        Ok(grid)
    }

    /// Every addressed cell in span order.
    pub fn addresses(&self) -> impl Iterator<Item = CellAddress> + '_ {
        self.address_range.iter().flat_map(AddressSpan::iter)
    }
}

/// One record per (voltage, polarity). In `Both` mode each magnitude is
/// read forward then reverse.
pub fn run_iv_sweep<P: ChipPort>(
    driver: &mut Driver<P>,
    addr: CellAddress,
    spec: &CampaignSpec,
) -> Result<Vec<MeasurementRecord>> {
    let grid = spec.voltage_grid()?;
    let mut estimate = super::MID_RANGE_ESTIMATE_OHMS;
    let mut out = Vec::with_capacity(grid.len() * 2);
    for v in grid {
        for &pol in spec.polarity_mode.polarities() {
            let rec = driver.read_resistance_from(addr, v, pol, estimate)?;
            estimate = rec.estimate();
            out.push(rec);
        }
    }
    Ok(out)
}

/// Runs a read, sweep or write campaign cell by cell. Mass
/// characterization goes through [`characterize`].
pub fn run_campaign<P: ChipPort>(driver: &mut Driver<P>, spec: &CampaignSpec) -> Result<Vec<MeasurementRecord>> {
    spec.validate()?;
    let mut out = Vec::new();
    for addr in spec.addresses() {
        match spec.kind {
            CampaignKind::IvSweep => out.extend(run_iv_sweep(driver, addr, spec)?),
            CampaignKind::ReadResistance | CampaignKind::MassCharacterize => {
                for &pol in spec.polarity_mode.polarities() {
                    out.push(driver.read_resistance(addr, spec.v_read, pol)?);
                }
            }
            CampaignKind::WritePulse => {
                for &pol in spec.polarity_mode.polarities() {
                    let params = WriteParams {
                        v_dut_volts: spec.v_start,
                        polarity: pol,
                        width_s: spec.pulse_width_s,
                        r_estimate: None,
                    };
                    driver.write_pulse(addr, params)?;
                    out.push(driver.read_resistance(addr, spec.v_read, Polarity::Forward)?);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReadStrategy {
    /// One cell per set per pass, up to 32 cells per read.
    #[default]
    Parallel,
    /// Every cell on its own.
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MassOptions {
    pub strategy: ReadStrategy,
    /// Worker threads, at most one per sub-array.
    pub jobs: usize,
    pub record_transcript: bool,
    pub keep_trace: bool,
}

impl Default for MassOptions {
    fn default() -> Self {
        MassOptions { strategy: ReadStrategy::Parallel, jobs: 1, record_transcript: false, keep_trace: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistogramBin {
    pub lo_ohms: f64,
    pub hi_ohms: f64,
    pub count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ErrorStats {
    /// Clean records with a non-defective ground truth.
    pub compared: u64,
    pub within_1pct: u64,
    pub within_3pct: u64,
    pub frac_within_1pct: f64,
    pub frac_within_3pct: f64,
    pub mean_abs_rel_error: f64,
    pub max_abs_rel_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct DefectCounts {
    /// Measured: records flagged saturated low.
    pub flagged_open: u64,
    /// Measured: records flagged saturated high or non-positive.
    pub flagged_short: u64,
    /// Ground truth from the simulated population.
    pub true_stuck_open: u64,
    pub true_stuck_short: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MassSummary {
    pub records: u64,
    pub flagged: u64,
    pub defects: DefectCounts,
    /// Decade bins over the clean reconstructed resistances.
    pub histogram: Vec<HistogramBin>,
    pub relative_error: ErrorStats,
    pub bitstream_sha256: String,
}

#[derive(Debug, Clone)]
pub struct MassResult {
    pub records: Vec<MeasurementRecord>,
    pub summary: MassSummary,
    pub transcript: Option<Transcript>,
    pub trace: Option<Vec<LaneTransfer>>,
}

fn sweep_sub_array<P: ChipPort>(
    driver: &mut Driver<P>,
    addrs: &[CellAddress],
    spec: &CampaignSpec,
    strategy: ReadStrategy,
    truth_defects: &mut DefectCounts,
) -> Result<Vec<MeasurementRecord>> {
    for &a in addrs {
        if let Some(cell) = driver.port().ground_truth(a) {
            match cell.model {
                DeviceModelSpec::Defective { defect: crate::device::DefectKind::StuckOpen } => {
                    truth_defects.true_stuck_open += 1
                }
                DeviceModelSpec::Defective { defect: crate::device::DefectKind::StuckShort } => {
                    truth_defects.true_stuck_short += 1
                }
                _ => {}
            }
        }
    }
    let mut out = Vec::with_capacity(addrs.len() * spec.polarity_mode.polarities().len());
    match strategy {
        ReadStrategy::Sequential => {
            for &a in addrs {
                for &pol in spec.polarity_mode.polarities() {
                    out.push(driver.read_resistance(a, spec.v_read, pol)?);
                }
            }
        }
        ReadStrategy::Parallel => {
            // batch key: (row, column offset); one cell per set
            let mut batches: std::collections::BTreeMap<(usize, usize), Vec<CellAddress>> = Default::default();
            for &a in addrs {
                batches.entry((a.row(), a.col_in_set())).or_default().push(a);
            }
            for batch in batches.values() {
                for &pol in spec.polarity_mode.polarities() {
                    out.extend(driver.read_resistance_batch(batch, spec.v_read, pol)?);
                }
            }
        }
    }
    Ok(out)
}

fn order_key(r: &MeasurementRecord) -> (usize, usize, usize, bool) {
    (r.address.sub_array(), r.address.row(), r.address.col(), r.polarity.bit())
}

/// Reads every addressed cell and summarizes the results. Sub-arrays are
/// processed by separate workers when `opts.jobs > 1`; records come back
/// in address order regardless.
pub fn characterize(chip: &mut Chip, spec: &CampaignSpec, opts: MassOptions) -> Result<MassResult> {
    spec.validate()?;
    let mut per_sub: [Vec<CellAddress>; SUB_ARRAYS] = Default::default();
    let mut seen = std::collections::HashSet::new();
    for a in spec.addresses() {
        if seen.insert(a) {
            per_sub[a.sub_array()].push(a);
        }
    }

    type Shard = (Vec<MeasurementRecord>, Option<Transcript>, Option<Vec<LaneTransfer>>, LaneHasher, DefectCounts);
    let run_shard = |unit: &mut crate::controller::SubArrayUnit, addrs: &[CellAddress]| -> Result<Shard> {
        let mut d = Driver::new(unit);
        if opts.record_transcript {
            d.record_transcript();
        }
        if opts.keep_trace {
            d.keep_trace();
        }
        let mut defects = DefectCounts::default();
        let records = sweep_sub_array(&mut d, addrs, spec, opts.strategy, &mut defects)?;
        let hasher = d.hasher().clone();
        Ok((records, d.take_transcript(), d.take_trace(), hasher, defects))
    };

    let work: Vec<(usize, &mut crate::controller::SubArrayUnit)> =
        chip.units_mut().iter_mut().enumerate().filter(|(s, _)| !per_sub[*s].is_empty()).collect();
    let shards: Vec<(usize, Result<Shard>)> = if opts.jobs > 1 {
        std::thread::scope(|scope| {
            let handles: Vec<_> = work
                .into_iter()
                .map(|(s, unit)| {
                    let addrs = &per_sub[s];
                    let run = &run_shard;
                    (s, scope.spawn(move || run(unit, addrs)))
                })
                .collect();
            handles.into_iter().map(|(s, h)| (s, h.join().expect("worker panicked"))).collect()
        })
    } else {
        work.into_iter().map(|(s, unit)| (s, run_shard(unit, &per_sub[s]))).collect()
    };

    let mut records = Vec::new();
    let mut transcript = opts.record_transcript.then(Transcript::default);
    let mut trace = opts.keep_trace.then(Vec::new);
    let mut hasher = LaneHasher::default();
    let mut defects = DefectCounts::default();
    for (s, shard) in shards {
        let (recs, tr, lanes, h, d) = shard?;
        records.extend(recs);
        if let (Some(all), Some(tr)) = (&mut transcript, tr) {
            all.append(tr);
        }
        if let (Some(all), Some(lanes)) = (&mut trace, lanes) {
            all.extend(lanes);
        }
        hasher.adopt(s, &h);
        defects.true_stuck_open += d.true_stuck_open;
        defects.true_stuck_short += d.true_stuck_short;
    }
    records.sort_by_key(order_key);
    let summary = summarize(&records, defects, hasher.finish());
    Ok(MassResult { records, summary, transcript, trace })
}

pub fn summarize(records: &[MeasurementRecord], mut defects: DefectCounts, bitstream_sha256: String) -> MassSummary {
    let mut histogram: Vec<HistogramBin> =
        (1..9).map(|e| HistogramBin { lo_ohms: 10f64.powi(e), hi_ohms: 10f64.powi(e + 1), count: 0 }).collect();
    let mut stats = ErrorStats::default();
    let mut sum_err = 0.0;
    let mut flagged = 0;
    for r in records {
        if r.flags.contains(Flags::SAT_LOW) {
            defects.flagged_open += 1;
        } else if r.flags.contains(Flags::SAT_HIGH) || r.flags.contains(Flags::NONPOSITIVE) {
            defects.flagged_short += 1;
        }
        if !r.flags.is_clean() {
            flagged += 1;
            continue;
        }
        if let Some(bin) = histogram.iter_mut().find(|b| r.r_ohms >= b.lo_ohms && r.r_ohms < b.hi_ohms) {
            bin.count += 1;
        }
        let Some(truth) = r.true_r_ohms else { continue };
        if !(1.0..1e11).contains(&truth) {
            continue;
        }
        let err = (r.r_ohms / truth - 1.0).abs();
        stats.compared += 1;
        stats.within_1pct += u64::from(err <= 0.01);
        stats.within_3pct += u64::from(err <= 0.03);
        stats.max_abs_rel_error = stats.max_abs_rel_error.max(err);
        sum_err += err;
    }
    if stats.compared > 0 {
        let n = stats.compared as f64;
        stats.frac_within_1pct = stats.within_1pct as f64 / n;
        stats.frac_within_3pct = stats.within_3pct as f64 / n;
        stats.mean_abs_rel_error = sum_err / n;
    }
    MassSummary { records: records.len() as u64, flagged, defects, histogram, relative_error: stats, bitstream_sha256 }
}

/// Characterizes the spec's address range and writes the CSV to
/// `spec.output_path` and the summary next to it as JSON.
pub fn mass_characterize(chip: &mut Chip, spec: &CampaignSpec, opts: MassOptions) -> Result<MassResult> {
    let result = characterize(chip, spec, opts)?;
    save_records_csv(&spec.output_path, &result.records, true)?;
    let summary_path = summary_path(&spec.output_path);
    let json = serde_json::to_string_pretty(&result.summary).expect("summary serializes");
    std::fs::write(&summary_path, json + "\n").map_err(|e| Error::io(&summary_path, e))?;
    Ok(result)
}

/// `out.csv` gets its summary in `out.summary.json`.
pub fn summary_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("summary.json")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ChipConfig;
    use crate::population::Population;

    #[test]
    fn span_parsing() {
        let s: AddressSpan = "1:0-3:*".parse().unwrap();
        assert_eq!(s, AddressSpan { sub_array: 1, rows: [0, 3], cols: [0, 511] });
        assert_eq!(s.len(), 4 * 512);
        assert_eq!(s.to_string().parse::<AddressSpan>().unwrap(), s);
        assert_eq!("2:5:7".parse::<AddressSpan>().unwrap().len(), 1);
        assert!("4:0:0".parse::<AddressSpan>().is_err());
        assert!("0:3-1:0".parse::<AddressSpan>().is_err());
        assert!("0:0".parse::<AddressSpan>().is_err());
    }

    #[test]
    fn voltage_grid_hits_endpoints() {
        let mut spec = CampaignSpec::new(CampaignKind::IvSweep, vec![], "x.csv");
        (spec.v_start, spec.v_stop, spec.v_step) = (0.05, 1.5, 0.05);
        let g = spec.voltage_grid().unwrap();
        assert_eq!(g.len(), 30);
        assert!((g[29] - 1.5).abs() < 1e-12);
        (spec.v_start, spec.v_stop, spec.v_step) = (0.1, 0.35, 0.1);
        assert_eq!(spec.voltage_grid().unwrap().len(), 4);
        spec.v_step = 0.0;
        assert!(spec.voltage_grid().is_err());
    }

    fn small_chip(seed: u64) -> Chip {
        let mut chip = Chip::new(ChipConfig::default()).unwrap();
        let mut pop = Population::log_uniform(seed, None, 1e3, 1e7, 0.05);
        pop.regions[0].rows = Some([0, 3]);
        pop.regions[0].cols = Some([0, 63]);
        pop.apply(&mut chip).unwrap();
        chip
    }

    #[test]
    fn parallel_sequential_and_threaded_agree() {
        let spans = vec!["0:0-3:0-63".parse().unwrap(), "3:1-2:10-40".parse().unwrap()];
        let spec = CampaignSpec::new(CampaignKind::MassCharacterize, spans, "unused.csv");
        let run = |opts| characterize(&mut small_chip(5), &spec, opts).unwrap();
        let par = run(MassOptions::default());
        let seq = run(MassOptions { strategy: ReadStrategy::Sequential, ..Default::default() });
        let thr = run(MassOptions { jobs: 4, ..Default::default() });
        assert_eq!(par.records.len(), 4 * 64 + 2 * 31);
        let strip = |v: &[MeasurementRecord]| v.iter().map(MeasurementRecord::without_time).collect::<Vec<_>>();
        assert_eq!(strip(&par.records), strip(&seq.records));
        assert_eq!(par.records, thr.records);
        assert_eq!(par.summary, thr.summary);
        assert_eq!(par.summary.defects.flagged_open, par.summary.defects.true_stuck_open);
        assert!(par.summary.relative_error.frac_within_1pct > 0.95);
    }

    #[test]
    fn empty_range_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CampaignSpec::new(CampaignKind::MassCharacterize, vec![], dir.path().join("e.csv"));
        let res = mass_characterize(&mut small_chip(1), &spec, MassOptions::default()).unwrap();
        assert!(res.records.is_empty());
        let text = std::fs::read_to_string(dir.path().join("e.csv")).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(summary_path(&spec.output_path).exists());
    }
}
