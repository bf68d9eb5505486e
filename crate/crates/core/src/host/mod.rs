//! Host-side driver: programs the chip over SPI, decodes what comes back on
//! the serializer lanes and turns it into resistance measurements.

pub mod campaign;
pub mod transcript;

use std::fmt;

use serde::{Serialize, Serializer};

use crate::array::{gray_encode, Cell, CellAddress, Polarity, COLS_PER_SET, SETS, SUB_ARRAYS};
use crate::config::{ChipConfig, TICK_S};
use crate::controller::{reg, Chip, LaneTransfer, SpiTransaction, SubArrayUnit};
use crate::device::MIN_PULSE_WIDTH_S;
use crate::error::{Error, Result};
use crate::frontend::{
    adc_code_to_voltage, autorange_convert, dac_code_to_voltage, reconstruct_current, ReadoutResult, ResistorBank,
    TheveninSource, DAC_MAX_CODE,
};
use crate::serializer::{deserialize_frame, deserialize_packet, DataPacket, StreamMode, DATA_SLOTS};

pub use transcript::{LaneHasher, Transcript, TranscriptLine};

/// Resistance assumed before anything is known about a cell.
pub const MID_RANGE_ESTIMATE_OHMS: f64 = 1e5;
/// Second-pass estimates are clamped to this band.
pub const ESTIMATE_BAND_OHMS: (f64, f64) = (1e3, 1e7);
pub const DEFAULT_V_READ: f64 = 0.5;

/// What the driver needs from a chip: SPI, a clock, the serializer lanes,
/// and (simulator only) the true cell contents.
pub trait ChipPort {
    fn config(&self) -> &ChipConfig;
    fn spi(&mut self, t: SpiTransaction) -> Result<u16>;
    /// Advances `sub_array` until its current operation is done.
    fn run_until_idle(&mut self, sub_array: usize) -> Result<u64>;
    fn run_ticks(&mut self, sub_array: usize, n: u64) -> Result<()>;
    fn drain_lane(&mut self, sub_array: usize) -> Result<Vec<LaneTransfer>>;
    fn tick(&self, sub_array: usize) -> u64;
    fn ground_truth(&self, addr: CellAddress) -> Option<Cell>;
}

impl ChipPort for Chip {
    fn config(&self) -> &ChipConfig {
        Chip::config(self)
    }

    fn spi(&mut self, t: SpiTransaction) -> Result<u16> {
        Chip::spi(self, t)
    }

    fn run_until_idle(&mut self, sub_array: usize) -> Result<u64> {
        Ok(self.unit_mut(sub_array).run_until_idle())
    }

    fn run_ticks(&mut self, sub_array: usize, n: u64) -> Result<()> {
        self.unit_mut(sub_array).run_ticks(n);
        Ok(())
    }

    fn drain_lane(&mut self, sub_array: usize) -> Result<Vec<LaneTransfer>> {
        Ok(Chip::drain_lane(self, sub_array))
    }

    fn tick(&self, sub_array: usize) -> u64 {
        self.unit(sub_array).tick()
    }

    fn ground_truth(&self, addr: CellAddress) -> Option<Cell> {
        Some(*self.unit(addr.sub_array()).array().cell(addr.row(), addr.col()))
    }
}

impl SubArrayUnit {
    fn own(&self, sub_array: usize) -> Result<()> {
        if sub_array != self.index() {
            return Err(Error::Selection(format!(
                "sub-array {sub_array} addressed through the port of sub-array {}",
                self.index()
            )));
        }
        Ok(())
    }
}

/// A single sub-array on its own, used for per-sub-array worker threads.
impl ChipPort for SubArrayUnit {
    fn config(&self) -> &ChipConfig {
        SubArrayUnit::config(self)
    }

    fn spi(&mut self, t: SpiTransaction) -> Result<u16> {
        self.own(usize::from(t.reg_addr >> 6))?;
        self.spi_access(t.write, t.reg_addr & 0x3f, t.payload)
    }

    fn run_until_idle(&mut self, sub_array: usize) -> Result<u64> {
        self.own(sub_array)?;
        Ok(SubArrayUnit::run_until_idle(self))
    }

    fn run_ticks(&mut self, sub_array: usize, n: u64) -> Result<()> {
        self.own(sub_array)?;
        SubArrayUnit::run_ticks(self, n);
        Ok(())
    }

    fn drain_lane(&mut self, sub_array: usize) -> Result<Vec<LaneTransfer>> {
        self.own(sub_array)?;
        Ok(SubArrayUnit::drain_lane(self))
    }

    fn tick(&self, _sub_array: usize) -> u64 {
        SubArrayUnit::tick(self)
    }

    fn ground_truth(&self, addr: CellAddress) -> Option<Cell> {
        (addr.sub_array() == self.index()).then(|| *self.array().cell(addr.row(), addr.col()))
    }
}

impl<T: ChipPort + ?Sized> ChipPort for &mut T {
    fn config(&self) -> &ChipConfig {
        (**self).config()
    }
    fn spi(&mut self, t: SpiTransaction) -> Result<u16> {
        (**self).spi(t)
    }
    fn run_until_idle(&mut self, sub_array: usize) -> Result<u64> {
        (**self).run_until_idle(sub_array)
    }
    fn run_ticks(&mut self, sub_array: usize, n: u64) -> Result<()> {
        (**self).run_ticks(sub_array, n)
    }
    fn drain_lane(&mut self, sub_array: usize) -> Result<Vec<LaneTransfer>> {
        (**self).drain_lane(sub_array)
    }
    fn tick(&self, sub_array: usize) -> u64 {
        (**self).tick(sub_array)
    }
    fn ground_truth(&self, addr: CellAddress) -> Option<Cell> {
        (**self).ground_truth(addr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriveMode {
    /// Cell plus the bank resistor the converter will settle on.
    Read,
    /// Cell only; the bank is out of circuit during a pulse.
    Write,
}

/// Bank as the chip sees it with the threshold register at reset.
fn reset_bank(cfg: &ChipConfig) -> ResistorBank {
    ResistorBank { v_threshold_volts: adc_code_to_voltage(cfg.threshold_reset_code(), &cfg.adc), ..cfg.bank }
}

/// DUT voltage magnitude the series circuit develops for `code`.
pub fn predicted_dut_volts(code: u8, r_ohms: f64, cfg: &ChipConfig, mode: DriveMode) -> f64 {
    let v = dac_code_to_voltage(code, &cfg.dac);
    let ra = cfg.cell.r_access_on_ohms;
    v * r_ohms / (r_ohms + ra + series_bank_ohms(v, r_ohms, cfg, mode))
}

fn series_bank_ohms(v_drive: f64, r_ohms: f64, cfg: &ChipConfig, mode: DriveMode) -> f64 {
    match mode {
        DriveMode::Write => 0.0,
        DriveMode::Read => {
            let bank = reset_bank(cfg);
            let src = TheveninSource::new(v_drive, r_ohms + cfg.cell.r_access_on_ohms);
            let stage = autorange_convert(&src, &bank, &cfg.adc).stage().expect("one-hot");
            bank.r_ohms[stage]
        }
    }
}

fn ceil_code(v: f64, cfg: &ChipConfig) -> u8 {
    let dac = &cfg.dac;
    if v <= dac.v_min_volts {
        return 0;
    }
    let code = ((v - dac.v_min_volts) / dac.lsb_volts()).ceil().min(f64::from(DAC_MAX_CODE)) as u8;
    // undo float noise so the code is the smallest one that reaches `v`
    if code > 0 && dac_code_to_voltage(code - 1, dac) >= v {
        code - 1
    } else {
        code
    }
}

/// Smallest DAC code that puts at least `v_dut_target` across a device of
/// resistance `r_estimate` once the series drops are accounted for.
///
/// The bank resistor depends on the current, which depends on the drive, so
/// the solve iterates (at most five rounds) before a final local search.
pub fn solve_drive_voltage(r_estimate: f64, v_dut_target: f64, cfg: &ChipConfig, mode: DriveMode) -> Result<u8> {
    if !(r_estimate > 0.0 && r_estimate.is_finite()) {
        return Err(Error::Input(format!("resistance estimate {r_estimate} must be positive")));
    }
    if !(v_dut_target > 0.0 && v_dut_target.is_finite()) {
        return Err(Error::Input(format!("target DUT voltage {v_dut_target} must be positive")));
    }
    let ra = cfg.cell.r_access_on_ohms;
    let mut r_bank = series_bank_ohms(v_dut_target, r_estimate, cfg, mode);
    let mut code = 0;
    for _ in 0..5 {
        let v_need = v_dut_target * (r_estimate + ra + r_bank) / r_estimate;
        code = ceil_code(v_need, cfg);
        let next = series_bank_ohms(dac_code_to_voltage(code, &cfg.dac), r_estimate, cfg, mode);
        if next == r_bank {
            break;
        }
        r_bank = next;
    }
    let reaches = |c: u8| predicted_dut_volts(c, r_estimate, cfg, mode) >= v_dut_target;
    while !reaches(code) {
        if code == DAC_MAX_CODE {
            return Err(Error::Range(format!(
                "{v_dut_target} V across {r_estimate} ohm is out of reach of the {} V DAC",
                cfg.dac.v_max_volts
            )));
        }
        code += 1;
    }
    while code > 0 && reaches(code - 1) {
        code -= 1;
    }
    Ok(code)
}

/// Quality flags attached to a measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Flags(u8);

impl Flags {
    pub const SAT_LOW: Flags = Flags(1);
    pub const SAT_HIGH: Flags = Flags(2);
    /// The series correction left a non-positive resistance.
    pub const NONPOSITIVE: Flags = Flags(4);

    const NAMES: [(Flags, &'static str); 3] =
        [(Flags::SAT_LOW, "sat_low"), (Flags::SAT_HIGH, "sat_high"), (Flags::NONPOSITIVE, "nonpositive")];

    pub fn is_clean(self) -> bool {
        self.0 == 0
    }

    pub fn contains(self, other: Flags) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn insert(&mut self, other: Flags) {
        self.0 |= other.0;
    }

    pub fn bits(self) -> u8 {
        self.0
    }
}

impl fmt::Display for Flags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_clean() {
            return f.write_str("ok");
        }
        let names: Vec<&str> = Flags::NAMES.iter().filter(|(fl, _)| self.contains(*fl)).map(|(_, n)| *n).collect();
        f.write_str(&names.join("|"))
    }
}

impl Serialize for Flags {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

fn serialize_display<T: fmt::Display, S: Serializer>(v: &T, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_str(v)
}

/// One reconstructed measurement. Voltage and current carry the polarity
/// sign; resistance is a magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeasurementRecord {
    #[serde(serialize_with = "serialize_display")]
    pub address: CellAddress,
    pub polarity: Polarity,
    pub v_dut_volts: f64,
    pub dac_code: u8,
    pub adc_code: u16,
    pub gain_sel: u8,
    pub i_amps: f64,
    pub r_ohms: f64,
    pub flags: Flags,
    pub sim_time_s: f64,
    /// Resistance actually held by the simulated cell before the read.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub true_r_ohms: Option<f64>,
}

pub const CSV_COLUMNS: [&str; 10] = [
    "address",
    "polarity",
    "v_dut_volts",
    "dac_code",
    "adc_code",
    "gain_sel",
    "i_amps",
    "r_ohms",
    "flags",
    "sim_time_s",
];
pub const TRUTH_COLUMN: &str = "true_r_ohms";

impl MeasurementRecord {
    /// Inverts the readout chain: `r = v_drive / i - r_access - r_bank`.
    pub fn reconstruct(
        address: CellAddress,
        polarity: Polarity,
        dac_code: u8,
        readout: &ReadoutResult,
        cfg: &ChipConfig,
        sim_time_s: f64,
        true_r_ohms: Option<f64>,
    ) -> Self {
        let bank = &cfg.bank;
        let est = reconstruct_current(readout, bank, &cfg.adc);
        let stage = readout.stage().unwrap_or(bank.r_ohms.len() - 1);
        let v_drive = dac_code_to_voltage(dac_code, &cfg.dac);
        let series = cfg.cell.r_access_on_ohms + bank.r_ohms[stage];
        let v_dut = v_drive - est.amps * series;
        let r = v_dut / est.amps;
        let mut flags = Flags::default();
        if est.saturated_low {
            flags.insert(Flags::SAT_LOW);
        }
        if est.saturated_high {
            flags.insert(Flags::SAT_HIGH);
        }
        if !(r > 0.0) {
            flags.insert(Flags::NONPOSITIVE);
        }
        MeasurementRecord {
            address,
            polarity,
            v_dut_volts: polarity.sign() * v_dut,
            dac_code,
            adc_code: readout.adc_code,
            gain_sel: readout.gain_sel,
            i_amps: polarity.sign() * est.amps,
            r_ohms: r,
            flags,
            sim_time_s,
            true_r_ohms,
        }
    }

    /// Next-pass estimate: the reconstructed value clamped into the band.
    pub fn estimate(&self) -> f64 {
        let (lo, hi) = ESTIMATE_BAND_OHMS;
        if self.flags.contains(Flags::SAT_LOW) || self.r_ohms.is_nan() {
            return hi;
        }
        if self.flags.contains(Flags::SAT_HIGH) || !(self.r_ohms > 0.0) {
            return lo;
        }
        self.r_ohms.clamp(lo, hi)
    }

    /// Same record with the timestamp zeroed, for comparing runs whose
    /// scheduling differs.
    pub fn without_time(&self) -> Self {
        MeasurementRecord { sim_time_s: 0.0, ..*self }
    }

    fn csv_fields(&self, with_truth: bool) -> Vec<String> {
        let mut v = vec![
            self.address.to_string(),
            self.polarity.to_string(),
            self.v_dut_volts.to_string(),
            self.dac_code.to_string(),
            self.adc_code.to_string(),
            self.gain_sel.to_string(),
            self.i_amps.to_string(),
            self.r_ohms.to_string(),
            self.flags.to_string(),
            self.sim_time_s.to_string(),
        ];
        if with_truth {
            v.push(self.true_r_ohms.map(|r| r.to_string()).unwrap_or_default());
        }
        v
    }
}

/// Writes records as CSV. The ground-truth column is present when any
/// record carries it.
pub fn write_records_csv<W: std::io::Write>(w: W, records: &[MeasurementRecord], with_truth: bool) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<&str> = CSV_COLUMNS.to_vec();
    if with_truth {
        header.push(TRUTH_COLUMN);
    }
    out.write_record(&header)?;
    for r in records {
        out.write_record(r.csv_fields(with_truth))?;
    }
    out.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn save_records_csv(path: &std::path::Path, records: &[MeasurementRecord], with_truth: bool) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_records_csv(std::io::BufWriter::new(file), records, with_truth).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WriteParams {
    pub v_dut_volts: f64,
    pub polarity: Polarity,
    pub width_s: f64,
    /// Skips the pre-read when the resistance is already known.
    pub r_estimate: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WriteReport {
    #[serde(serialize_with = "serialize_display")]
    pub address: CellAddress,
    pub polarity: Polarity,
    pub dac_code: u8,
    pub pulse_ticks: u16,
    pub r_estimate_ohms: f64,
    pub v_dut_expected_volts: f64,
    pub ticks: u64,
}

/// Converts a pulse width to controller ticks. Widths must be whole ticks.
pub fn pulse_ticks(width_s: f64) -> Result<u16> {
    if !(width_s >= MIN_PULSE_WIDTH_S * (1.0 - 1e-9)) {
        return Err(Error::PulseWidth { width_s });
    }
    let ticks = (width_s / TICK_S).round();
    if (ticks * TICK_S - width_s).abs() > 1e-3 * TICK_S {
        return Err(Error::Input(format!("pulse width {width_s:e} s is not a multiple of 5 ns")));
    }
    if ticks > f64::from(u16::MAX) {
        return Err(Error::Range(format!("pulse width {width_s:e} s exceeds the pulse register")));
    }
    Ok(ticks as u16)
}

/// Register-level driver over any [`ChipPort`].
///
/// Register writes are shadowed: a write whose value the driver knows the
/// chip already holds is skipped.
pub struct Driver<P: ChipPort> {
    port: P,
    shadow: [[Option<u16>; 64]; SUB_ARRAYS],
    transcript: Option<Transcript>,
    hasher: LaneHasher,
    trace: Option<Vec<LaneTransfer>>,
}

impl<P: ChipPort> Driver<P> {
    pub fn new(port: P) -> Self {
        Driver { port, shadow: [[None; 64]; SUB_ARRAYS], transcript: None, hasher: LaneHasher::default(), trace: None }
    }

    /// Starts recording every SPI frame and clock advance.
    pub fn record_transcript(&mut self) {
        self.transcript.get_or_insert_with(Transcript::default);
    }

    pub fn take_transcript(&mut self) -> Option<Transcript> {
        self.transcript.take()
    }

    /// Keeps every lane transfer for writing a bitstream trace.
    pub fn keep_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn take_trace(&mut self) -> Option<Vec<LaneTransfer>> {
        self.trace.take()
    }

    pub fn hasher(&self) -> &LaneHasher {
        &self.hasher
    }

    pub fn port(&self) -> &P {
        &self.port
    }

    pub fn port_mut(&mut self) -> &mut P {
        &mut self.port
    }

    pub fn into_port(self) -> P {
        self.port
    }

    pub fn config(&self) -> &ChipConfig {
        self.port.config()
    }

    fn sim_time(&self, sub: usize) -> f64 {
        self.port.tick(sub) as f64 * TICK_S
    }

    fn raw_spi(&mut self, t: SpiTransaction) -> Result<u16> {
        let v = self.port.spi(t)?;
        if let Some(tr) = &mut self.transcript {
            tr.lines.push(TranscriptLine::Spi(t));
        }
        Ok(v)
    }

    pub fn write_reg(&mut self, sub: usize, offset: u8, value: u16) -> Result<()> {
        let slot = &mut self.shadow[sub][usize::from(offset)];
        if *slot == Some(value) {
            return Ok(());
        }
        self.raw_spi(SpiTransaction::write(reg::addr(sub, offset), value))?;
        self.shadow[sub][usize::from(offset)] = Some(value);
        Ok(())
    }

    pub fn read_reg(&mut self, sub: usize, offset: u8) -> Result<u16> {
        self.raw_spi(SpiTransaction::read(reg::addr(sub, offset)))
    }

    /// Starts the configured operation, runs it to completion and returns
    /// the serializer output.
    fn go(&mut self, sub: usize, ctrl: u16) -> Result<(Vec<LaneTransfer>, u64)> {
        self.raw_spi(SpiTransaction::write(reg::addr(sub, reg::CTRL), ctrl | reg::CTRL_GO))?;
        self.shadow[sub][usize::from(reg::CTRL)] = Some(ctrl);
        let ticks = self.port.run_until_idle(sub)?;
        let transfers = self.port.drain_lane(sub)?;
        if let Some(tr) = &mut self.transcript {
            tr.lines.push(TranscriptLine::Run { sub_array: sub as u8, ticks });
            for t in &transfers {
                tr.push_expectations(t);
            }
        }
        for t in &transfers {
            self.hasher.push(t);
        }
        if let Some(trace) = &mut self.trace {
            trace.extend(transfers.iter().cloned());
        }
        Ok((transfers, ticks))
    }

    fn ctrl_word(mode: u16, polarity: Polarity) -> u16 {
        mode | if polarity.bit() { reg::CTRL_POLARITY } else { 0 }
    }

    fn select_cell(&mut self, addr: CellAddress, dac: u8) -> Result<()> {
        let sub = addr.sub_array();
        self.write_reg(sub, reg::SET_MASK_LO, 0)?;
        self.write_reg(sub, reg::SET_MASK_HI, 0)?;
        self.write_reg(sub, reg::ROW_GRAY, gray_encode(addr.row() as u16))?;
        self.write_reg(sub, reg::COL_ADDR, addr.col() as u16)?;
        self.write_reg(sub, reg::DAC_CODE, dac.into())
    }

    /// One single-cell read at a fixed DAC code, retrieving only the
    /// cell's packet.
    pub fn read_raw(&mut self, addr: CellAddress, dac: u8, polarity: Polarity) -> Result<ReadoutResult> {
        let sub = addr.sub_array();
        let set = addr.set_index();
        self.select_cell(addr, dac)?;
        self.write_reg(sub, reg::SERIAL_CTRL, reg::SERIAL_SINGLE | set as u16)?;
        let (transfers, _) = self.go(sub, Self::ctrl_word(2, polarity))?;
        let t = single_transfer(transfers)?;
        if t.mode != StreamMode::Packet(set as u8) {
            return Err(Error::Integrity(format!("expected packet {set}, lane carried {:?}", t.mode)));
        }
        let packet = DataPacket::unpack(deserialize_packet(&t.symbols, set)?)?;
        check_packet(&packet, addr.col_in_set(), set)?;
        Ok(packet.readout())
    }

    /// One parallel read of `row` across the sets in `sets`, each at its
    /// own DAC code with the same column offset. Returns readouts in the
    /// order of `sets`.
    pub fn read_batch(
        &mut self,
        sub: usize,
        row: usize,
        col_in_set: usize,
        sets: &[(usize, u8)],
        polarity: Polarity,
    ) -> Result<Vec<ReadoutResult>> {
        if sets.is_empty() {
            return Ok(Vec::new());
        }
        let mut mask = 0u32;
        for &(set, dac) in sets {
            if set >= SETS || col_in_set >= COLS_PER_SET {
                return Err(Error::Selection(format!("set {set} column {col_in_set} out of range")));
            }
            if mask >> set & 1 != 0 {
                return Err(Error::SetConflict { sub_array: sub, set });
            }
            mask |= 1 << set;
            self.write_reg(sub, reg::SET_CFG_BASE + set as u8, (u16::from(dac) << 4) | col_in_set as u16)?;
        }
        self.write_reg(sub, reg::SET_MASK_LO, mask as u16)?;
        self.write_reg(sub, reg::SET_MASK_HI, (mask >> 16) as u16)?;
        self.write_reg(sub, reg::ROW_GRAY, gray_encode(row as u16))?;
        self.write_reg(sub, reg::SERIAL_CTRL, 0)?;
        let (transfers, _) = self.go(sub, Self::ctrl_word(2, polarity))?;
        let t = single_transfer(transfers)?;
        if t.mode != StreamMode::Frame {
            return Err(Error::Integrity(format!("expected a full frame, lane carried {:?}", t.mode)));
        }
        let frame = deserialize_frame(&t.symbols)?;
        let header = frame.header();
        if usize::from(header.sub_array) != sub || usize::from(header.n_valid) != sets.len() {
            return Err(Error::Integrity(format!(
                "frame header names sub-array {} with {} packets, expected {sub} with {}",
                header.sub_array,
                header.n_valid,
                sets.len()
            )));
        }
        let seq = (header.frame_counter & 0b11) as u8;
        let mut out = Vec::with_capacity(sets.len());
        for &(set, _) in sets {
            let p = frame.packet(set);
            check_packet(&p, col_in_set, set)?;
            if p.sequence() != seq {
                return Err(Error::Integrity(format!("slot {set} sequence {} in frame {seq}", p.sequence())));
            }
            out.push(p.readout());
        }
        Ok(out)
    }

    fn truth(&self, addr: CellAddress) -> Option<f64> {
        self.port.ground_truth(addr).map(|c| c.state.resistance_ohms)
    }

    fn record(
        &self,
        addr: CellAddress,
        polarity: Polarity,
        dac: u8,
        readout: &ReadoutResult,
        truth: Option<f64>,
    ) -> MeasurementRecord {
        MeasurementRecord::reconstruct(
            addr,
            polarity,
            dac,
            readout,
            self.config(),
            self.sim_time(addr.sub_array()),
            truth,
        )
    }

    /// One read at a drive solved for `r_estimate`.
    pub fn read_once(
        &mut self,
        addr: CellAddress,
        v_read: f64,
        polarity: Polarity,
        r_estimate: f64,
    ) -> Result<MeasurementRecord> {
        let dac = solve_drive_voltage(r_estimate, v_read, self.config(), DriveMode::Read)?;
        let truth = self.truth(addr);
        let readout = self.read_raw(addr, dac, polarity)?;
        Ok(self.record(addr, polarity, dac, &readout, truth))
    }

    /// Two-pass resistance read: a mid-range first pass, then a second
    /// pass with the drive solved for the first estimate.
    pub fn read_resistance(&mut self, addr: CellAddress, v_read: f64, polarity: Polarity) -> Result<MeasurementRecord> {
        self.read_resistance_from(addr, v_read, polarity, MID_RANGE_ESTIMATE_OHMS)
    }

    pub fn read_resistance_from(
        &mut self,
        addr: CellAddress,
        v_read: f64,
        polarity: Polarity,
        first_estimate: f64,
    ) -> Result<MeasurementRecord> {
        let truth = self.truth(addr);
        let first = self.read_once(addr, v_read, polarity, first_estimate)?;
        let rec = self.read_once(addr, v_read, polarity, first.estimate())?;
        Ok(MeasurementRecord { true_r_ohms: truth, ..rec })
    }

    /// Two-pass read of one column offset across several sets of a row.
    /// Produces the same records as reading each cell on its own.
    pub fn read_resistance_batch(
        &mut self,
        addrs: &[CellAddress],
        v_read: f64,
        polarity: Polarity,
    ) -> Result<Vec<MeasurementRecord>> {
        let Some(first) = addrs.first() else {
            return Ok(Vec::new());
        };
        let (sub, row, cis) = (first.sub_array(), first.row(), first.col_in_set());
        if addrs.iter().any(|a| a.sub_array() != sub || a.row() != row || a.col_in_set() != cis) {
            return Err(Error::Selection("batch cells must share sub-array, row and column offset".into()));
        }
        let truths: Vec<Option<f64>> = addrs.iter().map(|&a| self.truth(a)).collect();
        let mut estimates = vec![MID_RANGE_ESTIMATE_OHMS; addrs.len()];
        let mut records = Vec::new();
        for _pass in 0..2 {
            let mut sets = Vec::with_capacity(addrs.len());
            for (a, &est) in addrs.iter().zip(&estimates) {
                sets.push((a.set_index(), solve_drive_voltage(est, v_read, self.config(), DriveMode::Read)?));
            }
            let readouts = self.read_batch(sub, row, cis, &sets, polarity)?;
            records = addrs
                .iter()
                .zip(&sets)
                .zip(&readouts)
                .zip(&truths)
                .map(|(((&a, &(_, dac)), ro), &truth)| self.record(a, polarity, dac, ro, truth))
                .collect();
            estimates = records.iter().map(MeasurementRecord::estimate).collect();
        }
        Ok(records)
    }

    /// Applies one write pulse solved to put `v_dut_volts` across the cell.
    pub fn write_pulse(&mut self, addr: CellAddress, params: WriteParams) -> Result<WriteReport> {
        let ticks = pulse_ticks(params.width_s)?;
        let r_est = match params.r_estimate {
            Some(r) => r,
            None => self.read_resistance(addr, DEFAULT_V_READ, Polarity::Forward)?.estimate(),
        };
        let dac = solve_drive_voltage(r_est, params.v_dut_volts, self.config(), DriveMode::Write)?;
        let sub = addr.sub_array();
        self.select_cell(addr, dac)?;
        self.write_reg(sub, reg::PULSE_WIDTH, ticks)?;
        let (_, run) = self.go(sub, Self::ctrl_word(1, params.polarity))?;
        Ok(WriteReport {
            address: addr,
            polarity: params.polarity,
            dac_code: dac,
            pulse_ticks: ticks,
            r_estimate_ohms: r_est,
            v_dut_expected_volts: params.polarity.sign()
                * predicted_dut_volts(dac, r_est, self.config(), DriveMode::Write),
            ticks: run,
        })
    }
}

fn single_transfer(mut transfers: Vec<LaneTransfer>) -> Result<LaneTransfer> {
    if transfers.len() != 1 {
        return Err(Error::Integrity(format!("expected one lane transfer, got {}", transfers.len())));
    }
    Ok(transfers.pop().expect("length checked"))
}

fn check_packet(p: &DataPacket, col_in_set: usize, set: usize) -> Result<()> {
    debug_assert!(set < DATA_SLOTS);
    if !p.valid() {
        return Err(Error::Integrity(format!("slot {set} carries no valid packet")));
    }
    if usize::from(p.col_in_set) != col_in_set {
        return Err(Error::Integrity(format!("slot {set} reports column {} instead of {col_in_set}", p.col_in_set)));
    }
    if p.readout().stage().is_none() {
        return Err(Error::Integrity(format!("slot {set} gain_sel 0x{:02x} is not one-hot", p.gain_sel)));
    }
    Ok(())
}
