//! On-chip controller: SPI register file and the per-sub-array operation
//! FSMs.
//!
//! The 8-bit register address splits into `[7:6]` sub-array and `[5:0]`
//! register offset. The full map is in `docs/register_map.md`.
//!
//! Every operation is latched when `go` is written and runs through fixed
//! phases on the 5 ns controller clock:
//!
//! * write: `setup` then `pulse` (row enabled for exactly the pulse width)
//! * read: `setup`, `convert` (bank stages of the slowest set), `adc`
//!   (one conversion), `serialize` (lane cycles of the configured mode)

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::array::{
    dut_voltage, Cell, DriveResult, Polarity, SubArrayState, COLS, COLS_PER_SET, ROWS, SETS, SUB_ARRAYS,
};
use crate::config::{ChipConfig, TICK_S};
use crate::device::{apply_write_pulse, cell_path_resistance, DeviceState};
use crate::error::{Error, Result};
use crate::frontend::{
    adc_code_to_voltage, autorange_trace_noisy, dac_code_to_voltage, AutorangeTrace, ResistorBank, TheveninSource,
};
use crate::serializer::{
    retrieve_packet, stream_frame, BitPair, DataPacket, Frame, FrameHeader, StreamMode, DATA_SLOTS, FRAME_ENTRIES,
};

pub mod reg {
    pub const CTRL: u8 = 0x00;
    pub const ROW_GRAY: u8 = 0x01;
    pub const COL_ADDR: u8 = 0x02;
    pub const DAC_CODE: u8 = 0x03;
    pub const PULSE_WIDTH: u8 = 0x04;
    pub const THRESHOLD: u8 = 0x05;
    pub const SET_MASK_LO: u8 = 0x06;
    pub const SET_MASK_HI: u8 = 0x07;
    pub const SERIAL_CTRL: u8 = 0x08;
    pub const STATUS: u8 = 0x09;
    pub const FRAME_COUNT: u8 = 0x0a;
    pub const REG_CHECKSUM: u8 = 0x0b;
    pub const SET_CFG_BASE: u8 = 0x20;

    pub const CTRL_MODE_MASK: u16 = 0b11;
    pub const CTRL_POLARITY: u16 = 1 << 2;
    pub const CTRL_GO: u16 = 1 << 3;

    pub const STATUS_BUSY: u16 = 1 << 0;
    pub const STATUS_DONE: u16 = 1 << 1;
    pub const STATUS_FRAME_READY: u16 = 1 << 2;
    pub const STATUS_LAST_OP_SHIFT: u16 = 3;
    pub const STATUS_SATURATED: u16 = 1 << 5;

    pub const SERIAL_SINGLE: u16 = 1 << 15;
    pub const SERIAL_TARGET_MASK: u16 = 0x3f;

    /// Builds a register address from sub-array and offset.
    pub const fn addr(sub_array: usize, offset: u8) -> u8 {
        ((sub_array as u8) << 6) | offset
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OpMode {
    #[default]
    Idle,
    Write,
    Read,
}

impl OpMode {
    fn bits(self) -> u16 {
        match self {
            OpMode::Idle => 0,
            OpMode::Write => 1,
            OpMode::Read => 2,
        }
    }

    fn from_bits(bits: u16) -> Option<Self> {
        match bits {
            0 => Some(OpMode::Idle),
            1 => Some(OpMode::Write),
            2 => Some(OpMode::Read),
            _ => None,
        }
    }
}

/// One 25-bit SPI frame: `[24]` write, `[23:16]` address, `[15:0]` data,
/// shifted MSB first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SpiTransaction {
    pub write: bool,
    pub reg_addr: u8,
    pub payload: u16,
}

impl SpiTransaction {
    pub const BITS: u32 = 25;

    pub fn write(reg_addr: u8, payload: u16) -> Self {
        SpiTransaction { write: true, reg_addr, payload }
    }

    pub fn read(reg_addr: u8) -> Self {
        SpiTransaction { write: false, reg_addr, payload: 0 }
    }

    pub fn encode(&self) -> u32 {
        (u32::from(self.write) << 24) | (u32::from(self.reg_addr) << 16) | u32::from(self.payload)
    }

    pub fn decode(frame: u32) -> Result<Self> {
        if frame >> Self::BITS != 0 {
            return Err(Error::Input(format!("SPI frame 0x{frame:x} exceeds 25 bits")));
        }
        Ok(SpiTransaction { write: frame >> 24 != 0, reg_addr: (frame >> 16) as u8, payload: frame as u16 })
    }

    /// Wire order, MSB first.
    pub fn bits(&self) -> impl Iterator<Item = bool> {
        let f = self.encode();
        (0..Self::BITS).rev().map(move |i| (f >> i) & 1 != 0)
    }
}

/// Writable configuration of one sub-array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChipRegisterFile {
    pub op_mode: OpMode,
    pub polarity: Polarity,
    pub row_addr_gray: u16,
    pub col_addr: u16,
    pub dac_code: u8,
    pub pulse_width_ticks: u16,
    pub threshold_code: u16,
    pub set_mask: u32,
    pub serial_ctrl: u16,
    pub set_cfg: [u16; SETS],
}

impl ChipRegisterFile {
    pub fn reset(threshold_code: u16) -> Self {
        ChipRegisterFile {
            op_mode: OpMode::Idle,
            polarity: Polarity::Forward,
            row_addr_gray: 0,
            col_addr: 0,
            dac_code: 0,
            pulse_width_ticks: 1,
            threshold_code,
            set_mask: 0,
            serial_ctrl: 0,
            set_cfg: [0; SETS],
        }
    }

    fn ctrl(&self) -> u16 {
        self.op_mode.bits() | if self.polarity.bit() { reg::CTRL_POLARITY } else { 0 }
    }

    /// Value of a writable register, `None` for read-only or unmapped offsets.
    pub fn get(&self, offset: u8) -> Option<u16> {
        Some(match offset {
            reg::CTRL => self.ctrl(),
            reg::ROW_GRAY => self.row_addr_gray,
            reg::COL_ADDR => self.col_addr,
            reg::DAC_CODE => self.dac_code.into(),
            reg::PULSE_WIDTH => self.pulse_width_ticks,
            reg::THRESHOLD => self.threshold_code,
            reg::SET_MASK_LO => self.set_mask as u16,
            reg::SET_MASK_HI => (self.set_mask >> 16) as u16,
            reg::SERIAL_CTRL => self.serial_ctrl,
            o if (reg::SET_CFG_BASE..reg::SET_CFG_BASE + SETS as u8).contains(&o) => {
                self.set_cfg[usize::from(o - reg::SET_CFG_BASE)]
            }
            _ => return None,
        })
    }

    pub fn writable_offsets() -> impl Iterator<Item = u8> {
        (reg::CTRL..=reg::SERIAL_CTRL).chain(reg::SET_CFG_BASE..reg::SET_CFG_BASE + SETS as u8)
    }

    /// XOR fold of every writable register, each rotated by its offset.
    pub fn checksum(&self) -> u16 {
        Self::writable_offsets()
            .fold(0u16, |acc, o| acc ^ self.get(o).expect("writable").rotate_left(u32::from(o % 16)))
    }

    pub fn stream_mode(&self) -> StreamMode {
        if self.serial_ctrl & reg::SERIAL_SINGLE != 0 {
            StreamMode::Packet((self.serial_ctrl & reg::SERIAL_TARGET_MASK) as u8)
        } else {
            StreamMode::Frame
        }
    }

    fn set(&mut self, offset: u8, value: u16) -> Result<()> {
        let addr = offset;
        let width = |bits: u32| -> Result<()> {
            if u32::from(value) >> bits != 0 {
                Err(Error::Access { addr, reason: "value exceeds register width" })
            } else {
                Ok(())
            }
        };
        match offset {
            reg::CTRL => {
                width(4)?;
                self.op_mode = OpMode::from_bits(value & reg::CTRL_MODE_MASK)
                    .ok_or(Error::Access { addr, reason: "invalid op_mode" })?;
                self.polarity = Polarity::from_bit(value & reg::CTRL_POLARITY != 0);
            }
            reg::ROW_GRAY => {
                width(9)?;
                self.row_addr_gray = value;
            }
            reg::COL_ADDR => {
                width(9)?;
                self.col_addr = value;
            }
            reg::DAC_CODE => {
                width(8)?;
                self.dac_code = value as u8;
            }
            reg::PULSE_WIDTH => {
                if value == 0 {
                    return Err(Error::Access { addr, reason: "pulse width must be at least one tick" });
                }
                self.pulse_width_ticks = value;
            }
            reg::THRESHOLD => {
                width(12)?;
                self.threshold_code = value;
            }
            reg::SET_MASK_LO => self.set_mask = (self.set_mask & 0xffff_0000) | u32::from(value),
            reg::SET_MASK_HI => self.set_mask = (self.set_mask & 0x0000_ffff) | (u32::from(value) << 16),
            reg::SERIAL_CTRL => {
                if value & !(reg::SERIAL_SINGLE | reg::SERIAL_TARGET_MASK) != 0
                    || usize::from(value & reg::SERIAL_TARGET_MASK) >= FRAME_ENTRIES
                {
                    return Err(Error::Access { addr, reason: "invalid serializer control" });
                }
                self.serial_ctrl = value;
            }
            reg::STATUS | reg::FRAME_COUNT | reg::REG_CHECKSUM => {
                return Err(Error::Access { addr, reason: "register is read-only" })
            }
            o if (reg::SET_CFG_BASE..reg::SET_CFG_BASE + SETS as u8).contains(&o) => {
                width(12)?;
                self.set_cfg[usize::from(o - reg::SET_CFG_BASE)] = value;
            }
            _ => return Err(Error::Access { addr, reason: "unmapped register" }),
        }
        Ok(())
    }

    /// Cells targeted by the next operation with their DAC codes: the
    /// masked sets if any, else the single `COL_ADDR` cell.
    fn targets(&self) -> Vec<(usize, u8)> {
        if self.set_mask == 0 {
            return vec![(usize::from(self.col_addr), self.dac_code)];
        }
        (0..SETS)
            .filter(|s| self.set_mask >> s & 1 != 0)
            .map(|s| {
                let cfg = self.set_cfg[s];
                (s * COLS_PER_SET + usize::from(cfg & 0xf), (cfg >> 4) as u8)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TimingReport {
    pub setup_ticks: u64,
    /// Pulse length for writes, bank stage phases for reads.
    pub active_ticks: u64,
    pub adc_ticks: u64,
    pub serialize_cycles: u64,
    pub row_enabled_ticks: u64,
    pub start_tick: u64,
    pub end_tick: u64,
}

impl TimingReport {
    pub fn total_ticks(&self) -> u64 {
        self.end_tick - self.start_tick
    }
}

/// Serializer output produced by one read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaneTransfer {
    pub sub_array: u8,
    pub mode: StreamMode,
    pub cycle0: u64,
    pub symbols: Vec<BitPair>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Setup,
    Active,
    Adc,
    Serialize,
}

#[derive(Debug, Clone)]
struct Target {
    row: usize,
    col: usize,
    dac: u8,
}

#[derive(Debug, Clone)]
struct Job {
    mode: OpMode,
    polarity: Polarity,
    row_gray: u16,
    targets: Vec<Target>,
    threshold_code: u16,
    pulse_ticks: u16,
    reg_checksum: u16,
    stream: StreamMode,
    phase: Phase,
    remaining: u64,
    report: TimingReport,
    pending_packets: Vec<(usize, DataPacket)>,
    pending_cells: Vec<(usize, usize, Cell)>,
}

/// One independently controlled sub-array with its controller FSM and
/// serializer lane.
#[derive(Debug, Clone)]
pub struct SubArrayUnit {
    index: usize,
    cfg: Arc<ChipConfig>,
    regs: ChipRegisterFile,
    array: SubArrayState,
    job: Option<Job>,
    tick: u64,
    done: bool,
    last_op: OpMode,
    last_saturated: bool,
    frame_counter: u16,
    lane: Vec<LaneTransfer>,
    last_timing: Option<TimingReport>,
    noise: ChaCha8Rng,
}

impl SubArrayUnit {
    fn new(index: usize, cfg: Arc<ChipConfig>) -> Self {
        let regs = ChipRegisterFile::reset(cfg.threshold_reset_code());
        SubArrayUnit {
            index,
            array: SubArrayState::new(cfg.unpopulated),
            noise: ChaCha8Rng::seed_from_u64(cfg.noise.seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)),
            cfg,
            regs,
            job: None,
            tick: 0,
            done: false,
            last_op: OpMode::Idle,
            last_saturated: false,
            frame_counter: 0,
            lane: Vec::new(),
            last_timing: None,
        }
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn config(&self) -> &ChipConfig {
        &self.cfg
    }

    pub fn registers(&self) -> &ChipRegisterFile {
        &self.regs
    }

    pub fn array(&self) -> &SubArrayState {
        &self.array
    }

    pub fn array_mut(&mut self) -> &mut SubArrayState {
        &mut self.array
    }

    pub fn busy(&self) -> bool {
        self.job.is_some()
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn last_timing(&self) -> Option<TimingReport> {
        self.last_timing
    }

    pub fn status(&self) -> u16 {
        let mut s = 0;
        if self.busy() {
            s |= reg::STATUS_BUSY;
        }
        if self.done {
            s |= reg::STATUS_DONE;
        }
        if !self.lane.is_empty() {
            s |= reg::STATUS_FRAME_READY;
        }
        if self.last_saturated {
            s |= reg::STATUS_SATURATED;
        }
        s | (self.last_op.bits() << reg::STATUS_LAST_OP_SHIFT)
    }

    /// Register access at `offset`. Returns the value held before the
    /// access, the way a full-duplex shift register hands it back.
    pub fn spi_access(&mut self, write: bool, offset: u8, payload: u16) -> Result<u16> {
        let addr = reg::addr(self.index, offset);
        let current = match offset {
            reg::STATUS => self.status(),
            reg::FRAME_COUNT => self.frame_counter,
            reg::REG_CHECKSUM => self.regs.checksum(),
            o => self.regs.get(o).ok_or(Error::Access { addr, reason: "unmapped register" })?,
        };
        if !write {
            return Ok(current);
        }
        if offset == reg::CTRL && payload & reg::CTRL_GO != 0 && self.busy() {
            return Err(Error::Busy(self.index));
        }
        let value = if offset == reg::CTRL { payload & !reg::CTRL_GO } else { payload };
        self.regs.set(offset, value).map_err(|e| match e {
            Error::Access { reason, .. } => Error::Access { addr, reason },
            other => other,
        })?;
        if offset == reg::CTRL && payload & reg::CTRL_GO != 0 {
            self.start()?;
        }
        Ok(current)
    }

    fn start(&mut self) -> Result<()> {
        let mode = self.regs.op_mode;
        if mode == OpMode::Idle {
            return Ok(());
        }
        let row = usize::from(crate::array::gray_decode(self.regs.row_addr_gray));
        let mut targets = Vec::new();
        for (col, dac) in self.regs.targets() {
            if col >= COLS || row >= ROWS {
                return Err(Error::Selection(format!("cell ({row}, {col}) out of bounds")));
            }
            targets.push(Target { row, col, dac });
        }
        let setup = u64::from(match mode {
            OpMode::Write => self.cfg.timing.write_setup_ticks,
            _ => self.cfg.timing.read_setup_ticks,
        });
        self.done = false;
        self.job = Some(Job {
            mode,
            polarity: self.regs.polarity,
            row_gray: self.regs.row_addr_gray,
            targets,
            threshold_code: self.regs.threshold_code,
            pulse_ticks: self.regs.pulse_width_ticks,
            reg_checksum: self.regs.checksum(),
            stream: self.regs.stream_mode(),
            phase: Phase::Setup,
            remaining: setup,
            report: TimingReport { setup_ticks: setup, start_tick: self.tick, ..Default::default() },
            pending_packets: Vec::new(),
            pending_cells: Vec::new(),
        });
        // zero-length setup moves straight into the active phase
        self.advance(0);
        Ok(())
    }

    pub fn run_ticks(&mut self, n: u64) {
        self.advance(n);
    }

    /// Runs until the current operation finishes; returns the ticks spent.
    pub fn run_until_idle(&mut self) -> u64 {
        let start = self.tick;
        while let Some(job) = &self.job {
            let step = job.remaining.max(1);
            self.advance(step);
        }
        self.tick - start
    }

    fn advance(&mut self, mut n: u64) {
        loop {
            let Some(job) = self.job.as_mut() else {
                self.tick += n;
                return;
            };
            if job.remaining > 0 {
                let step = job.remaining.min(n);
                job.remaining -= step;
                self.tick += step;
                n -= step;
                if job.remaining > 0 {
                    return;
                }
            }
            self.next_phase();
            if n == 0 && self.job.as_ref().is_some_and(|j| j.remaining > 0) {
                return;
            }
        }
    }

    fn next_phase(&mut self) {
        let mut job = self.job.take().expect("called with a job");
        match (job.mode, job.phase) {
            (OpMode::Write, Phase::Setup) => {
                self.connect(&job);
                job.phase = Phase::Active;
                job.remaining = u64::from(job.pulse_ticks);
                job.report.active_ticks = job.remaining;
                job.report.row_enabled_ticks = job.remaining;
            }
            (OpMode::Write, Phase::Active) => {
                let width_s = job.report.active_ticks as f64 * TICK_S;
                self.write_cells(&job, width_s);
                self.array.select_row(0, false);
                return self.finish(job);
            }
            (OpMode::Read, Phase::Setup) => {
                self.connect(&job);
                let convert = self.convert(&mut job);
                job.phase = Phase::Active;
                job.remaining = convert;
                job.report.active_ticks = convert;
            }
            (OpMode::Read, Phase::Active) => {
                job.phase = Phase::Adc;
                job.remaining = self.cfg.adc_conversion_ticks();
                job.report.adc_ticks = job.remaining;
            }
            (OpMode::Read, Phase::Adc) => {
                job.report.row_enabled_ticks = job.report.active_ticks + job.report.adc_ticks;
                self.array.select_row(0, false);
                for (r, c, cell) in std::mem::take(&mut job.pending_cells) {
                    self.array.set_cell(r, c, cell);
                }
                job.phase = Phase::Serialize;
                job.remaining = job.stream.cycles();
                job.report.serialize_cycles = job.remaining;
            }
            (OpMode::Read, Phase::Serialize) => {
                self.emit_frame(&job);
                return self.finish(job);
            }
            (OpMode::Idle, _) | (_, _) => unreachable!("no idle jobs"),
        }
        self.job = Some(job);
    }

    fn connect(&mut self, job: &Job) {
        self.array.select_row(job.row_gray, true);
        for t in &job.targets {
            self.array.select_column(t.col / COLS_PER_SET, t.col % COLS_PER_SET);
        }
    }

    fn write_cells(&mut self, job: &Job, width_s: f64) {
        let r_access = self.cfg.cell.r_access_on_ohms;
        for t in &job.targets {
            let cell = *self.array.cell(t.row, t.col);
            let r = cell.state.resistance_ohms;
            let v_drive = dac_code_to_voltage(t.dac, &self.cfg.dac);
            let v_dut = job.polarity.sign() * v_drive * r / (r + r_access);
            if let Ok(state) = apply_write_pulse(&cell.state, &cell.model, v_dut, width_s) {
                if state != cell.state {
                    self.array.set_cell(t.row, t.col, Cell { state, ..cell });
                }
            }
        }
    }

    fn bank(&self, threshold_code: u16) -> ResistorBank {
        ResistorBank { v_threshold_volts: adc_code_to_voltage(threshold_code, &self.cfg.adc), ..self.cfg.bank }
    }

    fn trace(&mut self, drive: &DriveResult, state: &DeviceState, bank: &ResistorBank) -> (AutorangeTrace, f64) {
        let trace = autorange_trace_noisy(
            &drive.source,
            bank,
            &self.cfg.adc,
            &self.cfg.stage_timing,
            self.cfg.noise.sigma_volts,
            &mut self.noise,
        );
        let stage = trace.result.stage().expect("converter output is one-hot");
        let v_dut = dut_voltage(drive, state, bank.r_ohms[stage]);
        (trace, v_dut)
    }

    /// Converts every target set and returns the length of the convert
    /// phase. The read voltage stresses the device for the whole window the
    /// row is on; a device that switches is sampled in its new state.
    fn convert(&mut self, job: &mut Job) -> u64 {
        let bank = self.bank(job.threshold_code);
        let mut first = Vec::with_capacity(job.targets.len());
        for t in &job.targets {
            let v_drive = dac_code_to_voltage(t.dac, &self.cfg.dac);
            let drive = self
                .array
                .drive_cell(t.row, t.col, v_drive, job.polarity, &self.cfg.cell)
                .expect("row and column connected before conversion");
            let cell = *self.array.cell(t.row, t.col);
            let (trace, v_dut) = self.trace(&drive, &cell.state, &bank);
            first.push((drive, cell, trace, v_dut));
        }
        let convert_ticks = first.iter().map(|f| f.2.total_ticks()).max().unwrap_or(0);
        let window_s = (convert_ticks + self.cfg.adc_conversion_ticks()) as f64 * TICK_S;
        let mut saturated = false;
        for (t, (drive, cell, trace, v_dut)) in job.targets.iter().zip(first) {
            let mut result = trace.result;
            if let Ok(state) = apply_write_pulse(&cell.state, &cell.model, v_dut, window_s) {
                if state != cell.state {
                    let stressed = DriveResult {
                        source: TheveninSource::new(
                            drive.source.v_open_volts,
                            cell_path_resistance(&state, &self.cfg.cell, true),
                        ),
                        ..drive
                    };
                    result = self.trace(&stressed, &state, &bank).0.result;
                    job.pending_cells.push((t.row, t.col, Cell { state, ..cell }));
                }
            }
            saturated |= result.saturated_low || result.saturated_high;
            job.pending_packets
                .push((t.col / COLS_PER_SET, DataPacket::from_readout(&result, (t.col % COLS_PER_SET) as u8, 0)));
        }
        self.last_saturated = saturated;
        convert_ticks
    }

    fn emit_frame(&mut self, job: &Job) {
        self.frame_counter = self.frame_counter.wrapping_add(1);
        let seq = (self.frame_counter & 0b11) as u8;
        let mut data = [DataPacket::default(); DATA_SLOTS];
        for (set, p) in &job.pending_packets {
            data[*set] = DataPacket { status: p.status | seq, ..*p };
        }
        let header =
            FrameHeader { frame_counter: self.frame_counter, sub_array: self.index as u8, busy: true, n_valid: 0 };
        let frame = Frame::new(&data, header, job.reg_checksum).expect("packet fields within width");
        let symbols = match job.stream {
            StreamMode::Frame => stream_frame(&frame),
            StreamMode::Packet(n) => retrieve_packet(&frame, n.into()).expect("target validated").0,
        };
        self.lane.push(LaneTransfer {
            sub_array: self.index as u8,
            mode: job.stream,
            cycle0: self.tick - job.report.serialize_cycles,
            symbols,
        });
    }

    fn finish(&mut self, mut job: Job) {
        job.report.end_tick = self.tick;
        self.last_timing = Some(job.report);
        self.last_op = job.mode;
        self.done = true;
    }

    /// Takes everything the serializer has shifted out since the last drain.
    pub fn drain_lane(&mut self) -> Vec<LaneTransfer> {
        std::mem::take(&mut self.lane)
    }

    /// Issues `go` for a configured write and runs it to completion.
    pub fn execute_write(&mut self) -> Result<TimingReport> {
        self.execute(OpMode::Write)?;
        Ok(self.last_timing.expect("operation finished"))
    }

    /// Issues `go` for a configured read, runs it to completion and returns
    /// the lane transfer it produced.
    pub fn execute_read(&mut self) -> Result<(LaneTransfer, TimingReport)> {
        self.execute(OpMode::Read)?;
        let transfer = self.lane.pop().expect("read emits one transfer");
        Ok((transfer, self.last_timing.expect("operation finished")))
    }

    fn execute(&mut self, mode: OpMode) -> Result<()> {
        if self.regs.op_mode != mode {
            return Err(Error::Input(format!("op_mode is {:?}, expected {mode:?}", self.regs.op_mode)));
        }
        let ctrl = self.regs.ctrl() | reg::CTRL_GO;
        self.spi_access(true, reg::CTRL, ctrl)?;
        self.run_until_idle();
        Ok(())
    }

    /// Structural invariants that must hold at every tick.
    pub fn check_invariants(&self) -> Result<()> {
        if let Some(row) = self.array.enabled_row() {
            if self.job.is_none() {
                return Err(Error::Selection(format!("row {row} enabled while idle")));
            }
        }
        if (0..SETS).any(|s| self.array.selected_col(s) >= COLS_PER_SET) {
            return Err(Error::Selection("column mux out of range".into()));
        }
        Ok(())
    }
}

/// The whole chip: four sub-array units behind one SPI port.
#[derive(Debug, Clone)]
pub struct Chip {
    cfg: Arc<ChipConfig>,
    units: [SubArrayUnit; SUB_ARRAYS],
}

impl Chip {
    pub fn new(cfg: ChipConfig) -> Result<Self> {
        cfg.validate()?;
        let cfg = Arc::new(cfg);
        Ok(Chip { units: std::array::from_fn(|i| SubArrayUnit::new(i, cfg.clone())), cfg })
    }

    pub fn config(&self) -> &ChipConfig {
        &self.cfg
    }

    pub fn spi(&mut self, t: SpiTransaction) -> Result<u16> {
        let sub = usize::from(t.reg_addr >> 6);
        self.units[sub].spi_access(t.write, t.reg_addr & 0x3f, t.payload)
    }

    pub fn run_ticks(&mut self, n: u64) {
        for u in &mut self.units {
            u.run_ticks(n);
        }
    }

    /// Advances every unit in lockstep until `sub_array` is idle.
    pub fn run_until_idle(&mut self, sub_array: usize) -> u64 {
        let mut total = 0;
        while let Some(job) = &self.units[sub_array].job {
            let step = job.remaining.max(1);
            self.run_ticks(step);
            total += step;
        }
        total
    }

    pub fn unit(&self, sub_array: usize) -> &SubArrayUnit {
        &self.units[sub_array]
    }

    pub fn unit_mut(&mut self, sub_array: usize) -> &mut SubArrayUnit {
        &mut self.units[sub_array]
    }

    pub fn units_mut(&mut self) -> &mut [SubArrayUnit; SUB_ARRAYS] {
        &mut self.units
    }

    pub fn drain_lane(&mut self, sub_array: usize) -> Vec<LaneTransfer> {
        self.units[sub_array].drain_lane()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::gray_encode;
    use crate::device::DeviceModelSpec;
    use crate::frontend::voltage_to_dac_code;
    use crate::serializer::deserialize_frame;

    fn chip_with(model: DeviceModelSpec) -> Chip {
        let cfg = ChipConfig { unpopulated: model, ..ChipConfig::default() };
        Chip::new(cfg).unwrap()
    }

    fn w(chip: &mut Chip, sub: usize, off: u8, v: u16) {
        chip.spi(SpiTransaction::write(reg::addr(sub, off), v)).unwrap();
    }

    fn r(chip: &mut Chip, sub: usize, off: u8) -> u16 {
        chip.spi(SpiTransaction::read(reg::addr(sub, off))).unwrap()
    }

    #[test]
    fn spi_frame_layout() {
        let t = SpiTransaction::write(0x43, 0xbeef);
        assert_eq!(t.encode(), 0x143_beef);
        assert_eq!(SpiTransaction::decode(0x143_beef).unwrap(), t);
        assert!(SpiTransaction::decode(1 << 25).is_err());
        let bits: Vec<bool> = t.bits().collect();
        assert_eq!(bits.len(), 25);
        assert!(bits[0]);
        assert_eq!(bits[1..9], [false, true, false, false, false, false, true, true]);
    }

    #[test]
    fn register_readback() {
        let mut chip = chip_with(DeviceModelSpec::linear(1e3));
        w(&mut chip, 0, reg::DAC_CODE, 39);
        assert_eq!(r(&mut chip, 0, reg::DAC_CODE), 39);
        assert_eq!(r(&mut chip, 1, reg::DAC_CODE), 0);
        // full-duplex readback returns the previous value
        let prev = chip.spi(SpiTransaction::write(reg::addr(0, reg::DAC_CODE), 40)).unwrap();
        assert_eq!(prev, 39);
        assert_eq!(r(&mut chip, 0, reg::THRESHOLD), 153);
        assert_eq!(r(&mut chip, 0, reg::PULSE_WIDTH), 1);
    }

    #[test]
    fn access_errors() {
        let mut chip = chip_with(DeviceModelSpec::linear(1e3));
        for (off, v) in [
            (reg::STATUS, 0),
            (reg::FRAME_COUNT, 1),
            (reg::REG_CHECKSUM, 1),
            (0x10, 0),
            (reg::DAC_CODE, 256),
            (reg::PULSE_WIDTH, 0),
            (reg::CTRL, 3),
            (reg::SERIAL_CTRL, reg::SERIAL_SINGLE | 34),
        ] {
            assert!(
                matches!(chip.spi(SpiTransaction::write(reg::addr(2, off), v)), Err(Error::Access { .. })),
                "offset {off:#x}"
            );
        }
        assert!(matches!(chip.spi(SpiTransaction::read(reg::addr(1, 0x1f))), Err(Error::Access { addr: 0x5f, .. })));
    }

    #[test]
    fn go_while_idle_mode_does_nothing() {
        let mut chip = chip_with(DeviceModelSpec::linear(1e3));
        w(&mut chip, 0, reg::CTRL, reg::CTRL_GO);
        assert_eq!(r(&mut chip, 0, reg::STATUS), 0);
        chip.run_ticks(1000);
        assert!(chip.drain_lane(0).is_empty());
    }

    #[test]
    fn run_zero_ticks_is_noop() {
        let mut chip = chip_with(DeviceModelSpec::linear(1e3));
        w(&mut chip, 0, reg::CTRL, 2);
        w(&mut chip, 0, reg::CTRL, 2 | reg::CTRL_GO);
        let before = chip.unit(0).tick();
        let status = r(&mut chip, 0, reg::STATUS);
        chip.run_ticks(0);
        assert_eq!(chip.unit(0).tick(), before);
        assert_eq!(r(&mut chip, 0, reg::STATUS), status);
    }

    #[test]
    fn write_switches_and_times_exactly() {
        let mut chip = chip_with(DeviceModelSpec::bistable(1e3, 1e5));
        // DUT at 1e5 ohm sees v * 1e5 / (1e5 + 50); 1.6 V is enough
        let code = voltage_to_dac_code(1.6, &chip.config().dac);
        w(&mut chip, 0, reg::ROW_GRAY, gray_encode(5));
        w(&mut chip, 0, reg::COL_ADDR, 17);
        w(&mut chip, 0, reg::DAC_CODE, code.into());
        w(&mut chip, 0, reg::PULSE_WIDTH, 20);
        w(&mut chip, 0, reg::CTRL, 1);
        w(&mut chip, 0, reg::CTRL, 1 | reg::CTRL_GO);
        assert_eq!(r(&mut chip, 0, reg::STATUS) & reg::STATUS_BUSY, 1);
        // go while busy is rejected and leaves state alone
        assert!(matches!(
            chip.spi(SpiTransaction::write(reg::addr(0, reg::CTRL), 2 | reg::CTRL_GO)),
            Err(Error::Busy(0))
        ));
        assert_eq!(chip.unit(0).registers().op_mode, OpMode::Write);
        chip.run_ticks(4);
        assert_eq!(chip.unit(0).array().enabled_row(), Some(5));
        chip.run_ticks(19);
        assert!(chip.unit(0).busy());
        assert_eq!(chip.unit(0).array().cell(5, 17).state.resistance_ohms, 1e5);
        chip.run_ticks(1);
        assert!(!chip.unit(0).busy());
        assert_eq!(chip.unit(0).array().enabled_row(), None);
        assert_eq!(chip.unit(0).array().cell(5, 17).state.resistance_ohms, 1e3);
        let t = chip.unit(0).last_timing().unwrap();
        assert_eq!(t.total_ticks(), 24);
        assert_eq!(t.row_enabled_ticks, 20);
        assert!(chip.drain_lane(0).is_empty(), "writes never produce packets");
        assert_eq!(r(&mut chip, 0, reg::STATUS), reg::STATUS_DONE | (1 << reg::STATUS_LAST_OP_SHIFT));
    }

    #[test]
    fn minimum_pulse_is_one_tick() {
        let mut chip = chip_with(DeviceModelSpec::bistable(1e3, 1e5));
        let u = chip.unit_mut(0);
        u.spi_access(true, reg::DAC_CODE, 255).unwrap();
        u.spi_access(true, reg::CTRL, 1).unwrap();
        let t = u.execute_write().unwrap();
        assert_eq!(t.active_ticks, 1);
        // 5 ns is below the device's 10 ns switching width
        assert_eq!(u.array().cell(0, 0).state.resistance_ohms, 1e5);
    }

    #[test]
    fn read_produces_one_frame() {
        let mut chip = chip_with(DeviceModelSpec::linear(1e3));
        let u = chip.unit_mut(1);
        u.spi_access(true, reg::DAC_CODE, 39).unwrap();
        u.spi_access(true, reg::COL_ADDR, 40).unwrap();
        u.spi_access(true, reg::CTRL, 2).unwrap();
        let (transfer, timing) = u.execute_read().unwrap();
        let frame = deserialize_frame(&transfer.symbols).unwrap();
        assert_eq!(frame.header().n_valid, 1);
        assert_eq!(frame.header().sub_array, 1);
        let p = frame.packet(2);
        assert!(p.valid());
        assert_eq!(p.col_in_set, 8);
        assert_eq!(p.gain_sel, 1);
        assert_eq!(p.sequence(), 1);
        assert_eq!(timing.adc_ticks, 800);
        assert_eq!(timing.serialize_cycles, 443);
        assert_eq!(timing.active_ticks, 8);
        assert_eq!(timing.total_ticks(), 4 + 8 + 800 + 443);
        assert_eq!(frame.reg_checksum(), u.registers().checksum());
    }

    #[test]
    fn read_without_go_is_silent() {
        let mut chip = chip_with(DeviceModelSpec::linear(1e3));
        w(&mut chip, 0, reg::CTRL, 2);
        chip.run_ticks(10_000);
        assert!(chip.drain_lane(0).is_empty());
    }

    #[test]
    fn sub_arrays_independent() {
        let mut chip = chip_with(DeviceModelSpec::linear(1e3));
        w(&mut chip, 0, reg::PULSE_WIDTH, 100);
        w(&mut chip, 0, reg::CTRL, 1 | reg::CTRL_GO);
        w(&mut chip, 3, reg::CTRL, 2 | reg::CTRL_GO);
        chip.run_ticks(104);
        assert!(!chip.unit(0).busy());
        assert!(chip.unit(3).busy());
        chip.run_until_idle(3);
        assert_eq!(chip.drain_lane(3).len(), 1);
        assert!(chip.drain_lane(0).is_empty());
    }

    #[test]
    fn masked_read_emits_frame() {
        let mut chip = chip_with(DeviceModelSpec::linear(1e3));
        w(&mut chip, 0, reg::SET_MASK_LO, 0b11);
        w(&mut chip, 0, reg::CTRL, 2);
        assert!(chip.spi(SpiTransaction::write(reg::addr(0, reg::CTRL), 2 | reg::CTRL_GO)).is_ok());
        chip.run_until_idle(0);
        assert_eq!(chip.drain_lane(0).len(), 1);
    }

    #[test]
    fn checksum_changes_with_registers() {
        let a = ChipRegisterFile::reset(153);
        let mut b = a.clone();
        b.set_cfg[7] = 1;
        assert_ne!(a.checksum(), b.checksum());
    }
}
