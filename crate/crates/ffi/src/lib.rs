//! C ABI over the simulator.
//!
//! Every call returns an [`RramStatus`]. On failure, a readable message is
//! available from [`rram_last_error`] on the same thread. Chips are opaque
//! [`RramChip`] handles created by [`rram_chip_new`] and released with
//! [`rram_chip_free`].
//!
//! Serializer output produced by raw SPI operation accumulates per
//! sub-array and is read with [`rram_lane_read`], one symbol (bit pair) per
//! byte.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};

use rramsim::array::{gray_decode, gray_encode, Cell, CellAddress, Polarity, SUB_ARRAYS};
use rramsim::config::ChipConfig;
use rramsim::controller::{Chip, SpiTransaction};
use rramsim::device::DeviceModelSpec;
use rramsim::frontend::{autorange_convert, ReadoutResult, TheveninSource};
use rramsim::host::{Driver, MeasurementRecord, WriteParams};
use rramsim::population::Population;
use rramsim::serializer::DataPacket;
use rramsim::Error;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RramStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Range = 3,
    Selection = 4,
    Busy = 5,
    Io = 6,
    Integrity = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

impl From<&Error> for RramStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Input(_) | Error::Parse { .. } | Error::Config(_) => RramStatus::InvalidArgument,
            Error::PulseWidth { .. } | Error::Range(_) | Error::Encoding { .. } | Error::PacketIndex(_) => {
                RramStatus::Range
            }
            Error::Selection(_) | Error::SetConflict { .. } | Error::Access { .. } => RramStatus::Selection,
            Error::Busy(_) => RramStatus::Busy,
            Error::Io { .. } | Error::Csv(_) => RramStatus::Io,
            Error::Framing(_) | Error::Integrity(_) => RramStatus::Integrity,
        }
    }
}

/// Opaque chip handle.
pub struct RramChip {
    chip: Chip,
    lanes: [Vec<u8>; SUB_ARRAYS],
}

impl RramChip {
    /// Moves serializer output from the chip into the handle's buffers.
    fn collect_lanes(&mut self) {
        for (s, buf) in self.lanes.iter_mut().enumerate() {
            for t in self.chip.drain_lane(s) {
                buf.extend(t.symbols);
            }
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct RramReadout {
    pub adc_code: u16,
    pub gain_sel: u8,
    pub saturated_low: bool,
    pub saturated_high: bool,
}

impl From<ReadoutResult> for RramReadout {
    fn from(r: ReadoutResult) -> Self {
        RramReadout {
            adc_code: r.adc_code,
            gain_sel: r.gain_sel,
            saturated_low: r.saturated_low,
            saturated_high: r.saturated_high,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct RramDataPacket {
    pub adc_code: u16,
    pub gain_sel: u8,
    pub col_in_set: u8,
    pub status: u8,
}

/// A reconstructed measurement. `true_r_ohms` is the simulated cell's
/// resistance before the read. `flags` bits: 1 saturated low, 2 saturated
/// high, 4 non-positive resistance.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct RramMeasurement {
    pub v_dut_volts: f64,
    pub i_amps: f64,
    pub r_ohms: f64,
    pub true_r_ohms: f64,
    pub sim_time_s: f64,
    pub adc_code: u16,
    pub dac_code: u8,
    pub gain_sel: u8,
    pub flags: u8,
}

impl From<MeasurementRecord> for RramMeasurement {
    fn from(m: MeasurementRecord) -> Self {
        RramMeasurement {
            v_dut_volts: m.v_dut_volts,
            i_amps: m.i_amps,
            r_ohms: m.r_ohms,
            true_r_ohms: m.true_r_ohms.unwrap_or(f64::NAN),
            sim_time_s: m.sim_time_s,
            adc_code: m.adc_code,
            dac_code: m.dac_code,
            gain_sel: m.gain_sel,
            flags: m.flags.bits(),
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn fail(status: RramStatus, msg: impl Into<String>) -> RramStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), RramStatus>) -> RramStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RramStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(RramStatus::Panic, "internal panic"),
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, RramStatus>;
}

impl<T> OrStatus<T> for rramsim::Result<T> {
    fn or_status(self) -> Result<T, RramStatus> {
        self.map_err(|e| fail(RramStatus::from(&e), e.to_string()))
    }
}

unsafe fn handle<'a>(chip: *mut RramChip) -> Result<&'a mut RramChip, RramStatus> {
    // SAFETY: caller passes a pointer from rram_chip_new or null
    unsafe { chip.as_mut() }.ok_or_else(|| fail(RramStatus::NullPointer, "null chip handle"))
}

unsafe fn out<'a, T>(p: *mut T) -> Result<&'a mut T, RramStatus> {
    // SAFETY: caller passes a valid, writable pointer or null
    unsafe { p.as_mut() }.ok_or_else(|| fail(RramStatus::NullPointer, "null output pointer"))
}

unsafe fn text<'a>(s: *const c_char) -> Result<Option<&'a str>, RramStatus> {
    if s.is_null() {
        return Ok(None);
    }
    // SAFETY: caller passes a NUL-terminated string
    let s = unsafe { CStr::from_ptr(s) };
    s.to_str().map(Some).map_err(|_| fail(RramStatus::InvalidArgument, "string is not UTF-8"))
}

fn address(sub_array: u32, row: u32, col: u32) -> Result<CellAddress, RramStatus> {
    CellAddress::new(sub_array as usize, row as usize, col as usize).or_status()
}

fn polarity(p: u32) -> Result<Polarity, RramStatus> {
    match p {
        0 => Ok(Polarity::Forward),
        1 => Ok(Polarity::Reverse),
        _ => Err(fail(RramStatus::InvalidArgument, format!("polarity {p} is not 0 or 1"))),
    }
}

/// Copies the last error message of this thread into `buf` (NUL
/// terminated, truncated to `cap`). Returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn rram_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = e.len().min(cap - 1);
            // SAFETY: checked non-null, n < cap
            unsafe {
                std::ptr::copy_nonoverlapping(e.as_ptr(), buf.cast::<u8>(), n);
                *buf.add(n) = 0;
            }
        }
        e.len()
    })
}

/// Creates a chip. `config_toml` may be null for defaults.
///
/// # Safety
/// `config_toml` must be null or NUL terminated; `out_chip` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rram_chip_new(config_toml: *const c_char, out_chip: *mut *mut RramChip) -> RramStatus {
    guard(|| {
        let slot = unsafe { out(out_chip) }?;
        let cfg = match unsafe { text(config_toml) }? {
            Some(t) => ChipConfig::from_toml(t).or_status()?,
            None => ChipConfig::default(),
        };
        let chip = Chip::new(cfg).or_status()?;
        *slot = Box::into_raw(Box::new(RramChip { chip, lanes: Default::default() }));
        Ok(())
    })
}

/// Releases a chip. Null is ignored.
///
/// # Safety
/// `chip` must come from [`rram_chip_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rram_chip_free(chip: *mut RramChip) {
    if !chip.is_null() {
        // SAFETY: pointer came from Box::into_raw in rram_chip_new
        drop(unsafe { Box::from_raw(chip) });
    }
}

/// Applies a population given as TOML text.
///
/// # Safety
/// `chip` must be a live handle and `population_toml` NUL terminated.
#[no_mangle]
pub unsafe extern "C" fn rram_chip_load_population(chip: *mut RramChip, population_toml: *const c_char) -> RramStatus {
    guard(|| {
        let h = unsafe { handle(chip) }?;
        let t = unsafe { text(population_toml) }?.ok_or_else(|| fail(RramStatus::NullPointer, "null population"))?;
        Population::from_toml(t).and_then(|p| p.apply(&mut h.chip)).or_status()?;
        Ok(())
    })
}

/// Fills one sub-array (or all four when `sub_array` is negative) with
/// log-uniform linear resistors.
///
/// # Safety
/// `chip` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn rram_chip_populate_log_uniform(
    chip: *mut RramChip,
    seed: u64,
    sub_array: i32,
    r_min_ohms: f64,
    r_max_ohms: f64,
    stuck_open_fraction: f64,
) -> RramStatus {
    guard(|| {
        let h = unsafe { handle(chip) }?;
        let sub = match sub_array {
            s if s < 0 => None,
            s => Some(u8::try_from(s).map_err(|_| fail(RramStatus::Selection, "sub-array out of range"))?),
        };
        Population::log_uniform(seed, sub, r_min_ohms, r_max_ohms, stuck_open_fraction)
            .apply(&mut h.chip)
            .or_status()?;
        Ok(())
    })
}

/// Places a linear resistor in one cell.
///
/// # Safety
/// `chip` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn rram_chip_set_linear(
    chip: *mut RramChip,
    sub_array: u32,
    row: u32,
    col: u32,
    ohms: f64,
) -> RramStatus {
    unsafe { set_model(chip, sub_array, row, col, DeviceModelSpec::linear(ohms)) }
}

/// Places a bistable device (starting in its high state) in one cell.
///
/// # Safety
/// `chip` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn rram_chip_set_bistable(
    chip: *mut RramChip,
    sub_array: u32,
    row: u32,
    col: u32,
    r_low_ohms: f64,
    r_high_ohms: f64,
) -> RramStatus {
    unsafe { set_model(chip, sub_array, row, col, DeviceModelSpec::bistable(r_low_ohms, r_high_ohms)) }
}

unsafe fn set_model(chip: *mut RramChip, sub_array: u32, row: u32, col: u32, model: DeviceModelSpec) -> RramStatus {
    guard(|| {
        let h = unsafe { handle(chip) }?;
        let a = address(sub_array, row, col)?;
        model.validate().or_status()?;
        h.chip.unit_mut(a.sub_array()).array_mut().set_cell(a.row(), a.col(), Cell::new(model));
        Ok(())
    })
}

/// Current resistance held by a cell.
///
/// # Safety
/// `chip` must be a live handle and `out_ohms` valid.
#[no_mangle]
pub unsafe extern "C" fn rram_chip_cell_resistance(
    chip: *mut RramChip,
    sub_array: u32,
    row: u32,
    col: u32,
    out_ohms: *mut f64,
) -> RramStatus {
    guard(|| {
        let h = unsafe { handle(chip) }?;
        let o = unsafe { out(out_ohms) }?;
        let a = address(sub_array, row, col)?;
        *o = h.chip.unit(a.sub_array()).array().cell(a.row(), a.col()).state.resistance_ohms;
        Ok(())
    })
}

/// Shifts one 25-bit SPI frame in. `out_readback` (nullable) receives the
/// register value held before the access.
///
/// # Safety
/// `chip` must be a live handle; `out_readback` null or valid.
#[no_mangle]
pub unsafe extern "C" fn rram_spi(chip: *mut RramChip, frame: u32, out_readback: *mut u16) -> RramStatus {
    guard(|| {
        let h = unsafe { handle(chip) }?;
        let t = SpiTransaction::decode(frame).or_status()?;
        let v = h.chip.spi(t).or_status()?;
        h.collect_lanes();
        if let Some(o) = unsafe { out_readback.as_mut() } {
            *o = v;
        }
        Ok(())
    })
}

/// Advances one sub-array by `ticks` controller cycles (5 ns each).
///
/// # Safety
/// `chip` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn rram_run_ticks(chip: *mut RramChip, sub_array: u32, ticks: u64) -> RramStatus {
    guard(|| {
        let h = unsafe { handle(chip) }?;
        let s = address(sub_array, 0, 0)?.sub_array();
        h.chip.unit_mut(s).run_ticks(ticks);
        h.collect_lanes();
        Ok(())
    })
}

/// Runs a sub-array until its operation completes.
///
/// # Safety
/// `chip` must be a live handle; `out_ticks` null or valid.
#[no_mangle]
pub unsafe extern "C" fn rram_run_until_idle(chip: *mut RramChip, sub_array: u32, out_ticks: *mut u64) -> RramStatus {
    guard(|| {
        let h = unsafe { handle(chip) }?;
        let s = address(sub_array, 0, 0)?.sub_array();
        let n = h.chip.unit_mut(s).run_until_idle();
        h.collect_lanes();
        if let Some(o) = unsafe { out_ticks.as_mut() } {
            *o = n;
        }
        Ok(())
    })
}

/// Number of lane symbols waiting for [`rram_lane_read`].
///
/// # Safety
/// `chip` must be a live handle and `out_len` valid.
#[no_mangle]
pub unsafe extern "C" fn rram_lane_pending(chip: *mut RramChip, sub_array: u32, out_len: *mut usize) -> RramStatus {
    guard(|| {
        let h = unsafe { handle(chip) }?;
        let o = unsafe { out(out_len) }?;
        *o = h.lanes[address(sub_array, 0, 0)?.sub_array()].len();
        Ok(())
    })
}

/// Moves all pending lane symbols into `buf`, one per byte. Fails with
/// `BufferTooSmall` (draining nothing) when `cap` is short; `out_len` then
/// holds the size needed.
///
/// # Safety
/// `chip` must be a live handle, `buf` valid for `cap` bytes, `out_len`
/// valid.
#[no_mangle]
pub unsafe extern "C" fn rram_lane_read(
    chip: *mut RramChip,
    sub_array: u32,
    buf: *mut u8,
    cap: usize,
    out_len: *mut usize,
) -> RramStatus {
    guard(|| {
        let h = unsafe { handle(chip) }?;
        let o = unsafe { out(out_len) }?;
        let lane = &mut h.lanes[address(sub_array, 0, 0)?.sub_array()];
        *o = lane.len();
        if lane.is_empty() {
            return Ok(());
        }
        if cap < lane.len() {
            return Err(fail(RramStatus::BufferTooSmall, format!("{} symbols pending", lane.len())));
        }
        if buf.is_null() {
            return Err(fail(RramStatus::NullPointer, "null buffer"));
        }
        // SAFETY: buf valid for cap >= lane.len() bytes
        unsafe { std::ptr::copy_nonoverlapping(lane.as_ptr(), buf, lane.len()) };
        lane.clear();
        Ok(())
    })
}

/// Two-pass compensated resistance read. `polarity` is 0 forward, 1
/// reverse.
///
/// # Safety
/// `chip` must be a live handle and `out_m` valid.
#[no_mangle]
pub unsafe extern "C" fn rram_read_resistance(
    chip: *mut RramChip,
    sub_array: u32,
    row: u32,
    col: u32,
    v_read: f64,
    polarity: u32,
    out_m: *mut RramMeasurement,
) -> RramStatus {
    guard(|| {
        let h = unsafe { handle(chip) }?;
        let o = unsafe { out(out_m) }?;
        let (a, p) = (address(sub_array, row, col)?, self::polarity(polarity)?);
        h.collect_lanes();
        let rec = Driver::new(&mut h.chip).read_resistance(a, v_read, p).or_status()?;
        *o = rec.into();
        Ok(())
    })
}

/// One write pulse solved for `v_dut_volts` across the device. The cell is
/// read first to estimate its resistance.
///
/// # Safety
/// `chip` must be a live handle; `out_dac_code` null or valid.
#[no_mangle]
pub unsafe extern "C" fn rram_write_pulse(
    chip: *mut RramChip,
    sub_array: u32,
    row: u32,
    col: u32,
    v_dut_volts: f64,
    polarity: u32,
    width_s: f64,
    out_dac_code: *mut u8,
) -> RramStatus {
    guard(|| {
        let h = unsafe { handle(chip) }?;
        let (a, p) = (address(sub_array, row, col)?, self::polarity(polarity)?);
        h.collect_lanes();
        let params = WriteParams { v_dut_volts, polarity: p, width_s, r_estimate: None };
        let rep = Driver::new(&mut h.chip).write_pulse(a, params).or_status()?;
        if let Some(o) = unsafe { out_dac_code.as_mut() } {
            *o = rep.dac_code;
        }
        Ok(())
    })
}

/// Autoranging conversion of a Thevenin source with the chip's bank and
/// ADC settings (null chip: defaults).
///
/// # Safety
/// `chip` must be null or a live handle; `out_r` valid.
#[no_mangle]
pub unsafe extern "C" fn rram_autorange_convert(
    chip: *const RramChip,
    v_open_volts: f64,
    r_source_ohms: f64,
    out_r: *mut RramReadout,
) -> RramStatus {
    guard(|| {
        let o = unsafe { out(out_r) }?;
        if !(r_source_ohms > 0.0) || !v_open_volts.is_finite() {
            return Err(fail(RramStatus::InvalidArgument, "source needs finite voltage and positive resistance"));
        }
        let default_cfg;
        // SAFETY: chip is null or a live handle
        let cfg = match unsafe { chip.as_ref() } {
            Some(h) => h.chip.config(),
            None => {
                default_cfg = ChipConfig::default();
                &default_cfg
            }
        };
        *o = autorange_convert(&TheveninSource::new(v_open_volts, r_source_ohms), &cfg.bank, &cfg.adc).into();
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn rram_gray_encode(n: u16) -> u16 {
    gray_encode(n)
}

#[no_mangle]
pub extern "C" fn rram_gray_decode(g: u16) -> u16 {
    gray_decode(g)
}

/// Packs a data packet into its 26-bit word.
///
/// # Safety
/// `p` and `out_word` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rram_packet_pack(p: *const RramDataPacket, out_word: *mut u32) -> RramStatus {
    guard(|| {
        // SAFETY: caller passes a valid pointer or null
        let p = unsafe { p.as_ref() }.ok_or_else(|| fail(RramStatus::NullPointer, "null packet"))?;
        let o = unsafe { out(out_word) }?;
        let packet =
            DataPacket { adc_code: p.adc_code, gain_sel: p.gain_sel, col_in_set: p.col_in_set, status: p.status };
        *o = packet.pack().or_status()?;
        Ok(())
    })
}

/// Unpacks a 26-bit word.
///
/// # Safety
/// `out_p` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rram_packet_unpack(word: u32, out_p: *mut RramDataPacket) -> RramStatus {
    guard(|| {
        let o = unsafe { out(out_p) }?;
        let p = DataPacket::unpack(word).or_status()?;
        *o = RramDataPacket { adc_code: p.adc_code, gain_sel: p.gain_sel, col_in_set: p.col_in_set, status: p.status };
        Ok(())
    })
}
