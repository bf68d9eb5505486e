//! Sub-array topology: gray-coded row decoder, 1-of-16 column mux per set and
//! the H-bridge that sets drive polarity.

use serde::{Deserialize, Serialize};

use crate::config::ChipConfig;
use crate::device::{cell_path_resistance, CellElectrical, DeviceModelSpec, DeviceState};
use crate::error::{Error, Result};
use crate::frontend::{autorange_convert, ReadoutResult, TheveninSource};

pub const SUB_ARRAYS: usize = 4;
pub const ROWS: usize = 512;
pub const COLS: usize = 512;
pub const COLS_PER_SET: usize = 16;
pub const SETS: usize = COLS / COLS_PER_SET;
pub const CELLS_PER_SUB_ARRAY: usize = ROWS * COLS;

const ADDR_MASK: u16 = 0x1ff;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellAddress {
    pub sub_array: u8,
    pub row: u16,
    pub col: u16,
}

impl CellAddress {
    pub fn new(sub_array: usize, row: usize, col: usize) -> Result<Self> {
        if sub_array >= SUB_ARRAYS || row >= ROWS || col >= COLS {
            return Err(Error::Selection(format!("address ({sub_array}, {row}, {col}) out of bounds")));
        }
        Ok(CellAddress { sub_array: sub_array as u8, row: row as u16, col: col as u16 })
    }

    pub fn sub_array(&self) -> usize {
        usize::from(self.sub_array)
    }

    pub fn row(&self) -> usize {
        usize::from(self.row)
    }

    pub fn col(&self) -> usize {
        usize::from(self.col)
    }

    pub fn set_index(&self) -> usize {
        self.col() / COLS_PER_SET
    }

    pub fn col_in_set(&self) -> usize {
        self.col() % COLS_PER_SET
    }
}

impl std::fmt::Display for CellAddress {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}:{}", self.sub_array, self.row, self.col)
    }
}

impl std::str::FromStr for CellAddress {
    type Err = Error;

    /// Parses `sub_array:row:col`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::Input(format!("bad cell address `{s}`, expected sub_array:row:col"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let n = |p: &str| p.trim().parse::<usize>().map_err(|_| bad());
        CellAddress::new(n(parts[0])?, n(parts[1])?, n(parts[2])?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    /// P driven, N grounded.
    #[default]
    Forward,
    /// N driven, P grounded.
    Reverse,
}

impl Polarity {
    pub fn sign(self) -> f64 {
        match self {
            Polarity::Forward => 1.0,
            Polarity::Reverse => -1.0,
        }
    }

    pub fn from_bit(bit: bool) -> Self {
        if bit {
            Polarity::Reverse
        } else {
            Polarity::Forward
        }
    }

    pub fn bit(self) -> bool {
        self == Polarity::Reverse
    }
}

impl std::fmt::Display for Polarity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Polarity::Forward => "forward",
            Polarity::Reverse => "reverse",
        })
    }
}

pub fn gray_encode(n: u16) -> u16 {
    let n = n & ADDR_MASK;
    n ^ (n >> 1)
}

pub fn gray_decode(g: u16) -> u16 {
    let mut n = g & ADDR_MASK;
    let mut shift = n >> 1;
    while shift != 0 {
        n ^= shift;
        shift >>= 1;
    }
    n
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub model: DeviceModelSpec,
    pub state: DeviceState,
}

impl Cell {
    pub fn new(model: DeviceModelSpec) -> Self {
        Cell { state: model.initial_state(), model }
    }
}

/// Source seen by the set converter plus the orientation of the device.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriveResult {
    pub source: TheveninSource,
    pub polarity: Polarity,
    pub selected: bool,
}

#[derive(Debug, Clone)]
pub struct SubArrayState {
    /// Row-major, allocated on first write. Until then every cell is `fill`.
    cells: Vec<Cell>,
    fill: Cell,
    enabled_row: Option<u16>,
    selected_col_per_set: [u8; SETS],
}

impl SubArrayState {
    pub fn new(fill: DeviceModelSpec) -> Self {
        SubArrayState { cells: Vec::new(), fill: Cell::new(fill), enabled_row: None, selected_col_per_set: [0; SETS] }
    }

    pub fn cell(&self, row: usize, col: usize) -> &Cell {
        if self.cells.is_empty() {
            &self.fill
        } else {
            &self.cells[row * COLS + col]
        }
    }

    pub fn cell_mut(&mut self, row: usize, col: usize) -> &mut Cell {
        if self.cells.is_empty() {
            self.cells = vec![self.fill; CELLS_PER_SUB_ARRAY];
        }
        &mut self.cells[row * COLS + col]
    }

    pub fn set_cell(&mut self, row: usize, col: usize, cell: Cell) {
        *self.cell_mut(row, col) = cell;
    }

    pub fn enabled_row(&self) -> Option<usize> {
        self.enabled_row.map(usize::from)
    }

    pub fn selected_col(&self, set: usize) -> usize {
        usize::from(self.selected_col_per_set[set])
    }

    /// Drives the row decoder. Only one row can be on: asserting `select`
    /// replaces any previous row, deasserting turns every row off.
    pub fn select_row(&mut self, gray_addr: u16, select: bool) {
        self.enabled_row = select.then(|| gray_decode(gray_addr));
    }

    pub fn select_column(&mut self, set: usize, col_in_set: usize) {
        debug_assert!(set < SETS && col_in_set < COLS_PER_SET);
        self.selected_col_per_set[set] = col_in_set as u8;
    }

    /// Equivalent source at the converter input for `(row, col)`.
    ///
    /// The H-bridge commutes polarity ahead of the converter, so the source
    /// voltage is always the non-negative drive magnitude. A cell whose
    /// column is not the one muxed in its set sees only the off path.
    pub fn drive_cell(
        &self,
        row: usize,
        col: usize,
        v_drive: f64,
        polarity: Polarity,
        electrical: &CellElectrical,
    ) -> Result<DriveResult> {
        if row >= ROWS || col >= COLS {
            return Err(Error::Selection(format!("cell ({row}, {col}) out of bounds")));
        }
        if self.enabled_row() != Some(row) {
            return Err(Error::Selection(format!("row {row} is not enabled")));
        }
        let selected = self.selected_col(col / COLS_PER_SET) == col % COLS_PER_SET;
        let r_path = cell_path_resistance(&self.cell(row, col).state, electrical, selected);
        Ok(DriveResult { source: TheveninSource::new(v_drive.abs(), r_path), polarity, selected })
    }

    pub fn populated(&self) -> bool {
        !self.cells.is_empty()
    }

    pub fn iter_cells(&self) -> impl Iterator<Item = (usize, usize, &Cell)> + '_ {
        (0..ROWS).flat_map(move |r| (0..COLS).map(move |c| (r, c, self.cell(r, c))))
    }
}

/// Voltage across the device once the converter has settled on a bank
/// resistor, signed by polarity.
pub fn dut_voltage(drive: &DriveResult, device: &DeviceState, r_bank_ohms: f64) -> f64 {
    if !drive.selected {
        return 0.0;
    }
    let i = drive.source.current_into(r_bank_ohms);
    drive.polarity.sign() * i * device.resistance_ohms
}

/// Reads one cell per addressed set across the sub-arrays. All addresses in
/// one sub-array must share a row; at most one address per set.
pub fn parallel_read(
    arrays: &mut [SubArrayState; SUB_ARRAYS],
    addrs: &[CellAddress],
    v_read: f64,
    polarity: Polarity,
    cfg: &ChipConfig,
) -> Result<Vec<ReadoutResult>> {
    check_batch(addrs)?;
    let mut out = Vec::with_capacity(addrs.len());
    for addr in addrs {
        let arr = &mut arrays[addr.sub_array()];
        arr.select_row(gray_encode(addr.row), true);
        arr.select_column(addr.set_index(), addr.col_in_set());
        let drive = arr.drive_cell(addr.row(), addr.col(), v_read, polarity, &cfg.cell)?;
        out.push(autorange_convert(&drive.source, &cfg.bank, &cfg.adc));
    }
    for arr in arrays.iter_mut() {
        arr.select_row(0, false);
    }
    Ok(out)
}

/// Validates that a batch addresses each (sub-array, set) at most once and
/// uses a single row per sub-array.
pub fn check_batch(addrs: &[CellAddress]) -> Result<()> {
    let mut seen = [[false; SETS]; SUB_ARRAYS];
    let mut rows: [Option<u16>; SUB_ARRAYS] = [None; SUB_ARRAYS];
    for a in addrs {
        let s = a.sub_array();
        if std::mem::replace(&mut seen[s][a.set_index()], true) {
            return Err(Error::SetConflict { sub_array: s, set: a.set_index() });
        }
        match rows[s] {
            Some(r) if r != a.row => {
                return Err(Error::Selection(format!("sub-array {s} batch mixes rows {r} and {}", a.row)))
            }
            _ => rows[s] = Some(a.row),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::DefectKind;

    #[test]
    fn gray_examples() {
        assert_eq!(gray_encode(0), 0);
        assert_eq!(gray_encode(1), 1);
        assert_eq!(gray_encode(2), 3);
        assert_eq!(gray_encode(3), 2);
        assert_eq!(gray_encode(511), 256);
        assert_eq!(gray_decode(0), 0);
        assert_eq!(gray_decode(3), 2);
        assert_eq!(gray_decode(256), 511);
    }

    #[test]
    fn gray_matches_table() {
        let table = [0b000, 0b001, 0b011, 0b010, 0b110, 0b111, 0b101, 0b100];
        for (n, g) in table.iter().enumerate() {
            assert_eq!(gray_encode(n as u16), *g);
        }
    }

    #[test]
    fn row_select() {
        let mut arr = SubArrayState::new(DeviceModelSpec::linear(1e3));
        arr.select_row(0b11, true);
        assert_eq!(arr.enabled_row(), Some(2));
        arr.select_row(gray_encode(7), true);
        assert_eq!(arr.enabled_row(), Some(7));
        arr.select_row(0b11, false);
        assert_eq!(arr.enabled_row(), None);
    }

    #[test]
    fn address_parts() {
        let a = CellAddress::new(2, 10, 37).unwrap();
        assert_eq!(a.set_index(), 2);
        assert_eq!(a.col_in_set(), 5);
        assert_eq!(a.to_string().parse::<CellAddress>().unwrap(), a);
        assert!(CellAddress::new(4, 0, 0).is_err());
        assert!(CellAddress::new(0, 512, 0).is_err());
        assert!("1:2".parse::<CellAddress>().is_err());
    }

    #[test]
    fn drive_examples() {
        let cfg = ChipConfig::default();
        let mut arr = SubArrayState::new(DeviceModelSpec::linear(1e3));
        arr.select_row(gray_encode(4), true);
        arr.select_column(0, 3);
        // DUT voltage 1.5 V at stage 0 (25 ohm) needs 1.5 * 1075 / 1000 at the set node
        let v_drive = 1.5 * 1075.0 / 1000.0;
        let fwd = arr.drive_cell(4, 3, v_drive, Polarity::Forward, &cfg.cell).unwrap();
        let i = fwd.source.current_into(25.0);
        assert!((i - 1.5e-3).abs() < 1e-12);
        let v = dut_voltage(&fwd, &arr.cell(4, 3).state, 25.0);
        assert!((v - 1.5).abs() < 1e-12);

        let rev = arr.drive_cell(4, 3, v_drive, Polarity::Reverse, &cfg.cell).unwrap();
        assert_eq!(rev.source, fwd.source);
        assert!((dut_voltage(&rev, &arr.cell(4, 3).state, 25.0) + 1.5).abs() < 1e-12);

        let off = arr.drive_cell(4, 4, v_drive, Polarity::Forward, &cfg.cell).unwrap();
        assert!(!off.selected);
        assert_eq!(off.source.r_source_ohms, 1e10);
        assert!(off.source.current_into(25.0) < 1e-9);

        assert!(matches!(arr.drive_cell(5, 3, v_drive, Polarity::Forward, &cfg.cell), Err(Error::Selection(_))));
    }

    #[test]
    fn lazy_cells() {
        let mut arr = SubArrayState::new(DeviceModelSpec::linear(2e3));
        assert!(!arr.populated());
        assert_eq!(arr.cell(100, 100).state.resistance_ohms, 2e3);
        arr.set_cell(1, 1, Cell::new(DeviceModelSpec::defective(DefectKind::StuckOpen)));
        assert!(arr.populated());
        assert_eq!(arr.cell(1, 1).state.resistance_ohms, 1e12);
        assert_eq!(arr.cell(1, 2).state.resistance_ohms, 2e3);
    }

    #[test]
    fn parallel_read_examples() {
        let cfg = ChipConfig::default();
        let mut arrays: [SubArrayState; SUB_ARRAYS] =
            std::array::from_fn(|_| SubArrayState::new(DeviceModelSpec::linear(1e4)));
        let addrs: Vec<CellAddress> =
            (0..SETS).map(|s| CellAddress::new(0, 9, s * COLS_PER_SET + s % 16).unwrap()).collect();
        let out = parallel_read(&mut arrays, &addrs, 0.5, Polarity::Forward, &cfg).unwrap();
        assert_eq!(out.len(), 32);
        assert!(out.iter().all(|r| *r == out[0]));
        assert!(arrays.iter().all(|a| a.enabled_row().is_none()));

        assert!(parallel_read(&mut arrays, &[], 0.5, Polarity::Forward, &cfg).unwrap().is_empty());

        let clash = [CellAddress::new(1, 0, 0).unwrap(), CellAddress::new(1, 0, 15).unwrap()];
        assert!(matches!(
            parallel_read(&mut arrays, &clash, 0.5, Polarity::Forward, &cfg),
            Err(Error::SetConflict { sub_array: 1, set: 0 })
        ));
        let rows = [CellAddress::new(1, 0, 0).unwrap(), CellAddress::new(1, 1, 16).unwrap()];
        assert!(matches!(parallel_read(&mut arrays, &rows, 0.5, Polarity::Forward, &cfg), Err(Error::Selection(_))));
    }
}
