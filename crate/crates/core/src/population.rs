//! Array population files.
//!
//! A population is a TOML document with a seed, optional randomized
//! regions and optional explicit cells. Regions are applied in file order,
//! then explicit cells. Each region draws from its own ChaCha8 streams,
//! one per sub-array, in row then column order. Editing one region never
//! reshuffles another, and narrowing a region to one sub-array keeps that
//! sub-array's cells unchanged.
//!
//! ```toml
//! seed = 42
//!
//! [[region]]
//! sub_array = 0          # omit for all four
//! rows = [0, 511]        # inclusive, omit for all
//! cols = [0, 511]
//! stuck_open_fraction = 0.01
//! fill = { kind = "log_uniform", r_min_ohms = 1e3, r_max_ohms = 1e7 }
//!
//! [[cell]]
//! sub_array = 0
//! row = 3
//! col = 4
//! state = "lrs"
//! model = { kind = "bistable_memristor", r_low_ohms = 1e3, r_high_ohms = 1e5 }
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::array::{Cell, CellAddress, COLS, ROWS, SUB_ARRAYS};
use crate::controller::Chip;
use crate::device::{
    DefectKind, DeviceModelSpec, DeviceState, DEFAULT_MIN_SWITCH_WIDTH_S, DEFAULT_SWITCH_VOLTS, R_DUT_MAX_OHMS,
    R_DUT_MIN_OHMS,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    #[default]
    Hrs,
    Lrs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegionFill {
    /// Linear resistors with log-uniform resistance.
    LogUniform { r_min_ohms: f64, r_max_ohms: f64 },
    /// The same model in every cell.
    Model { model: DeviceModelSpec },
    /// Bistable devices with lognormal spread on both resistance levels.
    Bistable {
        r_low_ohms: f64,
        r_high_ohms: f64,
        #[serde(default)]
        sigma_ln: f64,
        #[serde(default)]
        initial: InitialState,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sub_array: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<[u16; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cols: Option<[u16; 2]>,
    #[serde(default)]
    pub stuck_open_fraction: f64,
    #[serde(default)]
    pub stuck_short_fraction: f64,
    pub fill: RegionFill,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellEntry {
    pub sub_array: u8,
    pub row: u16,
    pub col: u16,
    pub model: DeviceModelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<InitialState>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Population {
    pub seed: u64,
    #[serde(default, rename = "region", skip_serializing_if = "Vec::is_empty")]
    pub regions: Vec<Region>,
    #[serde(default, rename = "cell", skip_serializing_if = "Vec::is_empty")]
    pub cells: Vec<CellEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct PopulationSummary {
    pub cells_written: u64,
    pub linear: u64,
    pub bistable: u64,
    pub stuck_open: u64,
    pub stuck_short: u64,
}

impl PopulationSummary {
    fn count(&mut self, model: &DeviceModelSpec) {
        self.cells_written += 1;
        match model {
            DeviceModelSpec::LinearResistor { .. } => self.linear += 1,
            DeviceModelSpec::BistableMemristor { .. } => self.bistable += 1,
            DeviceModelSpec::Defective { defect: DefectKind::StuckOpen } => self.stuck_open += 1,
            DeviceModelSpec::Defective { defect: DefectKind::StuckShort } => self.stuck_short += 1,
        }
    }
}

fn span(range: Option<[u16; 2]>, limit: usize, what: &str) -> Result<std::ops::RangeInclusive<usize>> {
    let [lo, hi] = range.unwrap_or([0, (limit - 1) as u16]);
    let (lo, hi) = (usize::from(lo), usize::from(hi));
    if lo > hi || hi >= limit {
        return Err(Error::Input(format!("{what} span [{lo}, {hi}] invalid")));
    }
    Ok(lo..=hi)
}

fn state_for(model: &DeviceModelSpec, initial: InitialState) -> DeviceState {
    match (*model, initial) {
        (DeviceModelSpec::BistableMemristor { r_low_ohms, .. }, InitialState::Lrs) => {
            DeviceState { resistance_ohms: r_low_ohms, switch_count: 0 }
        }
        _ => model.initial_state(),
    }
}

impl Population {
    /// One region of log-uniform linear resistors with optional stuck-open
    /// defects.
    pub fn log_uniform(
        seed: u64,
        sub_array: Option<u8>,
        r_min_ohms: f64,
        r_max_ohms: f64,
        stuck_open_fraction: f64,
    ) -> Self {
        Population {
            seed,
            regions: vec![Region {
                sub_array,
                rows: None,
                cols: None,
                stuck_open_fraction,
                stuck_short_fraction: 0.0,
                fill: RegionFill::LogUniform { r_min_ohms, r_max_ohms },
            }],
            cells: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let pop: Population = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        pop.validate()?;
        Ok(pop)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("population is always serializable")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.regions.iter().enumerate() {
            let ctx = |m: String| Error::Input(format!("region {i}: {m}"));
            if let Some(s) = r.sub_array {
                if usize::from(s) >= SUB_ARRAYS {
                    return Err(Error::Selection(format!("region {i}: sub_array {s} out of range")));
                }
            }
            span(r.rows, ROWS, "row")?;
            span(r.cols, COLS, "col")?;
            let fractions_ok = (0.0..=1.0).contains(&r.stuck_open_fraction)
                && (0.0..=1.0).contains(&r.stuck_short_fraction)
                && r.stuck_open_fraction + r.stuck_short_fraction <= 1.0;
            if !fractions_ok {
                return Err(ctx("defect fractions must lie in [0, 1] and sum to at most 1".into()));
            }
            match r.fill {
                RegionFill::LogUniform { r_min_ohms, r_max_ohms } => {
                    DeviceModelSpec::linear(r_min_ohms).validate()?;
                    DeviceModelSpec::linear(r_max_ohms).validate()?;
                    if r_min_ohms > r_max_ohms {
                        return Err(ctx("r_min above r_max".into()));
                    }
                }
                RegionFill::Model { model } => model.validate()?,
                RegionFill::Bistable { r_low_ohms, r_high_ohms, sigma_ln, .. } => {
                    DeviceModelSpec::bistable(r_low_ohms, r_high_ohms).validate()?;
                    if !(sigma_ln >= 0.0 && sigma_ln.is_finite()) {
                        return Err(ctx("sigma_ln must be non-negative".into()));
                    }
                }
            }
        }
        for c in &self.cells {
            CellAddress::new(c.sub_array.into(), c.row.into(), c.col.into())?;
            c.model.validate()?;
        }
        Ok(())
    }

    /// Writes the population into the chip's arrays.
    pub fn apply(&self, chip: &mut Chip) -> Result<PopulationSummary> {
        self.validate()?;
        let mut summary = PopulationSummary::default();
        for (idx, region) in self.regions.iter().enumerate() {
            let subs: Vec<usize> = match region.sub_array {
                Some(s) => vec![usize::from(s)],
                None => (0..SUB_ARRAYS).collect(),
            };
            let rows = span(region.rows, ROWS, "row")?;
            let cols = span(region.cols, COLS, "col")?;
            for s in subs {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(((idx * SUB_ARRAYS) + s) as u64);
                let arr = chip.unit_mut(s).array_mut();
                for r in rows.clone() {
                    for c in cols.clone() {
                        let cell = draw_cell(region, &mut rng);
                        summary.count(&cell.model);
                        arr.set_cell(r, c, cell);
                    }
                }
            }
        }
        for entry in &self.cells {
            let cell = Cell { model: entry.model, state: state_for(&entry.model, entry.state.unwrap_or_default()) };
            summary.count(&cell.model);
            chip.unit_mut(entry.sub_array.into()).array_mut().set_cell(entry.row.into(), entry.col.into(), cell);
        }
        Ok(summary)
    }
}

fn draw_cell(region: &Region, rng: &mut ChaCha8Rng) -> Cell {
    // fixed draw count per cell keeps the stream aligned across fills
    let defect_u: f64 = rng.random();
    let a: f64 = rng.random();
    let z1: f64 = StandardNormal.sample(rng);
    let z2: f64 = StandardNormal.sample(rng);
    let model = if defect_u < region.stuck_open_fraction {
        DeviceModelSpec::defective(DefectKind::StuckOpen)
    } else if defect_u < region.stuck_open_fraction + region.stuck_short_fraction {
        DeviceModelSpec::defective(DefectKind::StuckShort)
    } else {
        match region.fill {
            RegionFill::LogUniform { r_min_ohms, r_max_ohms } => {
                let (lo, hi) = (r_min_ohms.ln(), r_max_ohms.ln());
                DeviceModelSpec::linear((lo + a * (hi - lo)).exp().clamp(r_min_ohms, r_max_ohms))
            }
            RegionFill::Model { model } => model,
            RegionFill::Bistable { r_low_ohms, r_high_ohms, sigma_ln, .. } => {
                let band = |r: f64| r.clamp(R_DUT_MIN_OHMS, R_DUT_MAX_OHMS);
                let mut lo = band(r_low_ohms * (sigma_ln * z1).exp());
                let mut hi = band(r_high_ohms * (sigma_ln * z2).exp());
                if lo >= hi {
                    lo = r_low_ohms;
                    hi = r_high_ohms;
                }
                DeviceModelSpec::BistableMemristor {
                    r_low_ohms: lo,
                    r_high_ohms: hi,
                    v_set_volts: DEFAULT_SWITCH_VOLTS,
                    v_reset_volts: DEFAULT_SWITCH_VOLTS,
                    min_switch_width_s: DEFAULT_MIN_SWITCH_WIDTH_S,
                }
            }
        }
    };
    let initial = match region.fill {
        RegionFill::Bistable { initial, .. } => initial,
        _ => InitialState::Hrs,
    };
    Cell { state: state_for(&model, initial), model }
}
