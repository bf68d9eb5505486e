//! Resistive device models and the 1T1R cell series path.
//!
//! Devices are ohmic at any instant. A bistable memristor flips between its
//! low and high resistance states when a write pulse exceeds the switching
//! voltage for at least the device's minimum switching width.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest pulse the controller can issue (one 5 ns tick).
pub const MIN_PULSE_WIDTH_S: f64 = 5e-9;
/// Largest terminal voltage the 5 V access transistor tolerates.
pub const MAX_TERMINAL_VOLTS: f64 = 5.0;

pub const R_DUT_MIN_OHMS: f64 = 1e3;
pub const R_DUT_MAX_OHMS: f64 = 1e7;

pub const STUCK_SHORT_OHMS: f64 = 100.0;
pub const STUCK_OPEN_OHMS: f64 = 1e12;

pub const DEFAULT_SWITCH_VOLTS: f64 = 1.5;
pub const DEFAULT_MIN_SWITCH_WIDTH_S: f64 = 10e-9;

fn default_switch_volts() -> f64 {
    DEFAULT_SWITCH_VOLTS
}

fn default_min_switch_width() -> f64 {
    DEFAULT_MIN_SWITCH_WIDTH_S
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    StuckOpen,
    StuckShort,
}

impl DefectKind {
    pub fn resistance_ohms(self) -> f64 {
        match self {
            DefectKind::StuckOpen => STUCK_OPEN_OHMS,
            DefectKind::StuckShort => STUCK_SHORT_OHMS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DeviceModelSpec {
    LinearResistor {
        resistance_ohms: f64,
    },
    BistableMemristor {
        r_low_ohms: f64,
        r_high_ohms: f64,
        #[serde(default = "default_switch_volts")]
        v_set_volts: f64,
        #[serde(default = "default_switch_volts")]
        v_reset_volts: f64,
        #[serde(default = "default_min_switch_width")]
        min_switch_width_s: f64,
    },
    Defective {
        defect: DefectKind,
    },
}

impl DeviceModelSpec {
    pub fn linear(resistance_ohms: f64) -> Self {
        DeviceModelSpec::LinearResistor { resistance_ohms }
    }

    /// Bistable device with the default 1.5 V thresholds and 10 ns switching width.
    pub fn bistable(r_low_ohms: f64, r_high_ohms: f64) -> Self {
        DeviceModelSpec::BistableMemristor {
            r_low_ohms,
            r_high_ohms,
            v_set_volts: DEFAULT_SWITCH_VOLTS,
            v_reset_volts: DEFAULT_SWITCH_VOLTS,
            min_switch_width_s: DEFAULT_MIN_SWITCH_WIDTH_S,
        }
    }

    pub fn defective(defect: DefectKind) -> Self {
        DeviceModelSpec::Defective { defect }
    }

    pub fn validate(&self) -> Result<()> {
        let in_band = |r: f64| r.is_finite() && (R_DUT_MIN_OHMS..=R_DUT_MAX_OHMS).contains(&r);
        match *self {
            DeviceModelSpec::LinearResistor { resistance_ohms } => {
                if !in_band(resistance_ohms) {
                    return Err(Error::Input(format!("resistance {resistance_ohms} outside [1e3, 1e7] ohm")));
                }
            }
            DeviceModelSpec::BistableMemristor {
                r_low_ohms,
                r_high_ohms,
                v_set_volts,
                v_reset_volts,
                min_switch_width_s,
            } => {
                if !in_band(r_low_ohms) || !in_band(r_high_ohms) {
                    return Err(Error::Input(format!(
                        "bistable resistances ({r_low_ohms}, {r_high_ohms}) outside [1e3, 1e7] ohm"
                    )));
                }
                if r_low_ohms >= r_high_ohms {
                    return Err(Error::Input("r_low must be below r_high".into()));
                }
                if !(v_set_volts > 0.0 && v_reset_volts > 0.0) {
                    return Err(Error::Input("switching thresholds must be positive".into()));
                }
                if !(min_switch_width_s > 0.0) {
                    return Err(Error::Input("min_switch_width must be positive".into()));
                }
            }
            DeviceModelSpec::Defective { .. } => {}
        }
        Ok(())
    }

    /// Power-on state. Bistable devices start in the high resistance state.
    pub fn initial_state(&self) -> DeviceState {
        let resistance_ohms = match *self {
            DeviceModelSpec::LinearResistor { resistance_ohms } => resistance_ohms,
            DeviceModelSpec::BistableMemristor { r_high_ohms, .. } => r_high_ohms,
            DeviceModelSpec::Defective { defect } => defect.resistance_ohms(),
        };
        DeviceState { resistance_ohms, switch_count: 0 }
    }

    pub fn is_defective(&self) -> bool {
        matches!(self, DeviceModelSpec::Defective { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceState {
    pub resistance_ohms: f64,
    pub switch_count: u64,
}

impl DeviceState {
    /// Ohmic current for `v_across` volts across the device.
    pub fn current(&self, v_across: f64) -> Result<f64> {
        check_voltage(v_across)?;
        Ok(v_across / self.resistance_ohms)
    }
}

fn check_voltage(v: f64) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::Input(format!("non-finite voltage {v}")));
    }
    if v.abs() > MAX_TERMINAL_VOLTS {
        return Err(Error::Input(format!("|{v}| V exceeds the 5 V terminal limit")));
    }
    Ok(())
}

/// Applies one write pulse and returns the resulting state.
///
/// `switch_count` counts actual resistance transitions, so repeating a pulse
/// that already switched the device leaves the state untouched.
pub fn apply_write_pulse(
    state: &DeviceState,
    spec: &DeviceModelSpec,
    v_across: f64,
    width_s: f64,
) -> Result<DeviceState> {
    check_voltage(v_across)?;
    if !width_s.is_finite() || width_s < MIN_PULSE_WIDTH_S {
        return Err(Error::PulseWidth { width_s });
    }
    let DeviceModelSpec::BistableMemristor { r_low_ohms, r_high_ohms, v_set_volts, v_reset_volts, min_switch_width_s } =
        *spec
    else {
        return Ok(*state);
    };
    if width_s < min_switch_width_s {
        return Ok(*state);
    }
    let target = if v_across >= v_set_volts {
        r_low_ohms
    } else if v_across <= -v_reset_volts {
        r_high_ohms
    } else {
        return Ok(*state);
    };
    if target == state.resistance_ohms {
        return Ok(*state);
    }
    Ok(DeviceState { resistance_ohms: target, switch_count: state.switch_count + 1 })
}

/// Series-resistance abstraction of the access transistor and column switch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CellElectrical {
    pub r_access_on_ohms: f64,
    pub r_off_ohms: f64,
}

impl Default for CellElectrical {
    fn default() -> Self {
        CellElectrical { r_access_on_ohms: 50.0, r_off_ohms: 1e10 }
    }
}

impl CellElectrical {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_access_on_ohms > 0.0 && self.r_access_on_ohms < R_DUT_MIN_OHMS) {
            return Err(Error::Config(format!(
                "r_access_on {} must be positive and below 1 kohm",
                self.r_access_on_ohms
            )));
        }
        if !(self.r_off_ohms >= 1e10) {
            return Err(Error::Config(format!("r_off {} must be at least 1e10 ohm", self.r_off_ohms)));
        }
        Ok(())
    }
}

pub fn cell_path_resistance(state: &DeviceState, cell: &CellElectrical, selected: bool) -> f64 {
    if selected {
        state.resistance_ohms + cell.r_access_on_ohms
    } else {
        cell.r_off_ohms
    }
}
