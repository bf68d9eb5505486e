//! Chip constants, loadable from a TOML file. Every key is optional; missing
//! keys keep their defaults. See `docs/config.md` for the full key list.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::device::{CellElectrical, DeviceModelSpec};
use crate::error::{Error, Result};
use crate::frontend::{adc_code_to_voltage, AdcConfig, DacConfig, ResistorBank, StageTiming, ADC_MAX_CODE};

/// Controller clock period; also the write-pulse quantum.
pub const TICK_S: f64 = 5e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerTiming {
    /// Row decode, column mux and DAC settling before a write pulse.
    pub write_setup_ticks: u32,
    /// Same for reads, before the first bank stage.
    pub read_setup_ticks: u32,
}

impl Default for ControllerTiming {
    fn default() -> Self {
        ControllerTiming { write_setup_ticks: 4, read_setup_ticks: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Input-referred RMS noise on the bank voltage. Zero disables noise.
    pub sigma_volts: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChipConfig {
    pub cell: CellElectrical,
    pub dac: DacConfig,
    pub adc: AdcConfig,
    pub bank: ResistorBank,
    pub stage_timing: StageTiming,
    pub timing: ControllerTiming,
    pub noise: NoiseConfig,
    /// Model for cells a population leaves unspecified.
    pub unpopulated: DeviceModelSpec,
}

impl Default for ChipConfig {
    fn default() -> Self {
        ChipConfig {
            cell: CellElectrical::default(),
            dac: DacConfig::default(),
            adc: AdcConfig::default(),
            bank: ResistorBank::default(),
            stage_timing: StageTiming::default(),
            timing: ControllerTiming::default(),
            noise: NoiseConfig::default(),
            unpopulated: DeviceModelSpec::linear(1e5),
        }
    }
}

impl ChipConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ChipConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.cell.validate()?;
        self.dac.validate()?;
        self.adc.validate()?;
        self.bank.validate()?;
        self.unpopulated.validate()?;
        if !(self.noise.sigma_volts >= 0.0) {
            return Err(Error::Config("noise sigma must be non-negative".into()));
        }
        if self.adc_conversion_ticks() == 0 {
            return Err(Error::Config("ADC sample rate too high for the 5 ns tick".into()));
        }
        Ok(())
    }

    /// One ADC conversion in controller ticks (800 at 250 kSPS).
    pub fn adc_conversion_ticks(&self) -> u64 {
        (1.0 / (self.adc.sample_rate_hz * TICK_S)).round() as u64
    }

    /// Largest threshold code whose ADC-scale voltage does not exceed the
    /// configured bank threshold.
    pub fn threshold_reset_code(&self) -> u16 {
        let v = self.bank.v_threshold_volts;
        let mut code =
            ((v - self.adc.v_lo_volts) / self.adc.lsb_volts()).round().clamp(0.0, f64::from(ADC_MAX_CODE)) as u16;
        while code > 0 && adc_code_to_voltage(code, &self.adc) > v + 1e-12 {
            code -= 1;
        }
        code
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::DEFAULT_THRESHOLD_CODE;

    #[test]
    fn defaults() {
        let cfg = ChipConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.adc_conversion_ticks(), 800);
        assert_eq!(cfg.threshold_reset_code(), DEFAULT_THRESHOLD_CODE);
    }

    #[test]
    fn partial_toml_keeps_defaults() {
        let cfg = ChipConfig::from_toml("[bank]\namp_gain = 16.0\n[cell]\nr_access_on_ohms = 80.0\n").unwrap();
        assert_eq!(cfg.bank.amp_gain, 16.0);
        assert_eq!(cfg.bank.r_ohms, ResistorBank::default().r_ohms);
        assert_eq!(cfg.cell.r_access_on_ohms, 80.0);
        assert_eq!(cfg.adc, AdcConfig::default());
    }

    #[test]
    fn toml_roundtrip() {
        let cfg = ChipConfig::default();
        assert_eq!(ChipConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ChipConfig::from_toml("[dac]\nv_min_volts = 4.0\n").is_err());
        assert!(ChipConfig::from_toml("[bank]\nr_ohms = [1.0, 1.0, 2.0, 3.0, 4.0]\n").is_err());
        assert!(ChipConfig::from_toml("bogus = 1\n").is_err());
    }
}
