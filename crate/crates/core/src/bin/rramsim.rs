use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rramsim::array::{CellAddress, Polarity, SUB_ARRAYS};
use rramsim::config::ChipConfig;
use rramsim::controller::Chip;
use rramsim::host::campaign::{
    self, summary_path, AddressSpan, CampaignKind, CampaignSpec, MassOptions, PolarityMode, ReadStrategy,
};
use rramsim::host::transcript::{decode_packets, replay, Transcript};
use rramsim::host::{save_records_csv, write_records_csv, Driver, MeasurementRecord, WriteParams};
use rramsim::population::Population;
use rramsim::serializer::{read_trace, TraceRecord};
use rramsim::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "rramsim",
    version,
    about = "Simulator and host driver for a 1T1R resistive memory characterization chip"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug)]
struct Common {
    /// Chip constants (TOML). Defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Population seed, used when no population file is given.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Restrict to one sub-array.
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(0..4))]
    sub_array: Option<u8>,
    /// Population file (TOML) to load into the chip.
    #[arg(long, global = true)]
    population: Option<PathBuf>,
    /// Record the SPI transcript of the run to this file.
    #[arg(long, global = true)]
    transcript: Option<PathBuf>,
    /// Write the raw serializer output as a bitstream trace.
    #[arg(long, global = true)]
    trace: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Build a log-uniform population and save it.
    Populate {
        #[arg(long, default_value_t = 1e3)]
        r_min: f64,
        #[arg(long, default_value_t = 1e7)]
        r_max: f64,
        #[arg(long, default_value_t = 0.0)]
        stuck_open: f64,
    },
    /// Apply one write pulse, then read the cell back.
    Write {
        /// Cell as sub_array:row:col.
        #[arg(long)]
        addr: String,
        /// Target voltage across the device.
        #[arg(long)]
        volts: f64,
        #[arg(long, default_value_t = 10.0)]
        width_ns: f64,
        #[arg(long, value_enum, default_value_t = Pol::Forward)]
        polarity: Pol,
    },
    /// Two-pass resistance read of one cell.
    Read {
        /// Cell as sub_array:row:col.
        #[arg(long)]
        addr: String,
        #[arg(long, default_value_t = 0.5)]
        v_read: f64,
        #[arg(long, value_enum, default_value_t = Pol::Forward)]
        polarity: Pol,
    },
    /// IV sweep of one cell.
    Sweep {
        /// Cell as sub_array:row:col.
        #[arg(long)]
        addr: String,
        #[arg(long)]
        start: f64,
        #[arg(long)]
        stop: f64,
        #[arg(long)]
        step: f64,
        #[arg(long, value_enum, default_value_t = PolarityMode::Forward)]
        polarity: PolarityMode,
    },
    /// Run a campaign file. Without one, characterizes whole sub-arrays.
    Campaign {
        /// Campaign spec (TOML).
        spec: Option<PathBuf>,
        /// Worker threads, one per sub-array at most.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Read cells one by one instead of 32 per pass.
        #[arg(long)]
        sequential: bool,
    },
    /// Replay an SPI transcript against a fresh chip.
    Replay { transcript: PathBuf },
    /// Decode a bitstream trace into packets.
    Decode { trace: PathBuf },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum Pol {
    Forward,
    Reverse,
}

impl From<Pol> for Polarity {
    fn from(p: Pol) -> Self {
        match p {
            Pol::Forward => Polarity::Forward,
            Pol::Reverse => Polarity::Reverse,
        }
    }
}

fn load_config(c: &Common) -> Result<ChipConfig> {
    match &c.config {
        Some(p) => ChipConfig::load(p),
        None => Ok(ChipConfig::default()),
    }
}

fn population(c: &Common) -> Result<Population> {
    if let Some(p) = &c.population {
        return Population::load(p);
    }
    Ok(Population::log_uniform(c.seed.unwrap_or(1), c.sub_array, 1e3, 1e7, 0.0))
}

/// A chip with its population applied. Without a population file or
/// `--sub-array`, only the sub-array holding `addr` is populated.
fn build_chip(c: &Common, addr: CellAddress) -> Result<Chip> {
    let mut chip = Chip::new(load_config(c)?)?;
    let mut pop = population(c)?;
    if c.population.is_none() && c.sub_array.is_none() {
        pop.regions[0].sub_array = Some(addr.sub_array() as u8);
    }
    pop.apply(&mut chip)?;
    Ok(chip)
}

fn write_csv_out(c: &Common, records: &[MeasurementRecord]) -> Result<()> {
    match &c.out {
        Some(p) => save_records_csv(p, records, true),
        None => write_records_csv(std::io::stdout().lock(), records, true),
    }
}

fn finish_driver(c: &Common, d: &mut Driver<&mut Chip>) -> Result<()> {
    if let (Some(path), Some(t)) = (&c.transcript, d.take_transcript()) {
        t.save(path)?;
    }
    if let (Some(path), Some(lanes)) = (&c.trace, d.take_trace()) {
        save_trace(path, &lanes)?;
    }
    eprintln!("bitstream sha256 {}", d.hasher().finish());
    Ok(())
}

fn save_trace(path: &Path, lanes: &[rramsim::controller::LaneTransfer]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for l in lanes {
        TraceRecord { sub_array: l.sub_array, mode: l.mode, cycle0: l.cycle0, symbols: l.symbols.clone() }
            .write_to(&mut w)
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn driver<'a>(c: &Common, chip: &'a mut Chip) -> Driver<&'a mut Chip> {
    let mut d = Driver::new(chip);
    if c.transcript.is_some() {
        d.record_transcript();
    }
    if c.trace.is_some() {
        d.keep_trace();
    }
    d
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    match cli.cmd {
        Cmd::Populate { r_min, r_max, stuck_open } => {
            let out = c.out.clone().ok_or_else(|| Error::Input("populate needs --out".into()))?;
            let pop = Population::log_uniform(c.seed.unwrap_or(1), c.sub_array, r_min, r_max, stuck_open);
            pop.validate()?;
            let mut chip = Chip::new(load_config(c)?)?;
            let summary = pop.apply(&mut chip)?;
            pop.save(&out)?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("serializable"));
        }
        Cmd::Write { addr, volts, width_ns, polarity } => {
            let addr: CellAddress = addr.parse()?;
            let mut chip = build_chip(c, addr)?;
            let mut d = driver(c, &mut chip);
            let params = WriteParams {
                v_dut_volts: volts,
                polarity: polarity.into(),
                width_s: width_ns * 1e-9,
                r_estimate: None,
            };
            let report = d.write_pulse(addr, params)?;
            let after = d.read_resistance(addr, rramsim::host::DEFAULT_V_READ, Polarity::Forward)?;
            let json = serde_json::json!({ "write": report, "read_back": after });
            println!("{}", serde_json::to_string_pretty(&json).expect("serializable"));
            finish_driver(c, &mut d)?;
        }
        Cmd::Read { addr, v_read, polarity } => {
            let addr: CellAddress = addr.parse()?;
            let mut chip = build_chip(c, addr)?;
            let mut d = driver(c, &mut chip);
            let rec = d.read_resistance(addr, v_read, polarity.into())?;
            write_csv_out(c, &[rec])?;
            finish_driver(c, &mut d)?;
        }
        Cmd::Sweep { addr, start, stop, step, polarity } => {
            let addr: CellAddress = addr.parse()?;
            let mut chip = build_chip(c, addr)?;
            let mut d = driver(c, &mut chip);
            let mut spec = CampaignSpec::new(CampaignKind::IvSweep, vec![AddressSpan::cell(addr)], "");
            (spec.v_start, spec.v_stop, spec.v_step, spec.polarity_mode) = (start, stop, step, polarity);
            spec.validate()?;
            let records = campaign::run_iv_sweep(&mut d, addr, &spec)?;
            write_csv_out(c, &records)?;
            finish_driver(c, &mut d)?;
        }
        Cmd::Campaign { spec, jobs, sequential } => {
            let mut spec = match spec {
                Some(p) => CampaignSpec::load(&p)?,
                None => {
                    let subs: Vec<u8> = match c.sub_array {
                        Some(s) => vec![s],
                        None => (0..SUB_ARRAYS as u8).collect(),
                    };
                    let out =
                        c.out.clone().ok_or_else(|| Error::Input("campaign without a spec needs --out".into()))?;
                    let mut s = CampaignSpec::new(
                        CampaignKind::MassCharacterize,
                        subs.into_iter().map(AddressSpan::whole).collect(),
                        out,
                    );
                    s.seed = c.seed.unwrap_or(1);
                    s
                }
            };
            if let Some(out) = &c.out {
                spec.output_path = out.clone();
            }
            if let Some(seed) = c.seed {
                spec.seed = seed;
            }
            let mut chip = Chip::new(load_config(c)?)?;
            let pop = match &c.population {
                Some(p) => Population::load(p)?,
                None => Population::log_uniform(spec.seed, c.sub_array, 1e3, 1e7, 0.0),
            };
            pop.apply(&mut chip)?;
            if spec.kind == CampaignKind::MassCharacterize {
                let opts = MassOptions {
                    strategy: if sequential { ReadStrategy::Sequential } else { ReadStrategy::Parallel },
                    jobs: jobs.max(1),
                    record_transcript: c.transcript.is_some(),
                    keep_trace: c.trace.is_some(),
                };
                let result = campaign::mass_characterize(&mut chip, &spec, opts)?;
                if let (Some(path), Some(t)) = (&c.transcript, &result.transcript) {
                    t.save(path)?;
                }
                if let (Some(path), Some(lanes)) = (&c.trace, &result.trace) {
                    save_trace(path, lanes)?;
                }
                eprintln!("{} records, summary in {}", result.records.len(), summary_path(&spec.output_path).display());
                eprintln!("bitstream sha256 {}", result.summary.bitstream_sha256);
            } else {
                let mut d = driver(c, &mut chip);
                let records = campaign::run_campaign(&mut d, &spec)?;
                save_records_csv(&spec.output_path, &records, true)?;
                eprintln!("{} records written to {}", records.len(), spec.output_path.display());
                finish_driver(c, &mut d)?;
            }
        }
        Cmd::Replay { transcript } => {
            let t = Transcript::load(&transcript)?;
            let mut chip = Chip::new(load_config(c)?)?;
            population(c)?.apply(&mut chip)?;
            let report = replay(&mut chip, &t)?;
            let mut out: Box<dyn Write> = match &c.out {
                Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p).map_err(|e| Error::io(p, e))?)),
                None => Box::new(std::io::stdout().lock()),
            };
            let path = c.out.clone().unwrap_or_else(|| "<stdout>".into());
            for p in &report.packets {
                writeln!(out, "{p}").map_err(|e| Error::io(&path, e))?;
            }
            out.flush().map_err(|e| Error::io(&path, e))?;
            println!("bitstream sha256 {}", report.hash);
            if !report.warnings.is_empty() {
                for w in &report.warnings {
                    eprintln!("warning: {w}");
                }
                return Err(Error::Integrity(format!("{} replay expectations failed", report.warnings.len())));
            }
        }
        Cmd::Decode { trace } => {
            let file = std::fs::File::open(&trace).map_err(|e| Error::io(&trace, e))?;
            let records = read_trace(std::io::BufReader::new(file))?;
            let mut stdout = std::io::stdout().lock();
            for r in records {
                let lane = rramsim::controller::LaneTransfer {
                    sub_array: r.sub_array,
                    mode: r.mode,
                    cycle0: r.cycle0,
                    symbols: r.symbols,
                };
                for p in decode_packets(&lane)? {
                    writeln!(stdout, "{p}").map_err(|e| Error::io("<stdout>", e))?;
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
