//! SPI transcripts and bitstream hashing.
//!
//! A transcript is line oriented text:
//!
//! ```text
//! # comment
//! 1030099            one 25-bit SPI frame as 7 hex digits
//! run 0 1255         advance sub-array 0 by 1255 ticks
//! expect 0 33 1f2e3d4  the last transfer of sub-array 0 carried this slot word
//! ```
//!
//! Replaying the frames and clock advances against a chip with the same
//! population reproduces the lane output exactly. `expect` lines are
//! checked and reported as integrity warnings on mismatch.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::ChipPort;
use crate::array::SUB_ARRAYS;
use crate::controller::{reg, LaneTransfer, SpiTransaction};
use crate::error::{Error, Result};
use crate::serializer::{
    deserialize_frame, deserialize_packet, pack_symbols, DataPacket, StreamMode, CHECKSUM_SLOT, DATA_SLOTS,
    FRAME_ENTRIES, HEADER_SLOT, PACKET_BITS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TranscriptLine {
    Spi(SpiTransaction),
    Run { sub_array: u8, ticks: u64 },
    Expect { sub_array: u8, slot: u8, word: u32 },
}

impl fmt::Display for TranscriptLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            TranscriptLine::Spi(t) => write!(f, "{:07x}", t.encode()),
            TranscriptLine::Run { sub_array, ticks } => write!(f, "run {sub_array} {ticks}"),
            TranscriptLine::Expect { sub_array, slot, word } => write!(f, "expect {sub_array} {slot} {word:07x}"),
        }
    }
}

fn mapped_offset(offset: u8) -> bool {
    offset <= reg::REG_CHECKSUM || offset >= reg::SET_CFG_BASE
}

fn parse_line(text: &str) -> std::result::Result<Option<TranscriptLine>, String> {
    let text = text.split('#').next().unwrap_or("").trim();
    if text.is_empty() {
        return Ok(None);
    }
    let words: Vec<&str> = text.split_whitespace().collect();
    let num = |s: &str, what: &str| s.parse::<u64>().map_err(|_| format!("bad {what} `{s}`"));
    let sub = |s: &str| -> std::result::Result<u8, String> {
        let v = num(s, "sub-array")?;
        if v as usize >= SUB_ARRAYS {
            return Err(format!("sub-array {v} out of range"));
        }
        Ok(v as u8)
    };
    match words.as_slice() {
        ["run", s, n] => Ok(Some(TranscriptLine::Run { sub_array: sub(s)?, ticks: num(n, "tick count")? })),
        ["expect", s, slot, word] => {
            let slot = num(slot, "slot")?;
            if slot as usize >= FRAME_ENTRIES {
                return Err(format!("slot {slot} out of range"));
            }
            let word = u32::from_str_radix(word, 16).map_err(|_| format!("bad word `{word}`"))?;
            if word >> PACKET_BITS != 0 {
                return Err(format!("word {word:x} exceeds 26 bits"));
            }
            Ok(Some(TranscriptLine::Expect { sub_array: sub(s)?, slot: slot as u8, word }))
        }
        [frame] if frame.len() == 7 => {
            let raw = u32::from_str_radix(frame, 16).map_err(|_| format!("bad SPI frame `{frame}`"))?;
            let t = SpiTransaction::decode(raw).map_err(|e| e.to_string())?;
            let offset = t.reg_addr & 0x3f;
            if !mapped_offset(offset) {
                return Err(format!("unknown register 0x{:02x}", t.reg_addr));
            }
            Ok(Some(TranscriptLine::Spi(t)))
        }
        _ => Err(format!("unrecognized line `{text}`")),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Transcript {
    pub lines: Vec<TranscriptLine>,
}

impl Transcript {
    /// Records what a transfer carried in its control slots (frames) or in
    /// the retrieved slot (single packets).
    pub(crate) fn push_expectations(&mut self, t: &LaneTransfer) {
        let Ok(words) = decode_transfer(t) else { return };
        for (slot, word) in words {
            if matches!(t.mode, StreamMode::Packet(_)) || slot >= DATA_SLOTS {
                self.lines.push(TranscriptLine::Expect { sub_array: t.sub_array, slot: slot as u8, word });
            }
        }
    }

    pub fn append(&mut self, other: Transcript) {
        self.lines.extend(other.lines);
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for Transcript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# rramsim transcript v1")?;
        for l in &self.lines {
            writeln!(f, "{l}")?;
        }
        Ok(())
    }
}

impl FromStr for Transcript {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut lines = Vec::new();
        for (i, text) in s.lines().enumerate() {
            match parse_line(text) {
                Ok(Some(l)) => lines.push(l),
                Ok(None) => {}
                Err(msg) => return Err(Error::Parse { line: i + 1, msg }),
            }
        }
        Ok(Transcript { lines })
    }
}

/// Slot words carried by one transfer: all 34 for a frame, one for a
/// single-packet retrieval.
pub fn decode_transfer(t: &LaneTransfer) -> Result<Vec<(usize, u32)>> {
    match t.mode {
        StreamMode::Frame => Ok(deserialize_frame(&t.symbols)?.entries.iter().copied().enumerate().collect()),
        StreamMode::Packet(n) => Ok(vec![(usize::from(n), deserialize_packet(&t.symbols, n.into())?)]),
    }
}

/// SHA-256 over the lane output, kept per sub-array so that runs that
/// interleave sub-arrays differently still hash the same.
#[derive(Debug, Clone, Default)]
pub struct LaneHasher {
    lanes: [Sha256; SUB_ARRAYS],
}

impl LaneHasher {
    pub fn push(&mut self, t: &LaneTransfer) {
        let (mode, target) = match t.mode {
            StreamMode::Frame => (0u8, 0u8),
            StreamMode::Packet(n) => (1, n),
        };
        let h = &mut self.lanes[usize::from(t.sub_array)];
        h.update([mode, target]);
        h.update(t.cycle0.to_le_bytes());
        h.update((t.symbols.len() as u64).to_le_bytes());
        h.update(pack_symbols(&t.symbols));
    }

    /// Takes over the state of one lane from another hasher.
    pub fn adopt(&mut self, sub_array: usize, from: &LaneHasher) {
        self.lanes[sub_array] = from.lanes[sub_array].clone();
    }

    pub fn finish(&self) -> String {
        let mut all = Sha256::new();
        for lane in &self.lanes {
            all.update(lane.clone().finalize());
        }
        hex::encode(all.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodedPacket {
    pub sub_array: u8,
    pub cycle0: u64,
    pub slot: usize,
    pub word: u32,
}

impl DecodedPacket {
    /// The data packet, for data slots.
    pub fn data(&self) -> Option<DataPacket> {
        (self.slot < DATA_SLOTS).then(|| DataPacket::unpack(self.word).expect("26-bit word"))
    }
}

impl fmt::Display for DecodedPacket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sub {} cycle {} slot {:2} word {:07x}", self.sub_array, self.cycle0, self.slot, self.word)?;
        match self.data() {
            Some(p) if p.valid() => write!(
                f,
                " adc {} gain_sel {:05b} col {} status {:05b}",
                p.adc_code, p.gain_sel, p.col_in_set, p.status
            ),
            Some(_) => f.write_str(" empty"),
            None if self.slot == HEADER_SLOT => {
                let h = crate::serializer::FrameHeader::unpack(self.word);
                write!(f, " header frame {} valid {}", h.frame_counter, h.n_valid)
            }
            None => write!(f, " reg_checksum {:04x} fold {:03x}", self.word >> 10, self.word & 0x3ff),
        }
    }
}

pub fn decode_packets(t: &LaneTransfer) -> Result<Vec<DecodedPacket>> {
    Ok(decode_transfer(t)?
        .into_iter()
        .map(|(slot, word)| DecodedPacket { sub_array: t.sub_array, cycle0: t.cycle0, slot, word })
        .collect())
}

#[derive(Debug, Clone, Default)]
pub struct ReplayReport {
    pub hash: String,
    pub warnings: Vec<String>,
    pub transfers: Vec<LaneTransfer>,
    pub packets: Vec<DecodedPacket>,
}

/// Replays a transcript against `port`.
pub fn replay<P: ChipPort>(port: &mut P, transcript: &Transcript) -> Result<ReplayReport> {
    let mut report = ReplayReport::default();
    let mut hasher = LaneHasher::default();
    let mut last: [Vec<(usize, u32)>; SUB_ARRAYS] = Default::default();
    for (i, line) in transcript.lines.iter().enumerate() {
        match *line {
            TranscriptLine::Spi(t) => {
                port.spi(t)?;
            }
            TranscriptLine::Run { sub_array, ticks } => {
                let sub = usize::from(sub_array);
                port.run_ticks(sub, ticks)?;
                let extra = port.run_until_idle(sub)?;
                if extra > 0 {
                    report.warnings.push(format!(
                        "entry {}: sub-array {sub} needed {extra} ticks beyond the recorded {ticks}",
                        i + 1
                    ));
                }
                for t in port.drain_lane(sub)? {
                    hasher.push(&t);
                    match decode_packets(&t) {
                        Ok(p) => {
                            last[sub] = p.iter().map(|d| (d.slot, d.word)).collect();
                            report.packets.extend(p);
                        }
                        Err(e) => {
                            last[sub].clear();
                            report.warnings.push(format!("entry {}: sub-array {sub}: {e}", i + 1));
                        }
                    }
                    report.transfers.push(t);
                }
            }
            TranscriptLine::Expect { sub_array, slot, word } => {
                let got = last[usize::from(sub_array)].iter().find(|(s, _)| *s == usize::from(slot)).map(|p| p.1);
                if got != Some(word) {
                    let got = got.map_or("nothing".to_string(), |w| format!("{w:07x}"));
                    let what = if usize::from(slot) == CHECKSUM_SLOT { " (checksum control packet)" } else { "" };
                    report.warnings.push(format!(
                        "entry {}: sub-array {sub_array} slot {slot}{what} expected {word:07x}, got {got}",
                        i + 1
                    ));
                }
            }
        }
    }
    report.hash = hasher.finish();
    Ok(report)
}
