//! Two-stage output serializer and the matching host-side receiver.
//!
//! Packet layout (26 bits):
//!
//! ```text
//!  25        14 13     9 8     5 4      0
//! +------------+--------+-------+--------+
//! |  adc_code  |gain_sel|  col  | status |
//! +------------+--------+-------+--------+
//! status: [4] valid  [3] saturated_high  [2] saturated_low  [1:0] sequence
//! ```
//!
//! A frame holds 32 data packets (one per set) and two control packets:
//! slot 32 is the frame header, slot 33 carries the register-file checksum
//! and a fold of the data packets.
//!
//! Stage one is a 34-entry shift register that rotates one entry per cycle;
//! stage two shifts the selected packet out two bits per cycle, MSB first.
//! Retrieving packet `n` takes `1 + n + 13` cycles: one capture cycle, `n`
//! browse cycles and 13 output cycles. A full frame streams back to back
//! after the first lead-in, `1 + 34 * 13 = 443` cycles.

use std::collections::VecDeque;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::frontend::ReadoutResult;

pub const PACKET_BITS: u32 = 26;
pub const PACKET_MASK: u32 = (1 << PACKET_BITS) - 1;
pub const PAIRS_PER_PACKET: usize = 13;
pub const DATA_SLOTS: usize = 32;
pub const FRAME_ENTRIES: usize = 34;
pub const HEADER_SLOT: usize = 32;
pub const CHECKSUM_SLOT: usize = 33;

pub const STATUS_VALID: u8 = 1 << 4;
pub const STATUS_SAT_HIGH: u8 = 1 << 3;
pub const STATUS_SAT_LOW: u8 = 1 << 2;
pub const STATUS_SEQ_MASK: u8 = 0b11;

/// Two output bits driven in one lane cycle, `(bit 2k+1, bit 2k)`.
pub type BitPair = u8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct DataPacket {
    pub adc_code: u16,
    pub gain_sel: u8,
    pub col_in_set: u8,
    pub status: u8,
}

fn check_width(field: &'static str, value: u32, bits: u32) -> Result<()> {
    if value >> bits != 0 {
        return Err(Error::Encoding { field, value, bits });
    }
    Ok(())
}

impl DataPacket {
    pub fn from_readout(r: &ReadoutResult, col_in_set: u8, sequence: u8) -> Self {
        let mut status = STATUS_VALID | (sequence & STATUS_SEQ_MASK);
        if r.saturated_high {
            status |= STATUS_SAT_HIGH;
        }
        if r.saturated_low {
            status |= STATUS_SAT_LOW;
        }
        DataPacket { adc_code: r.adc_code, gain_sel: r.gain_sel, col_in_set, status }
    }

    pub fn readout(&self) -> ReadoutResult {
        ReadoutResult {
            adc_code: self.adc_code,
            gain_sel: self.gain_sel,
            saturated_low: self.status & STATUS_SAT_LOW != 0,
            saturated_high: self.status & STATUS_SAT_HIGH != 0,
        }
    }

    pub fn valid(&self) -> bool {
        self.status & STATUS_VALID != 0
    }

    pub fn sequence(&self) -> u8 {
        self.status & STATUS_SEQ_MASK
    }

    pub fn pack(&self) -> Result<u32> {
        check_width("adc_code", self.adc_code.into(), 12)?;
        check_width("gain_sel", self.gain_sel.into(), 5)?;
        check_width("col_in_set", self.col_in_set.into(), 4)?;
        check_width("status", self.status.into(), 5)?;
        Ok((u32::from(self.adc_code) << 14)
            | (u32::from(self.gain_sel) << 9)
            | (u32::from(self.col_in_set) << 5)
            | u32::from(self.status))
    }

    pub fn unpack(word: u32) -> Result<Self> {
        check_width("packet", word, PACKET_BITS)?;
        Ok(DataPacket {
            adc_code: ((word >> 14) & 0xfff) as u16,
            gain_sel: ((word >> 9) & 0x1f) as u8,
            col_in_set: ((word >> 5) & 0xf) as u8,
            status: (word & 0x1f) as u8,
        })
    }
}

/// Contents of control slot 32.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FrameHeader {
    pub frame_counter: u16,
    pub sub_array: u8,
    pub busy: bool,
    pub n_valid: u8,
}

impl FrameHeader {
    pub fn pack(&self) -> u32 {
        (u32::from(self.frame_counter) << 10)
            | (u32::from(self.sub_array & 0b11) << 8)
            | (u32::from(self.busy) << 7)
            | u32::from(self.n_valid & 0x3f)
    }

    pub fn unpack(word: u32) -> Self {
        FrameHeader {
            frame_counter: ((word >> 10) & 0xffff) as u16,
            sub_array: ((word >> 8) & 0b11) as u8,
            busy: (word >> 7) & 1 != 0,
            n_valid: (word & 0x3f) as u8,
        }
    }
}

/// 10-bit XOR fold of the data packets carried in control slot 33.
pub fn data_fold(data: &[u32]) -> u16 {
    data.iter().fold(0u32, |acc, w| acc ^ (w & 0x3ff) ^ ((w >> 10) & 0x3ff) ^ ((w >> 20) & 0x3f)) as u16
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Frame {
    pub entries: [u32; FRAME_ENTRIES],
}

impl Frame {
    /// Builds a frame from data packets, filling both control slots.
    pub fn new(data: &[DataPacket; DATA_SLOTS], header: FrameHeader, reg_checksum: u16) -> Result<Self> {
        let mut entries = [0u32; FRAME_ENTRIES];
        for (slot, p) in entries.iter_mut().zip(data) {
            *slot = p.pack()?;
        }
        let n_valid = data.iter().filter(|p| p.valid()).count() as u8;
        entries[HEADER_SLOT] = FrameHeader { n_valid, ..header }.pack();
        entries[CHECKSUM_SLOT] = (u32::from(reg_checksum) << 10) | u32::from(data_fold(&entries[..DATA_SLOTS]));
        Ok(Frame { entries })
    }

    pub fn header(&self) -> FrameHeader {
        FrameHeader::unpack(self.entries[HEADER_SLOT])
    }

    pub fn frame_counter(&self) -> u16 {
        self.header().frame_counter
    }

    pub fn reg_checksum(&self) -> u16 {
        (self.entries[CHECKSUM_SLOT] >> 10) as u16
    }

    pub fn packet(&self, slot: usize) -> DataPacket {
        DataPacket::unpack(self.entries[slot] & PACKET_MASK).expect("masked to 26 bits")
    }

    /// Checks the control packets against the data slots.
    pub fn verify(&self) -> Result<()> {
        if let Some(bad) = self.entries.iter().position(|w| w >> PACKET_BITS != 0) {
            return Err(Error::Integrity(format!("slot {bad} exceeds 26 bits")));
        }
        let fold = (self.entries[CHECKSUM_SLOT] & 0x3ff) as u16;
        let expect = data_fold(&self.entries[..DATA_SLOTS]);
        if fold != expect {
            return Err(Error::Integrity(format!("data fold 0x{fold:03x} does not match recomputed 0x{expect:03x}")));
        }
        let valid = (0..DATA_SLOTS).filter(|&s| self.packet(s).valid()).count();
        if usize::from(self.header().n_valid) != valid {
            return Err(Error::Integrity(format!(
                "header counts {} valid packets, frame holds {valid}",
                self.header().n_valid
            )));
        }
        for s in 0..DATA_SLOTS {
            let p = self.packet(s);
            if p.valid() && p.readout().stage().is_none() {
                return Err(Error::Integrity(format!("slot {s} gain_sel 0x{:02x} is not one-hot", p.gain_sel)));
            }
        }
        Ok(())
    }
}

fn push_pairs(word: u32, out: &mut Vec<BitPair>) {
    for k in (0..PAIRS_PER_PACKET).rev() {
        out.push(((word >> (2 * k)) & 0b11) as BitPair);
    }
}

fn gather_pairs(pairs: &[BitPair]) -> Result<u32> {
    pairs.iter().try_fold(0u32, |acc, &p| {
        if p > 0b11 {
            return Err(Error::Framing(format!("symbol {p} is not a bit pair")));
        }
        Ok((acc << 2) | u32::from(p))
    })
}

pub fn retrieve_latency(n: usize) -> u64 {
    1 + n as u64 + PAIRS_PER_PACKET as u64
}

pub fn one_stage_latency(n: usize) -> u64 {
    n as u64 * PAIRS_PER_PACKET as u64 + PAIRS_PER_PACKET as u64
}

pub fn frame_stream_cycles() -> u64 {
    1 + (FRAME_ENTRIES * PAIRS_PER_PACKET) as u64
}

/// Lane output for a single-packet retrieval: `1 + n` idle cycles (zero
/// symbols) followed by the 13 pairs of packet `n`.
pub fn retrieve_packet(frame: &Frame, n: usize) -> Result<(Vec<BitPair>, u64)> {
    if n >= FRAME_ENTRIES {
        return Err(Error::PacketIndex(n));
    }
    let latency = retrieve_latency(n);
    let mut out = vec![0; 1 + n];
    out.reserve(PAIRS_PER_PACKET);
    push_pairs(frame.entries[n], &mut out);
    debug_assert_eq!(out.len() as u64, latency);
    Ok((out, latency))
}

/// Lane output for a full frame: one capture cycle then all 34 packets.
pub fn stream_frame(frame: &Frame) -> Vec<BitPair> {
    let mut out = Vec::with_capacity(frame_stream_cycles() as usize);
    out.push(0);
    for &w in &frame.entries {
        push_pairs(w, &mut out);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamMode {
    Frame,
    Packet(u8),
}

impl StreamMode {
    pub fn cycles(self) -> u64 {
        match self {
            StreamMode::Frame => frame_stream_cycles(),
            StreamMode::Packet(n) => retrieve_latency(n.into()),
        }
    }

    fn lead_in(self) -> usize {
        match self {
            StreamMode::Frame => 1,
            StreamMode::Packet(n) => 1 + usize::from(n),
        }
    }
}

fn check_stream(pairs: &[BitPair], mode: StreamMode) -> Result<()> {
    let want = mode.cycles() as usize;
    if pairs.len() != want {
        return Err(Error::Framing(format!("expected {want} lane cycles, got {}", pairs.len())));
    }
    if pairs[..mode.lead_in()].iter().any(|&p| p != 0) {
        return Err(Error::Framing("activity during lead-in cycles".into()));
    }
    Ok(())
}

/// Host receiver for a full-frame stream. Verifies the control packets.
pub fn deserialize_frame(pairs: &[BitPair]) -> Result<Frame> {
    check_stream(pairs, StreamMode::Frame)?;
    let mut entries = [0u32; FRAME_ENTRIES];
    for (e, chunk) in entries.iter_mut().zip(pairs[1..].chunks_exact(PAIRS_PER_PACKET)) {
        *e = gather_pairs(chunk)?;
    }
    let frame = Frame { entries };
    frame.verify()?;
    Ok(frame)
}

/// Host receiver for a single-packet retrieval of slot `n`.
pub fn deserialize_packet(pairs: &[BitPair], n: usize) -> Result<u32> {
    if n >= FRAME_ENTRIES {
        return Err(Error::PacketIndex(n));
    }
    let mode = StreamMode::Packet(n as u8);
    check_stream(pairs, mode)?;
    gather_pairs(&pairs[mode.lead_in()..])
}

/// Cycle-by-cycle model of the two-stage serializer.
#[derive(Debug, Clone)]
pub struct TwoStageSerializer {
    bank: [u32; FRAME_ENTRIES],
    head: usize,
    captured: bool,
    shifter: Option<(u32, usize)>,
    wanted: VecDeque<usize>,
    cycle: u64,
}

impl TwoStageSerializer {
    pub fn new(frame: &Frame, targets: impl IntoIterator<Item = usize>) -> Self {
        TwoStageSerializer {
            bank: frame.entries,
            head: 0,
            captured: false,
            shifter: None,
            wanted: targets.into_iter().collect(),
            cycle: 0,
        }
    }

    pub fn done(&self) -> bool {
        self.captured && self.shifter.is_none() && self.wanted.is_empty()
    }

    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    /// Advances one clock; returns the pair driven on the lane, if any.
    pub fn tick(&mut self) -> Option<BitPair> {
        self.cycle += 1;
        if !self.captured {
            self.captured = true;
            return None;
        }
        if let Some(&target) = self.wanted.front() {
            if self.shifter.is_none() && self.head == target {
                self.shifter = Some((self.bank[self.head], PAIRS_PER_PACKET));
                self.wanted.pop_front();
            } else if self.head != target {
                self.head = (self.head + 1) % FRAME_ENTRIES;
            }
        }
        let (word, remaining) = self.shifter.as_mut()?;
        *remaining -= 1;
        let pair = ((*word >> (2 * *remaining)) & 0b11) as BitPair;
        if *remaining == 0 {
            self.shifter = None;
        }
        Some(pair)
    }

    /// Runs to completion; idle cycles appear as zero symbols.
    pub fn run(mut self) -> Vec<BitPair> {
        let mut out = Vec::new();
        while !self.done() {
            out.push(self.tick().unwrap_or(0));
        }
        out
    }
}

/// Reference single shift register holding the whole frame, two bits out
/// per cycle starting from packet 0. Returns the cycle on which packet
/// `n`'s last pair leaves.
pub fn one_stage_reference_latency(frame: &Frame, n: usize) -> u64 {
    let total_pairs = FRAME_ENTRIES * PAIRS_PER_PACKET;
    let mut shift: Vec<BitPair> = Vec::with_capacity(total_pairs);
    for &w in &frame.entries {
        push_pairs(w, &mut shift);
    }
    let mut cycle = 0u64;
    let mut emitted = 0usize;
    for _ in shift {
        cycle += 1;
        emitted += 1;
        if emitted == (n + 1) * PAIRS_PER_PACKET {
            break;
        }
    }
    cycle
}

pub const TRACE_MAGIC: [u8; 4] = *b"RRBT";
pub const TRACE_VERSION: u16 = 1;

/// One lane transfer as stored in a bitstream trace file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub sub_array: u8,
    pub mode: StreamMode,
    pub cycle0: u64,
    pub symbols: Vec<BitPair>,
}

impl TraceRecord {
    /// Header (28 bytes, little-endian) then the symbols packed four per
    /// byte, first symbol in bits 1:0.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let (mode, target) = match self.mode {
            StreamMode::Frame => (0u8, 0u8),
            StreamMode::Packet(n) => (1, n),
        };
        w.write_all(&TRACE_MAGIC)?;
        w.write_all(&TRACE_VERSION.to_le_bytes())?;
        w.write_all(&[self.sub_array, mode, target, 0, 0, 0])?;
        w.write_all(&self.cycle0.to_le_bytes())?;
        w.write_all(&(self.symbols.len() as u64).to_le_bytes())?;
        w.write_all(&pack_symbols(&self.symbols))
    }

    /// Reads the next record; `Ok(None)` at a clean end of input.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Option<Self>> {
        let mut header = [0u8; 28];
        let mut got = 0;
        while got < header.len() {
            let n = r.read(&mut header[got..]).map_err(|e| Error::Framing(format!("trace read failed: {e}")))?;
            if n == 0 {
                break;
            }
            got += n;
        }
        if got == 0 {
            return Ok(None);
        }
        if got < header.len() {
            return Err(Error::Framing("truncated trace header".into()));
        }
        if header[..4] != TRACE_MAGIC {
            return Err(Error::Framing("bad trace magic".into()));
        }
        let version = u16::from_le_bytes([header[4], header[5]]);
        if version != TRACE_VERSION {
            return Err(Error::Framing(format!("unsupported trace version {version}")));
        }
        let sub_array = header[6];
        let mode = match header[7] {
            0 => StreamMode::Frame,
            1 if usize::from(header[8]) < FRAME_ENTRIES => StreamMode::Packet(header[8]),
            m => return Err(Error::Framing(format!("bad trace mode {m}/{}", header[8]))),
        };
        let cycle0 = u64::from_le_bytes(header[12..20].try_into().expect("8 bytes"));
        let n = u64::from_le_bytes(header[20..28].try_into().expect("8 bytes")) as usize;
        let mut bytes = vec![0u8; n.div_ceil(4)];
        r.read_exact(&mut bytes).map_err(|_| Error::Framing("truncated trace payload".into()))?;
        Ok(Some(TraceRecord { sub_array, mode, cycle0, symbols: unpack_symbols(&bytes, n) }))
    }
}

pub fn pack_symbols(symbols: &[BitPair]) -> Vec<u8> {
    symbols.chunks(4).map(|c| c.iter().enumerate().fold(0u8, |b, (i, s)| b | ((s & 0b11) << (2 * i)))).collect()
}

pub fn unpack_symbols(bytes: &[u8], n: usize) -> Vec<BitPair> {
    (0..n).map(|i| (bytes[i / 4] >> (2 * (i % 4))) & 0b11).collect()
}

pub fn read_trace<R: Read>(mut r: R) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    while let Some(rec) = TraceRecord::read_from(&mut r)? {
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_frame() -> Frame {
        let mut data = [DataPacket::default(); DATA_SLOTS];
        for (i, p) in data.iter_mut().enumerate() {
            *p = DataPacket {
                adc_code: (i as u16 * 131) & 0xfff,
                gain_sel: 1 << (i % 5),
                col_in_set: (i % 16) as u8,
                status: STATUS_VALID | (i as u8 & 3),
            };
        }
        Frame::new(&data, FrameHeader { frame_counter: 7, sub_array: 2, busy: false, n_valid: 0 }, 0xbeef).unwrap()
    }

    #[test]
    fn zero_packet() {
        assert_eq!(DataPacket::default().pack().unwrap(), 0);
    }

    #[test]
    fn over_width_rejected() {
        let p = DataPacket { adc_code: 0x1000, ..Default::default() };
        assert!(matches!(p.pack(), Err(Error::Encoding { field: "adc_code", .. })));
        let p = DataPacket { gain_sel: 0x20, ..Default::default() };
        assert!(p.pack().is_err());
        assert!(DataPacket::unpack(1 << 26).is_err());
    }

    #[test]
    fn latencies() {
        assert_eq!(retrieve_latency(0), 14);
        assert_eq!(retrieve_latency(33), 47);
        assert_eq!(one_stage_latency(33), 442);
        assert_eq!(frame_stream_cycles(), 443);
        assert!(matches!(retrieve_packet(&sample_frame(), 34), Err(Error::PacketIndex(34))));
    }

    #[test]
    fn retrieved_pairs_reassemble() {
        let f = sample_frame();
        for n in [0, 5, 32, 33] {
            let (pairs, lat) = retrieve_packet(&f, n).unwrap();
            assert_eq!(pairs.len() as u64, lat);
            assert_eq!(deserialize_packet(&pairs, n).unwrap(), f.entries[n]);
        }
    }

    #[test]
    fn frame_roundtrip_and_control() {
        let f = sample_frame();
        let s = stream_frame(&f);
        assert_eq!(s.len(), 443);
        let back = deserialize_frame(&s).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.frame_counter(), 7);
        assert_eq!(back.reg_checksum(), 0xbeef);
        assert_eq!(back.header().n_valid, 32);
        assert_eq!(back.header().sub_array, 2);
    }

    #[test]
    fn truncated_stream() {
        let s = stream_frame(&sample_frame());
        assert!(matches!(deserialize_frame(&s[..s.len() - 1]), Err(Error::Framing(_))));
    }

    #[test]
    fn corrupted_control_packet() {
        let f = sample_frame();
        let mut s = stream_frame(&f);
        // last pair of slot 33 is the low bits of the data fold
        let last = s.len() - 1;
        s[last] ^= 0b01;
        assert!(matches!(deserialize_frame(&s), Err(Error::Integrity(_))));
        let mut s = stream_frame(&f);
        let header_last = 1 + 33 * PAIRS_PER_PACKET - 1;
        s[header_last] ^= 0b01;
        assert!(matches!(deserialize_frame(&s), Err(Error::Integrity(_))));
    }

    #[test]
    fn zero_frame_timing() {
        let f = Frame { entries: [0; FRAME_ENTRIES] };
        let s = stream_frame(&f);
        assert_eq!(s.len(), 443);
        assert!(s.iter().all(|&p| p == 0));
        assert_eq!(TwoStageSerializer::new(&f, 0..FRAME_ENTRIES).run().len(), 443);
    }

    #[test]
    fn cycle_model_matches_fast_path() {
        let f = sample_frame();
        assert_eq!(TwoStageSerializer::new(&f, 0..FRAME_ENTRIES).run(), stream_frame(&f));
        for n in 0..FRAME_ENTRIES {
            let (pairs, _) = retrieve_packet(&f, n).unwrap();
            assert_eq!(TwoStageSerializer::new(&f, [n]).run(), pairs);
        }
    }

    #[test]
    fn trace_roundtrip() {
        let f = sample_frame();
        let recs = vec![
            TraceRecord { sub_array: 1, mode: StreamMode::Frame, cycle0: 99, symbols: stream_frame(&f) },
            TraceRecord {
                sub_array: 1,
                mode: StreamMode::Packet(3),
                cycle0: 1234,
                symbols: retrieve_packet(&f, 3).unwrap().0,
            },
        ];
        let mut buf = Vec::new();
        for r in &recs {
            r.write_to(&mut buf).unwrap();
        }
        assert_eq!(&buf[..4], b"RRBT");
        assert_eq!(read_trace(&buf[..]).unwrap(), recs);
        assert!(matches!(read_trace(&buf[..buf.len() - 1]), Err(Error::Framing(_))));
    }

    #[test]
    fn symbol_packing_is_little_endian_within_byte() {
        assert_eq!(pack_symbols(&[0b01, 0b10, 0b11, 0b00, 0b11]), vec![0b00_11_10_01, 0b11]);
    }
}
