//! Checks against vectors produced by the independent Python oracles in
//! `tests/data/`.

use std::path::PathBuf;

use rramsim::frontend::{check_golden_vectors, load_golden_vectors, AdcConfig, ResistorBank};
use rramsim::serializer::{deserialize_frame, stream_frame, DataPacket, Frame, FrameHeader, DATA_SLOTS};

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

#[test]
fn autorange_matches_exact_arithmetic_oracle() {
    let vectors = load_golden_vectors(&data("autorange_golden.txt")).unwrap();
    assert_eq!(vectors.len(), 2000);
    for stage in 0..5 {
        assert!(vectors.iter().any(|v| v.gain_sel == 1 << stage), "no vector selects stage {stage}");
    }
    let bad = check_golden_vectors(&vectors, &ResistorBank::default(), &AdcConfig::default());
    assert!(bad.is_empty(), "{} mismatches, first {:?}", bad.len(), vectors[bad[0]]);
}

struct GoldenFrame {
    header: FrameHeader,
    reg_checksum: u16,
    data: [DataPacket; DATA_SLOTS],
    stream: Vec<u8>,
}

fn parse_frames(text: &str) -> Vec<GoldenFrame> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let mut out = Vec::new();
    while let Some(head) = lines.next() {
        let f: Vec<u32> = head.split_whitespace().skip(1).map(|s| s.parse().unwrap()).collect();
        let data = std::array::from_fn(|_| {
            let v: Vec<u32> = lines.next().unwrap().split_whitespace().map(|s| s.parse().unwrap()).collect();
            DataPacket { adc_code: v[0] as u16, gain_sel: v[1] as u8, col_in_set: v[2] as u8, status: v[3] as u8 }
        });
        let stream = lines.next().unwrap().strip_prefix("stream ").unwrap().bytes().map(|b| b - b'0').collect();
        out.push(GoldenFrame {
            header: FrameHeader { frame_counter: f[0] as u16, sub_array: f[1] as u8, busy: false, n_valid: 0 },
            reg_checksum: f[2] as u16,
            data,
            stream,
        });
    }
    out
}

#[test]
fn frame_bitstream_matches_layout_oracle() {
    let frames = parse_frames(&std::fs::read_to_string(data("frame_golden.txt")).unwrap());
    assert_eq!(frames.len(), 6);
    for g in frames {
        let frame = Frame::new(&g.data, g.header, g.reg_checksum).unwrap();
        assert_eq!(stream_frame(&frame), g.stream);
        let back = deserialize_frame(&g.stream).unwrap();
        assert_eq!(back, frame);
        assert_eq!(back.frame_counter(), g.header.frame_counter);
        assert_eq!(back.reg_checksum(), g.reg_checksum);
        assert_eq!(back.header().sub_array, g.header.sub_array);
        for (slot, p) in g.data.iter().enumerate() {
            assert_eq!(back.packet(slot), *p);
        }
    }
}
