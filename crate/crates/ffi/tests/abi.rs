use std::ffi::{c_char, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use rramsim::controller::reg;
use rramsim_ffi::*;

fn new_chip() -> *mut RramChip {
    let mut chip = ptr::null_mut();
    assert_eq!(unsafe { rram_chip_new(ptr::null(), &mut chip) }, RramStatus::Ok);
    assert!(!chip.is_null());
    chip
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { rram_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn spi(chip: *mut RramChip, write: bool, addr: u8, data: u16) -> u16 {
    let frame = (u32::from(write) << 24) | (u32::from(addr) << 16) | u32::from(data);
    let mut rb = 0;
    assert_eq!(unsafe { rram_spi(chip, frame, &mut rb) }, RramStatus::Ok, "{}", last_error());
    rb
}

#[test]
fn compensated_read_through_the_abi() {
    let chip = new_chip();
    unsafe {
        assert_eq!(rram_chip_set_linear(chip, 2, 10, 100, 4.7e4), RramStatus::Ok);
        let mut m = RramMeasurement::default();
        assert_eq!(rram_read_resistance(chip, 2, 10, 100, 0.5, 0, &mut m), RramStatus::Ok);
        assert_eq!(m.flags, 0);
        assert!((m.r_ohms / 4.7e4 - 1.0).abs() < 0.01, "{m:?}");
        assert_eq!(m.true_r_ohms, 4.7e4);
        assert!(m.v_dut_volts >= 0.49);
        rram_chip_free(chip);
    }
}

#[test]
fn write_pulse_switches_a_bistable_cell() {
    let chip = new_chip();
    unsafe {
        assert_eq!(rram_chip_set_bistable(chip, 0, 1, 2, 1e3, 1e5), RramStatus::Ok);
        let mut code = 0u8;
        assert_eq!(rram_write_pulse(chip, 0, 1, 2, 1.6, 0, 10e-9, &mut code), RramStatus::Ok);
        assert!(code > 0);
        let mut r = 0.0;
        assert_eq!(rram_chip_cell_resistance(chip, 0, 1, 2, &mut r), RramStatus::Ok);
        assert_eq!(r, 1e3);
        // below the minimum width
        assert_eq!(rram_write_pulse(chip, 0, 1, 2, 1.6, 1, 4e-9, ptr::null_mut()), RramStatus::Range);
        rram_chip_free(chip);
    }
}

#[test]
fn raw_spi_read_and_lane_drain() {
    let chip = new_chip();
    let sub = 1usize;
    let a = |off| reg::addr(sub, off);
    unsafe {
        assert_eq!(rram_chip_set_linear(chip, 1, 3, 37, 1e4), RramStatus::Ok);
    }
    spi(chip, true, a(reg::ROW_GRAY), rram_gray_encode(3));
    spi(chip, true, a(reg::COL_ADDR), 37);
    spi(chip, true, a(reg::DAC_CODE), 40);
    // single-packet retrieval of set 2
    spi(chip, true, a(reg::SERIAL_CTRL), reg::SERIAL_SINGLE | 2);
    spi(chip, true, a(reg::CTRL), 2);
    assert_eq!(spi(chip, true, a(reg::CTRL), 2 | reg::CTRL_GO), 2);
    assert_ne!(spi(chip, false, a(reg::STATUS), 0) & reg::STATUS_BUSY, 0);
    let mut ticks = 0;
    unsafe {
        assert_eq!(rram_run_until_idle(chip, 1, &mut ticks), RramStatus::Ok);
    }
    assert!(ticks > 800);
    let mut pending = 0;
    unsafe {
        assert_eq!(rram_lane_pending(chip, 1, &mut pending), RramStatus::Ok);
    }
    assert_eq!(pending, 1 + 2 + 13);
    let mut small = [0u8; 4];
    let mut len = 0;
    unsafe {
        assert_eq!(rram_lane_read(chip, 1, small.as_mut_ptr(), small.len(), &mut len), RramStatus::BufferTooSmall);
    }
    assert_eq!(len, pending);
    let mut buf = vec![0u8; len];
    unsafe {
        assert_eq!(rram_lane_read(chip, 1, buf.as_mut_ptr(), buf.len(), &mut len), RramStatus::Ok);
    }
    assert!(buf[..3].iter().all(|&s| s == 0));
    let word = buf[3..].iter().fold(0u32, |w, &s| (w << 2) | u32::from(s));
    let mut p = RramDataPacket::default();
    unsafe {
        assert_eq!(rram_packet_unpack(word, &mut p), RramStatus::Ok);
        assert_eq!(p.col_in_set, 5);
        assert_ne!(p.status & 0x10, 0);
        let mut again = 0;
        assert_eq!(rram_packet_pack(&p, &mut again), RramStatus::Ok);
        assert_eq!(again, word);
        assert_eq!(rram_lane_pending(chip, 1, &mut pending), RramStatus::Ok);
        assert_eq!(pending, 0);
        rram_chip_free(chip);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let chip = new_chip();
    unsafe {
        let mut m = RramMeasurement::default();
        assert_eq!(rram_read_resistance(ptr::null_mut(), 0, 0, 0, 0.5, 0, &mut m), RramStatus::NullPointer);
        assert_eq!(rram_read_resistance(chip, 0, 0, 512, 0.5, 0, &mut m), RramStatus::Selection);
        assert!(last_error().contains("out of bounds"), "{}", last_error());
        assert_eq!(rram_read_resistance(chip, 0, 0, 0, 0.5, 7, &mut m), RramStatus::InvalidArgument);
        assert_eq!(rram_read_resistance(chip, 0, 0, 0, 9.0, 0, &mut m), RramStatus::Range);
        assert_eq!(rram_spi(chip, 1 << 25, ptr::null_mut()), RramStatus::InvalidArgument);
        // unmapped register
        assert_eq!(rram_spi(chip, (1 << 24) | (0x1f << 16), ptr::null_mut()), RramStatus::Selection);
        let bad = CString::new("[dac]\nv_min_volts = 9.0\n").unwrap();
        let mut other = ptr::null_mut();
        assert_eq!(rram_chip_new(bad.as_ptr(), &mut other), RramStatus::InvalidArgument);
        assert!(other.is_null());
        let pop = CString::new("seed = 3\n[[region]]\nsub_array = 0\nrows = [0, 0]\nfill = { kind = \"log_uniform\", r_min_ohms = 1e3, r_max_ohms = 1e7 }\n").unwrap();
        assert_eq!(rram_chip_load_population(chip, pop.as_ptr()), RramStatus::Ok);
        assert_eq!(rram_chip_populate_log_uniform(chip, 1, 7, 1e3, 1e7, 0.0), RramStatus::Selection);
        let mut word = 0;
        let p = RramDataPacket { adc_code: 4096, ..Default::default() };
        assert_eq!(rram_packet_pack(&p, &mut word), RramStatus::Range);
        rram_chip_free(chip);
        rram_chip_free(ptr::null_mut());
    }
}

#[test]
fn gray_and_autorange() {
    for n in 0..512u16 {
        assert_eq!(rram_gray_decode(rram_gray_encode(n)), n);
    }
    let mut r = RramReadout::default();
    unsafe {
        // 1 V into 1 Mohm is 1 uA: the 25 kohm stage is the first to clear
        assert_eq!(rram_autorange_convert(ptr::null(), 1.0, 1e6, &mut r), RramStatus::Ok);
        assert_eq!(r.gain_sel, 1 << 3);
        assert!(!r.saturated_low && !r.saturated_high);
        assert_eq!(rram_autorange_convert(ptr::null(), 1.0, 0.0, &mut r), RramStatus::InvalidArgument);
    }
}

fn header() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/rramsim.h")
}

#[test]
fn header_declares_the_api() {
    let h = std::fs::read_to_string(header()).unwrap();
    for name in [
        "typedef struct RramChip RramChip",
        "RRAM_STATUS_BUFFER_TOO_SMALL = 8",
        "rram_chip_new",
        "rram_chip_free",
        "rram_spi",
        "rram_run_until_idle",
        "rram_lane_read",
        "rram_read_resistance",
        "rram_write_pulse",
        "rram_packet_pack",
        "rram_gray_encode",
        "rram_autorange_convert",
        "rram_last_error",
    ] {
        assert!(h.contains(name), "header lacks {name}");
    }
}

/// Builds and runs a C program against the static library when a C
/// compiler is on the path.
#[test]
fn c_program_links_and_runs() {
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler, skipped");
        return;
    }
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("librramsim_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built, skipped", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "rramsim.h"
int main(void) {
    RramChip *chip = NULL;
    if (rram_chip_new(NULL, &chip) != RRAM_STATUS_OK) return 1;
    if (rram_chip_set_linear(chip, 0, 4, 8, 1000.0) != RRAM_STATUS_OK) return 2;
    RramMeasurement m;
    if (rram_read_resistance(chip, 0, 4, 8, 0.5, 0, &m) != RRAM_STATUS_OK) return 3;
    if (rram_read_resistance(chip, 9, 0, 0, 0.5, 0, &m) != RRAM_STATUS_SELECTION) return 4;
    char msg[128];
    rram_last_error(msg, sizeof msg);
    printf("%.1f|%s\n", m.r_ohms, msg);
    rram_chip_free(chip);
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("main");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "{out:?}");
    let text = String::from_utf8(out.stdout).unwrap();
    let (r, msg) = text.trim().split_once('|').unwrap();
    let r: f64 = r.parse().unwrap();
    assert!((r / 1000.0 - 1.0).abs() < 0.01, "{text}");
    assert!(msg.contains("out of bounds"), "{text}");
}
