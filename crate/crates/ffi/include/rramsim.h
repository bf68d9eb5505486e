#ifndef RRAMSIM_H
#define RRAMSIM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum RramStatus {
  RRAM_STATUS_OK = 0,
  RRAM_STATUS_NULL_POINTER = 1,
  RRAM_STATUS_INVALID_ARGUMENT = 2,
  RRAM_STATUS_RANGE = 3,
  RRAM_STATUS_SELECTION = 4,
  RRAM_STATUS_BUSY = 5,
  RRAM_STATUS_IO = 6,
  RRAM_STATUS_INTEGRITY = 7,
  RRAM_STATUS_BUFFER_TOO_SMALL = 8,
  RRAM_STATUS_PANIC = 9,
} RramStatus;

/**
 * Opaque chip handle.
 */
typedef struct RramChip RramChip;

/**
 * A reconstructed measurement. `true_r_ohms` is the simulated cell's
 * resistance before the read. `flags` bits: 1 saturated low, 2 saturated
 * high, 4 non-positive resistance.
 */
typedef struct RramMeasurement {
  double v_dut_volts;
  double i_amps;
  double r_ohms;
  double true_r_ohms;
  double sim_time_s;
  uint16_t adc_code;
  uint8_t dac_code;
  uint8_t gain_sel;
  uint8_t flags;
} RramMeasurement;

typedef struct RramReadout {
  uint16_t adc_code;
  uint8_t gain_sel;
  bool saturated_low;
  bool saturated_high;
} RramReadout;

typedef struct RramDataPacket {
  uint16_t adc_code;
  uint8_t gain_sel;
  uint8_t col_in_set;
  uint8_t status;
} RramDataPacket;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL
 * terminated, truncated to `cap`). Returns the full message length.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t rram_last_error(char *buf, size_t cap);

/**
 * Creates a chip. `config_toml` may be null for defaults.
 *
 * # Safety
 * `config_toml` must be null or NUL terminated; `out_chip` must be valid.
 */
enum RramStatus rram_chip_new(const char *config_toml, struct RramChip **out_chip);

/**
 * Releases a chip. Null is ignored.
 *
 * # Safety
 * `chip` must come from [`rram_chip_new`] and not be used afterwards.
 */
void rram_chip_free(struct RramChip *chip);

/**
 * Applies a population given as TOML text.
 *
 * # Safety
 * `chip` must be a live handle and `population_toml` NUL terminated.
 */
enum RramStatus rram_chip_load_population(struct RramChip *chip, const char *population_toml);

/**
 * Fills one sub-array (or all four when `sub_array` is negative) with
 * log-uniform linear resistors.
 *
 * # Safety
 * `chip` must be a live handle.
 */
enum RramStatus rram_chip_populate_log_uniform(struct RramChip *chip,
                                               uint64_t seed,
                                               int32_t sub_array,
                                               double r_min_ohms,
                                               double r_max_ohms,
                                               double stuck_open_fraction);

/**
 * Places a linear resistor in one cell.
 *
 * # Safety
 * `chip` must be a live handle.
 */
enum RramStatus rram_chip_set_linear(struct RramChip *chip,
                                     uint32_t sub_array,
                                     uint32_t row,
                                     uint32_t col,
                                     double ohms);

/**
 * Places a bistable device (starting in its high state) in one cell.
 *
 * # Safety
 * `chip` must be a live handle.
 */
enum RramStatus rram_chip_set_bistable(struct RramChip *chip,
                                       uint32_t sub_array,
                                       uint32_t row,
                                       uint32_t col,
                                       double r_low_ohms,
                                       double r_high_ohms);

/**
 * Current resistance held by a cell.
 *
 * # Safety
 * `chip` must be a live handle and `out_ohms` valid.
 */
enum RramStatus rram_chip_cell_resistance(struct RramChip *chip,
                                          uint32_t sub_array,
                                          uint32_t row,
                                          uint32_t col,
                                          double *out_ohms);

/**
 * Shifts one 25-bit SPI frame in. `out_readback` (nullable) receives the
 * register value held before the access.
 *
 * # Safety
 * `chip` must be a live handle; `out_readback` null or valid.
 */
enum RramStatus rram_spi(struct RramChip *chip, uint32_t frame, uint16_t *out_readback);

/**
 * Advances one sub-array by `ticks` controller cycles (5 ns each).
 *
 * # Safety
 * `chip` must be a live handle.
 */
enum RramStatus rram_run_ticks(struct RramChip *chip, uint32_t sub_array, uint64_t ticks);

/**
 * Runs a sub-array until its operation completes.
 *
 * # Safety
 * `chip` must be a live handle; `out_ticks` null or valid.
 */
enum RramStatus rram_run_until_idle(struct RramChip *chip, uint32_t sub_array, uint64_t *out_ticks);

/**
 * Number of lane symbols waiting for [`rram_lane_read`].
 *
 * # Safety
 * `chip` must be a live handle and `out_len` valid.
 */
enum RramStatus rram_lane_pending(struct RramChip *chip, uint32_t sub_array, size_t *out_len);

/**
 * Moves all pending lane symbols into `buf`, one per byte. Fails with
 * `BufferTooSmall` (draining nothing) when `cap` is short; `out_len` then
 * holds the size needed.
 *
 * # Safety
 * `chip` must be a live handle, `buf` valid for `cap` bytes, `out_len`
 * valid.
 */
enum RramStatus rram_lane_read(struct RramChip *chip,
                               uint32_t sub_array,
                               uint8_t *buf,
                               size_t cap,
                               size_t *out_len);

/**
 * Two-pass compensated resistance read. `polarity` is 0 forward, 1
 * reverse.
 *
 * # Safety
 * `chip` must be a live handle and `out_m` valid.
 */
enum RramStatus rram_read_resistance(struct RramChip *chip,
                                     uint32_t sub_array,
                                     uint32_t row,
                                     uint32_t col,
                                     double v_read,
                                     uint32_t polarity,
                                     struct RramMeasurement *out_m);

/**
 * One write pulse solved for `v_dut_volts` across the device. The cell is
 * read first to estimate its resistance.
 *
 * # Safety
 * `chip` must be a live handle; `out_dac_code` null or valid.
 */
enum RramStatus rram_write_pulse(struct RramChip *chip,
                                 uint32_t sub_array,
                                 uint32_t row,
                                 uint32_t col,
                                 double v_dut_volts,
                                 uint32_t polarity,
                                 double width_s,
                                 uint8_t *out_dac_code);

/**
 * Autoranging conversion of a Thevenin source with the chip's bank and
 * ADC settings (null chip: defaults).
 *
 * # Safety
 * `chip` must be null or a live handle; `out_r` valid.
 */
enum RramStatus rram_autorange_convert(const struct RramChip *chip,
                                       double v_open_volts,
                                       double r_source_ohms,
                                       struct RramReadout *out_r);

uint16_t rram_gray_encode(uint16_t n);

uint16_t rram_gray_decode(uint16_t g);

/**
 * Packs a data packet into its 26-bit word.
 *
 * # Safety
 * `p` and `out_word` must be valid.
 */
enum RramStatus rram_packet_pack(const struct RramDataPacket *p, uint32_t *out_word);

/**
 * Unpacks a 26-bit word.
 *
 * # Safety
 * `out_p` must be valid.
 */
enum RramStatus rram_packet_unpack(uint32_t word, struct RramDataPacket *out_p);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RRAMSIM_H */
