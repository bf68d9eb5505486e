"""Independent oracle for the autorange converter and ADC.

Exact rational arithmetic, written from the chain's definition only:
first stage k (smallest resistor first) with G * i_k * r_k > threshold,
else the last stage; the 12-bit ADC clamps to [0.1, 1.7] V and rounds
half up. Vectors closer than MARGIN to a comparator or rounding edge are
skipped so that float evaluation cannot land on the other side.

    python3 gen_autorange_golden.py > autorange_golden.txt
"""

import random
from fractions import Fraction as F

R = [F(25), F(250), F(2500), F(25000), F(250000)]
G = F(32)
V_LO, V_HI = F(1, 10), F(17, 10)
LSB = (V_HI - V_LO) / 4095
THRESHOLD = V_LO + 153 * LSB
MARGIN = F(1, 10**6)


def convert(v_open, r_src):
    stage, v_amp = len(R) - 1, None
    for k, r in enumerate(R):
        v_amp = G * v_open / (r_src + r) * r
        if abs(v_amp - THRESHOLD) < MARGIN:
            return None
        if v_amp > THRESHOLD:
            stage = k
            break
    v = min(max(v_amp, V_LO), V_HI)
    x = (v - V_LO) / LSB + F(1, 2)
    if V_LO < v_amp < V_HI and abs(x - round(x)) < MARGIN:
        return None
    return 1 << stage, min(int(x), 4095)


def sig(x):
    return F(f"{x:.6e}")


def main():
    rng = random.Random(20240611)
    print("# v_open_volts r_source_ohms gain_sel adc_code")
    n = 0
    while n < 2000:
        v = sig(10 ** rng.uniform(-3, 0.5))
        r = sig(10 ** rng.uniform(2, 9))
        out = convert(v, r)
        if out is None:
            continue
        print(f"{float(v):.6e} {float(r):.6e} 0x{out[0]:02x} {out[1]}")
        n += 1


if __name__ == "__main__":
    main()
