"""Independent oracle for frame assembly and the lane bitstream.

Builds frames from the layout definition alone (packet fields, header
word, checksum slot, MSB-first bit pairs after one lead-in cycle) and
prints, per frame, the inputs and the expected 443-symbol stream.

    python3 gen_frame_golden.py > frame_golden.txt
"""

import random


def packet(adc, gain, col, status):
    return adc * 2**14 + gain * 2**9 + col * 2**5 + status


def fold(words):
    acc = 0
    for w in words:
        acc ^= (w % 2**10) ^ ((w >> 10) % 2**10) ^ ((w >> 20) % 2**6)
    return acc


def pairs(word):
    bits = format(word, "026b")
    return [int(bits[i : i + 2], 2) for i in range(0, 26, 2)]


def main():
    rng = random.Random(7)
    print("# frame <counter> <sub_array> <reg_checksum>")
    print("# then 32 lines: <adc> <gain_sel> <col> <status>, then: stream <443 digits>")
    for _ in range(6):
        counter, sub, checksum = rng.randrange(2**16), rng.randrange(4), rng.randrange(2**16)
        slots = []
        for _ in range(32):
            valid = rng.random() < 0.8
            slots.append(
                (
                    rng.randrange(4096),
                    1 << rng.randrange(5) if valid else 0,
                    rng.randrange(16),
                    (16 if valid else 0) + rng.randrange(16) % 4 + (rng.randrange(2) * 4 if valid else 0),
                )
            )
        data = [packet(*s) for s in slots]
        n_valid = sum(1 for s in slots if s[3] & 16)
        header = counter * 2**10 + sub * 2**8 + n_valid
        entries = data + [header, checksum * 2**10 + fold(data)]
        print(f"frame {counter} {sub} {checksum}")
        for s in slots:
            print(*s)
        stream = [0] + [p for w in entries for p in pairs(w)]
        print("stream " + "".join(map(str, stream)))


if __name__ == "__main__":
    main()
