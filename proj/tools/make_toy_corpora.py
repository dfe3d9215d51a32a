#!/usr/bin/env python3
# Copyright (c) 2026, The rcpmerge Authors
# SPDX-License-Identifier: Apache-2.0
#
# Writes the toy corpora under data/. Output is a pure function of --seed.

import argparse
import pathlib
import random

DRUGS = ["amoxicillin", "ibuprofen", "metformin", "insulin", "heparin", "aspirin", "warfarin", "lisinopril"]
SIGNS = ["fever", "cough", "rash", "edema", "nausea", "fatigue", "headache", "tachycardia"]
ORGANS = ["liver", "kidney", "lung", "heart", "skin", "colon"]
WORDS = ["the", "a", "one", "small", "old", "red", "green", "house", "river", "tree", "road", "light",
         "walks", "sees", "finds", "near", "over", "under", "and", "then", "with", "day", "night", "cat", "dog"]


def domain_line(rng):
    k = rng.randrange(3)
    if k == 0:
        return f"patient {rng.randrange(10, 99)} has {rng.choice(SIGNS)}; give {rng.randrange(1, 9) * 10} mg {rng.choice(DRUGS)}."
    if k == 1:
        return f"{rng.choice(DRUGS)} treats {rng.choice(SIGNS)} of the {rng.choice(ORGANS)}."
    return f"dx: {rng.choice(SIGNS)} and {rng.choice(SIGNS)}, check {rng.choice(ORGANS)}."


def reasoning_line(rng):
    a, b = rng.randrange(1, 10), rng.randrange(1, 10)
    k = rng.randrange(3)
    if k == 0:
        return f"{a}+{b}={a + b}, so {a + b}-{b}={a}."
    if k == 1:
        c = rng.randrange(2, 5)
        return f"{a}*{c}={a * c}; {a * c}+{b}={a * c + b}. answer {a * c + b}."
    return f"if x={a} then x+{b}={a + b} and 2x={2 * a}."


def base_line(rng):
    n = rng.randrange(6, 11)
    return " ".join(rng.choice(WORDS) for _ in range(n)) + "."


def write(path, gen, rng, n):
    path.write_text("".join(gen(rng) + "\n" for _ in range(n)), encoding="utf-8")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data")
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = random.Random(args.seed)
    write(out / "base.txt", base_line, rng, 200)
    write(out / "domain_a.txt", domain_line, rng, 200)
    write(out / "reasoning_b.txt", reasoning_line, rng, 200)
    write(out / "eval_a.txt", domain_line, rng, 60)
    write(out / "eval_b.txt", reasoning_line, rng, 60)
    write(out / "calib_a.txt", domain_line, rng, 32)
    write(out / "calib_b.txt", reasoning_line, rng, 32)


if __name__ == "__main__":
    main()
