#!/usr/bin/env python3
"""Demo simulators speaking the line protocol: one whitespace-separated
line of inputs on stdin, one line of outputs on stdout, exit on EOF.

    simulator.py plant    inputs: cap eff      outputs: power
    simulator.py market   inputs: power price  outputs: profit emissions
"""
import sys


def plant(cap, eff):
    power = eff * cap - 0.06 * cap * cap
    return [power]


def market(power, price):
    profit = power * price - 0.18 * power * power - 0.3
    emissions = 0.25 * power + 0.08 * power * power
    return [profit, emissions]


MODELS = {"plant": plant, "market": market}


def main():
    if len(sys.argv) != 2 or sys.argv[1] not in MODELS:
        sys.stderr.write("usage: simulator.py {plant|market}\n")
        return 2
    model = MODELS[sys.argv[1]]
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        values = [float(v) for v in line.split()]
        out = model(*values)
        print(" ".join(repr(v) for v in out), flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
