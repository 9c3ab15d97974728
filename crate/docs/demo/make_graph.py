#!/usr/bin/env python3
"""Compose graph.json for the demo: two nodes with the assessed (plant) and
declared (market) discrepancy documents embedded inline. Emulator paths are
relative to the graph file, so run this inside the working directory."""
import json
import sys


def main():
    plant_disc = json.load(open("disc_plant.json"))
    market_disc = json.load(open("disc_market.json"))
    graph = {
        "nodes": [
            {
                "name": "plant",
                "emulators": ["em_power.json"],
                "discrepancy": plant_disc,
                "bindings": {
                    "cap": {"kind": "decision", "name": "cap"},
                    "eff": {"kind": "exogenous", "name": "eff"},
                },
            },
            {
                "name": "market",
                "emulators": ["em_profit.json", "em_emissions.json"],
                "discrepancy": market_disc,
                "bindings": {
                    "power": {"kind": "upstream", "node": "plant", "output": "power"},
                    "price": {"kind": "exogenous", "name": "price"},
                },
            },
        ]
    }
    with open("graph.json", "w") as f:
        json.dump(graph, f, indent=2, sort_keys=True)
        f.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
