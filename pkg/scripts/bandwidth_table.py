"""Print parameters and kilobits exchanged per client per server epoch for each layer split."""

import argparse
import json

from plfl.federation import bandwidth_report
from plfl.model import PARTITION_IDS, ModelConfig, count_params


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--json", action="store_true", help="emit JSON instead of a table")
    args = ap.parse_args()

    config = ModelConfig()
    rows = [bandwidth_report(p, config).as_dict() for p in PARTITION_IDS]
    if args.json:
        print(json.dumps({"counts": count_params(config), "bandwidth": rows}, indent=2))
        return
    print("block sizes:", count_params(config))
    print(f"{'configuration':<18} {'params':>8} {'kb':>6}")
    for r in rows:
        print(f"{r['algorithm']:<18} {r['parameters']:>8} {r['kilobits']:>6}")


if __name__ == "__main__":
    main()
