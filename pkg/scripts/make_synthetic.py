#!/usr/bin/env python3
"""Write a synthetic FASTA + metadata + schema bundle for trying the CLI.

    python scripts/make_synthetic.py demo --n 300
    mcnn ingest --ha demo/ha.fasta --na demo/na.fasta --metadata demo/metadata.tsv \
        --schema demo/schema.json --out demo/curated.ndjson
"""

import argparse
import json
from pathlib import Path

from mcnn.synthetic import MotifBank, make_corpus, synthetic_schema


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawTextHelpFormatter)
    ap.add_argument("out_dir")
    ap.add_argument("--n", type=int, default=300, help="number of strains")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--noise", type=float, default=0.1, help="motif mutation rate")
    ap.add_argument("--first-year", type=int, default=2000,
                    help="years cycle from here through 2022 (the last dated era year)")
    args = ap.parse_args()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = make_corpus(args.n, seed=args.seed, bank=MotifBank.create(args.seed),
                          noise=args.noise, prefix="demo")
    with open(out / "ha.fasta", "w") as ha, open(out / "na.fasta", "w") as na, \
            open(out / "metadata.tsv", "w") as meta:
        meta.write("strain_id\tsource\thost\tsubtype\tyear\tcompleteness\n")
        for i, r in enumerate(records):
            ha.write(f">{r.strain_id}|IRD\n{r.ha_seq}\n")
            na.write(f">{r.strain_id}|IRD\n{r.na_seq}\n")
            year = args.first_year + i % (2023 - args.first_year)
            # every tenth strain lands in the incomplete era
            completeness = "incomplete" if i % 10 == 9 else "complete"
            meta.write(f"{r.strain_id}\tIRD\t{r.host_raw}\t{r.ha_subtype}{r.na_subtype}\t"
                       f"{year}\t{completeness}\n")
    (out / "schema.json").write_text(json.dumps(synthetic_schema().to_dict(), indent=1))
    print(f"wrote {len(records)} strains to {out}")


if __name__ == "__main__":
    main()
