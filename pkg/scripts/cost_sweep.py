#!/usr/bin/env python3
"""
Tableau des multiplications analytiques LIIF / LM-LIIF sur une grille (h, w, s).

Usage:
    python scripts/cost_sweep.py
    python scripts/cost_sweep.py --scales 1,2,4,8,16 --sizes 1,7x5,48 --csv sweep.csv
"""

import sys
import os
import argparse

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import pandas as pd
from cost_model import PUBLISHED_DIMS, macs_lmf, macs_vanilla


def parse_sizes(raw):
    sizes = []
    for item in raw.split(','):
        h, _, w = item.partition('x')
        sizes.append((int(h), int(w or h)))
    return sizes


def sweep(sizes, scales):
    rows = []
    for h, w in sizes:
        for s in scales:
            vanilla = macs_vanilla(PUBLISHED_DIMS, h, w, s)
            lmf = macs_lmf(PUBLISHED_DIMS, h, w, s)
            rows.append({'h': h, 'w': w, 's': s, 'liif': vanilla, 'lm_liif': lmf,
                         'reduction_pct': 100.0 * (1 - lmf / vanilla)})
    return pd.DataFrame(rows)


def main():
    parser = argparse.ArgumentParser(description='Balayage du modele de cout')
    parser.add_argument('--scales', default='1,2,4,8,16')
    parser.add_argument('--sizes', default='1,7x5,48')
    parser.add_argument('--csv', help='Ecrire le tableau en CSV')
    args = parser.parse_args()

    table = sweep(parse_sizes(args.sizes), [int(s) for s in args.scales.split(',')])
    print(table.to_string(index=False, formatters={'reduction_pct': '{:.4f}'.format}))
    if args.csv:
        table.to_csv(args.csv, index=False)
        print(f"Ecrit: {args.csv}")


if __name__ == '__main__':
    main()
