#!/usr/bin/env python3
"""
Generation d'un petit jeu de textures procedurales pour l'entrainement.

Usage:
    python scripts/make_textures.py --out textures/
    python scripts/make_textures.py --out textures/ --size 64 --seed 3
"""

import sys
import os
import argparse

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
from image_io import write_pnm

KINDS = ('flat', 'gradient', 'noise', 'stripes', 'checker', 'composite')


def make_texture(kind, size, rng):
    """Texture (size, size, 3) dans [0, 1]."""
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing='ij')
    color = rng.random(3)
    if kind == 'flat':
        return np.broadcast_to(color, (size, size, 3)).copy()
    if kind == 'gradient':
        angle = rng.uniform(0, np.pi)
        t = np.cos(angle) * yy + np.sin(angle) * xx
        t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
        return t[:, :, None] * color + (1 - t[:, :, None]) * rng.random(3)
    if kind == 'noise':
        return rng.random((size, size, 3))
    if kind == 'stripes':
        period = rng.integers(3, 9)
        t = (np.sin(2 * np.pi * xx * size / period) + 1) / 2
        return t[:, :, None] * color + (1 - t[:, :, None]) * (1 - color)
    if kind == 'checker':
        cell = int(rng.integers(2, 6))
        ii, jj = np.meshgrid(np.arange(size) // cell, np.arange(size) // cell, indexing='ij')
        t = ((ii + jj) % 2).astype(np.float64)
        return t[:, :, None] * color + (1 - t[:, :, None]) * (1 - color)
    # moitie plate, moitie bruitee
    img = np.broadcast_to(color, (size, size, 3)).copy()
    img[:, size // 2:] = rng.random((size, size - size // 2, 3))
    return img


def main():
    parser = argparse.ArgumentParser(description='Textures procedurales')
    parser.add_argument('--out', required=True, help='Dossier de sortie')
    parser.add_argument('--size', type=int, default=48, help='Cote des images (defaut: 48)')
    parser.add_argument('--count', type=int, default=1, help='Images par type (defaut: 1)')
    parser.add_argument('--seed', type=int, default=0)
    args = parser.parse_args()

    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    n = 0
    for kind in KINDS:
        for i in range(args.count):
            write_pnm(make_texture(kind, args.size, rng), os.path.join(args.out, f"{kind}_{i:02d}.ppm"))
            n += 1
    print(f"Termine: {n} textures {args.size}x{args.size} dans {args.out}")


if __name__ == '__main__':
    main()
