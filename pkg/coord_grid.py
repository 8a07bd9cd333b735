"""
Coordonnees continues dans [-1, 1]: grilles de centres de pixels, cellules,
depliement 3x3 des features, coins du local ensemble et reechantillonnage
bilineaire.

Une image ou une FeatureMap est un tableau numpy (H, W, D).
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from errors import DomainError, ShapeError

# Ordre fixe des coins du local ensemble
CORNERS = ('tl', 'tr', 'bl', 'br')


@dataclass(frozen=True)
class CoordGrid:
    """Centres des pixels d'une grille height x width."""
    height: int
    width: int
    ys: np.ndarray
    xs: np.ndarray

    @property
    def coords(self) -> np.ndarray:
        """Tableau (H, W, 2) des paires (y, x)."""
        yy, xx = np.meshgrid(self.ys, self.xs, indexing='ij')
        return np.stack([yy, xx], axis=-1)

    def flat(self) -> np.ndarray:
        return self.coords.reshape(-1, 2)


@dataclass(frozen=True)
class Cell:
    """Taille d'un pixel de sortie en coordonnees normalisees."""
    cell_h: float
    cell_w: float

    def as_array(self) -> np.ndarray:
        return np.array([self.cell_h, self.cell_w], dtype=np.float64)


@dataclass
class EnsembleCorners:
    """
    Quatre codes latents entourant chaque requete (ordre tl, tr, bl, br).

    index_y, index_x: (N, 4) indices bornes a la grille
    coords: (N, 4, 2) coordonnees v* des codes
    weights: (N, 4) poids du local ensemble
    """
    index_y: np.ndarray
    index_x: np.ndarray
    coords: np.ndarray
    weights: np.ndarray


def axis_centers(n: int) -> np.ndarray:
    """Centre de l'indice i: -1 + (2i + 1) / n."""
    return -1.0 + (2.0 * np.arange(n) + 1.0) / n


def make_coord_grid(h: int, w: int) -> CoordGrid:
    """Cree la grille des centres de pixels d'une image h x w."""
    if h < 1 or w < 1:
        raise DomainError(f"dimensions de grille invalides: {h}x{w}")
    return CoordGrid(int(h), int(w), axis_centers(h), axis_centers(w))


def cell_of(out_h: int, out_w: int) -> Cell:
    if out_h < 1 or out_w < 1:
        raise DomainError(f"dimensions de sortie invalides: {out_h}x{out_w}")
    return Cell(2.0 / out_h, 2.0 / out_w)


def _clamped(n: int, offset: int) -> np.ndarray:
    return np.clip(np.arange(n) + offset, 0, n - 1)


def feature_unfold(fm: np.ndarray) -> np.ndarray:
    """
    Concatene le voisinage 3x3 de chaque vecteur (bords repliques).

    Ordre des canaux: (k, l) dans {-1, 0, 1}^2 en ordre ligne.
    """
    h, w, _ = fm.shape
    blocks = []
    for k in (-1, 0, 1):
        for l in (-1, 0, 1):
            blocks.append(fm[np.ix_(_clamped(h, k), _clamped(w, l))])
    return np.concatenate(blocks, axis=-1)


def feature_unfold_backward(grad: np.ndarray, depth: int) -> np.ndarray:
    """Transpose de feature_unfold: replie un gradient (H, W, 9D) sur (H, W, D)."""
    h, w, _ = grad.shape
    out = np.zeros((h, w, depth), dtype=grad.dtype)
    pos = 0
    for k in (-1, 0, 1):
        for l in (-1, 0, 1):
            yi = _clamped(h, k)[:, None]
            xi = _clamped(w, l)[None, :]
            np.add.at(out, (yi, xi), grad[:, :, pos * depth:(pos + 1) * depth])
            pos += 1
    return out


def _axis_pair(q: np.ndarray, n: int):
    t = (q + 1.0) * n / 2.0 - 0.5
    i0 = np.floor(t)
    f = t - i0
    i0 = i0.astype(np.int64)
    return np.clip(i0, 0, n - 1), np.clip(i0 + 1, 0, n - 1), 1.0 - f, f


def ensemble_corners(query, grid_h: int, grid_w: int) -> EnsembleCorners:
    """
    Coins du local ensemble pour une ou plusieurs requetes (y, x).

    Le poids du coin t est l'aire du rectangle entre la requete et le coin
    diagonalement oppose, rapportee a l'aire totale. Aux bords, les indices
    sont bornes et les poids restent de somme 1.
    """
    q = np.atleast_2d(np.asarray(query, dtype=np.float64))
    y0, y1, wy0, wy1 = _axis_pair(q[:, 0], grid_h)
    x0, x1, wx0, wx1 = _axis_pair(q[:, 1], grid_w)

    index_y = np.stack([y0, y0, y1, y1], axis=1)
    index_x = np.stack([x0, x1, x0, x1], axis=1)
    weights = np.stack([wy0 * wx0, wy0 * wx1, wy1 * wx0, wy1 * wx1], axis=1)
    cy = axis_centers(grid_h)[index_y]
    cx = axis_centers(grid_w)[index_x]
    return EnsembleCorners(index_y, index_x, np.stack([cy, cx], axis=-1), weights)


def nearest_index(query, grid_h: int, grid_w: int) -> Tuple[np.ndarray, np.ndarray]:
    """Indices (y, x) du code latent le plus proche de chaque requete."""
    q = np.atleast_2d(np.asarray(query, dtype=np.float64))
    iy = np.clip(np.floor((q[:, 0] + 1.0) / 2.0 * grid_h).astype(np.int64), 0, grid_h - 1)
    ix = np.clip(np.floor((q[:, 1] + 1.0) / 2.0 * grid_w).astype(np.int64), 0, grid_w - 1)
    return iy, ix


def governing_codes(out_h: int, out_w: int, grid_h: int, grid_w: int) -> np.ndarray:
    """Indice a plat (iy * grid_w + ix) du code gouvernant chaque pixel de sortie."""
    iy, ix = nearest_index(make_coord_grid(out_h, out_w).flat(), grid_h, grid_w)
    return (iy * grid_w + ix).reshape(out_h, out_w)


def bilinear_taps(n_in: int, n_out: int):
    """Indices sources (i0, i1) et fraction f de chaque position de sortie sur un axe."""
    t = (axis_centers(n_out) + 1.0) * n_in / 2.0 - 0.5
    t = np.clip(t, 0.0, n_in - 1)
    i0 = np.floor(t).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, t - i0


def _resample_axis(img: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    i0, i1, f = bilinear_taps(img.shape[axis], n_out)
    a = np.take(img, i0, axis=axis)
    b = np.take(img, i1, axis=axis)
    shape = [1] * img.ndim
    shape[axis] = n_out
    # forme a + (b - a) f: exacte sur les constantes
    return a + (b - a) * f.reshape(shape)


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """
    Reechantillonnage bilineaire aligne sur les centres de pixels.

    Chaque pixel de sortie lit la source a sa coordonnee [-1, 1]; les
    positions hors grille sont bornees.
    """
    if out_h < 1 or out_w < 1:
        raise DomainError(f"dimensions cibles invalides: {out_h}x{out_w}")
    if img.ndim != 3:
        raise ShapeError(f"image (H, W, C) attendue, recu {img.shape}")
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    out = img if h == out_h else _resample_axis(img, 0, out_h)
    return out if w == out_w else _resample_axis(out, 1, out_w)
