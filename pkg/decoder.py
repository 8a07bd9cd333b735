"""
Fonctions de decodage: decodeur vanilla HR-HD, variante coarse-to-fine
(ablation) et decodeur LMF en deux etapes (etape latente puis rendu module).

Les trois partagent le local ensemble et la plomberie de coordonnees.
Le rendu est parallele sur les pixels par blocs de taille fixe: le resultat
ne depend pas du nombre de workers.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from coord_grid import Cell, axis_centers, cell_of, ensemble_corners, feature_unfold, make_coord_grid, nearest_index
from cost_model import MacCounter
from encoder import encode
from errors import DataError, DomainError, ShapeError
from models import LmfModel
from tensor_core import FilmParams, MlpParams, mlp_forward, mlp_forward_modulated

logger = logging.getLogger(__name__)

DEFAULT_CHUNK = 4096


@dataclass
class LatentModulation:
    """Modulation d'un code latent: FiLM (alpha, beta) et code compresse z_c."""
    film: FilmParams
    z_c: np.ndarray


@dataclass
class ModulationGrid:
    """
    Modulations de tous les codes latents, a plat en ordre ligne.

    alpha[k], beta[k]: (H*W, D_H); z_c: (H*W, D_c)
    """
    height: int
    width: int
    alpha: List[np.ndarray]
    beta: List[np.ndarray]
    z_c: np.ndarray

    def at(self, i: int, j: int) -> LatentModulation:
        idx = i * self.width + j
        return LatentModulation(
            FilmParams([a[idx] for a in self.alpha], [b[idx] for b in self.beta]),
            self.z_c[idx])

    def gather(self, index: np.ndarray) -> Tuple[FilmParams, np.ndarray]:
        return (FilmParams([a[index] for a in self.alpha], [b[index] for b in self.beta]),
                self.z_c[index])

    def shift_stack(self) -> np.ndarray:
        """Decalages concatenes (H*W, somme des D_H)."""
        return np.concatenate(self.beta, axis=1)


@dataclass
class RenderRequest:
    """Taille cible, masque de pixels optionnel et tampon preexistant."""
    out_h: int
    out_w: int
    mask: Optional[np.ndarray] = None
    buffer: Optional[np.ndarray] = None

    def pixels(self) -> np.ndarray:
        if self.mask is None:
            return np.arange(self.out_h * self.out_w)
        if self.mask.shape != (self.out_h, self.out_w):
            raise ShapeError(f"masque {self.mask.shape} != cible {(self.out_h, self.out_w)}")
        return np.flatnonzero(self.mask)


@dataclass
class CornerQuery:
    """Un coin du local ensemble pour un lot de requetes."""
    index: np.ndarray   # (N,) indice a plat du code
    extra: np.ndarray   # (N, 2|4) coordonnee relative (+ cellule relative)
    weight: np.ndarray  # (N,)


def output_size(h: int, w: int, s: float) -> Tuple[int, int]:
    """round(s * extent), demi-entiers arrondis vers le haut."""
    return int(np.floor(s * h + 0.5)), int(np.floor(s * w + 0.5))


def corner_queries(coords: np.ndarray, cell: Optional[Cell], grid_h: int, grid_w: int,
                   local_ensemble: bool = True) -> List[CornerQuery]:
    """
    Coins, entrees relatives et poids pour chaque requete.

    Coordonnee et cellule relatives sont multipliees par l'etendue de la grille
    latente (grid_h, grid_w).
    """
    scale = np.array([grid_h, grid_w], dtype=np.float64)
    rel_cell = None
    if cell is not None:
        rel_cell = np.broadcast_to(cell.as_array() * scale, (coords.shape[0], 2))

    def build(iy, ix, v, weight):
        extra = (coords - v) * scale
        if rel_cell is not None:
            extra = np.concatenate([extra, rel_cell], axis=1)
        return CornerQuery(iy * grid_w + ix, extra, weight)

    if not local_ensemble:
        iy, ix = nearest_index(coords, grid_h, grid_w)
        v = np.stack([axis_centers(grid_h)[iy], axis_centers(grid_w)[ix]], axis=1)
        return [build(iy, ix, v, np.ones(coords.shape[0]))]

    corners = ensemble_corners(coords, grid_h, grid_w)
    return [build(corners.index_y[:, t], corners.index_x[:, t], corners.coords[:, t],
                  corners.weights[:, t]) for t in range(4)]


def _chunks(n: int, size: int):
    return [(start, min(start + size, n)) for start in range(0, n, size)]


def _run_chunks(n: int, job: Callable[[int, int, MacCounter], np.ndarray], counter, stage: str,
                workers: int, chunk: int) -> np.ndarray:
    """Execute job sur des blocs fixes et fusionne les compteurs dans l'ordre."""
    spans = _chunks(n, chunk)

    def run(span):
        local = MacCounter()
        with local.stage(stage):
            values = job(span[0], span[1], local)
        return values, local

    if workers > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(run, spans))
    else:
        results = [run(span) for span in spans]

    if counter is not None:
        for _, local in results:
            counter.merge(local)
    if not results:
        return np.zeros((0, 0))
    return np.concatenate([values for values, _ in results], axis=0)


def _ensemble(queries: List[CornerQuery], predict: Callable[[CornerQuery], np.ndarray],
              counter) -> np.ndarray:
    out = None
    for q in queries:
        pred = predict(q)
        term = q.weight[:, None] * pred
        out = term if out is None else out + term
        if counter is not None:
            counter.add_ensemble(pred.size)
    return out


def _check_fm(fm: np.ndarray):
    if fm.ndim != 3:
        raise ShapeError(f"FeatureMap (H, W, D) attendue, recu {fm.shape}")
    if not np.all(np.isfinite(fm)):
        raise DataError("FeatureMap contenant des valeurs non finies")


# =====================================================
# DECODEUR VANILLA ET COARSE-TO-FINE
# =====================================================

def decode_vanilla(fm: np.ndarray, out_h: int, out_w: int, theta: MlpParams, counter=None,
                   cell_decode: bool = True, local_ensemble: bool = True,
                   workers: int = 1, chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    """
    Decodeur HR-HD: un MLP evalue sur (code deplie, coord relative, cellule
    relative) pour chaque coin de chaque pixel de sortie.
    """
    _check_fm(fm)
    gh, gw, d = fm.shape
    expected = 9 * d + (4 if cell_decode else 2)
    if theta.in_dim != expected:
        raise ShapeError(f"entree du MLP {theta.in_dim} != {expected}", layer=0)
    codes = feature_unfold(fm).reshape(gh * gw, 9 * d)
    coords = make_coord_grid(out_h, out_w).flat()
    cell = cell_of(out_h, out_w) if cell_decode else None

    def job(a, b, local):
        queries = corner_queries(coords[a:b], cell, gh, gw, local_ensemble)
        return _ensemble(
            queries,
            lambda q: mlp_forward(theta, np.concatenate([codes[q.index], q.extra], axis=1), local),
            local)

    out = _run_chunks(len(coords), job, counter, 'vanilla', workers, chunk)
    if counter is not None:
        counter.rendered_pixels += len(coords)
    return out.reshape(out_h, out_w, theta.out_dim)


def decode_c2f(fm: np.ndarray, out_h: int, out_w: int, theta_l: MlpParams, theta_r: MlpParams,
               counter=None, cell_decode: bool = True, local_ensemble: bool = True,
               workers: int = 1, chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    """
    Variante coarse-to-fine: la sortie du MLP latent (une fois par code) est
    concatenee, sans modulation, a l'entree du MLP de rendu.
    """
    _check_fm(fm)
    gh, gw, d = fm.shape
    if theta_l.in_dim != 9 * d:
        raise ShapeError(f"entree du MLP latent {theta_l.in_dim} != {9 * d}", layer=0)
    expected = theta_l.out_dim + (4 if cell_decode else 2)
    if theta_r.in_dim != expected:
        raise ShapeError(f"entree du MLP de rendu {theta_r.in_dim} != {expected}", layer=0)
    codes = feature_unfold(fm).reshape(gh * gw, 9 * d)
    if counter is not None:
        with counter.stage('latent'):
            latent = mlp_forward(theta_l, codes, counter)
    else:
        latent = mlp_forward(theta_l, codes)
    coords = make_coord_grid(out_h, out_w).flat()
    cell = cell_of(out_h, out_w) if cell_decode else None

    def job(a, b, local):
        queries = corner_queries(coords[a:b], cell, gh, gw, local_ensemble)
        return _ensemble(
            queries,
            lambda q: mlp_forward(theta_r, np.concatenate([latent[q.index], q.extra], axis=1), local),
            local)

    out = _run_chunks(len(coords), job, counter, 'render', workers, chunk)
    if counter is not None:
        counter.rendered_pixels += len(coords)
    return out.reshape(out_h, out_w, theta_r.out_dim)


# =====================================================
# LMF: ETAPE LATENTE ET RENDU MODULE
# =====================================================

def latent_inputs(model: LmfModel, fm_unfolded: np.ndarray, cell: Cell) -> np.ndarray:
    """Entree du MLP latent: code deplie (+ cellule relative a la grille)."""
    gh, gw, depth = fm_unfolded.shape
    codes = fm_unfolded.reshape(gh * gw, depth)
    if not model.cell_decode:
        return codes
    rel_cell = cell.as_array() * np.array([gh, gw], dtype=np.float64)
    return np.concatenate([codes, np.broadcast_to(rel_cell, (gh * gw, 2))], axis=1)


def split_latent(model: LmfModel, raw: np.ndarray):
    """
    Decoupe la sortie du MLP latent dans l'ordre [a1, b1, ..., aK, bK, z_c].

    Returns:
        (liste alpha, liste beta, z_c)
    """
    if raw.shape[-1] != model.d_m + model.d_c:
        raise ShapeError(f"sortie latente {raw.shape[-1]} != {model.d_m + model.d_c}")
    alpha, beta = [], []
    pos = 0
    for k in range(model.k):
        width = model.render_mlp.hidden_width(k)
        a = raw[:, pos:pos + width]
        b = raw[:, pos + width:pos + 2 * width]
        if model.modulation == 'shift_only':
            a = np.zeros_like(a)
        elif model.modulation == 'scale_only':
            b = np.zeros_like(b)
        alpha.append(a)
        beta.append(b)
        pos += 2 * width
    return alpha, beta, raw[:, pos:]


def latent_stage(model: LmfModel, fm_unfolded: np.ndarray, cell: Cell, counter=None,
                 record: bool = False):
    """
    Etape 1: une modulation par code latent, calculee une seule fois quelle
    que soit la resolution de sortie.

    Returns:
        ModulationGrid, ou (ModulationGrid, sortie brute, bande) si record est vrai
    """
    gh, gw, depth = fm_unfolded.shape
    expected = model.latent_mlp.in_dim - (2 if model.cell_decode else 0)
    if depth != expected:
        raise ShapeError(f"profondeur depliee {depth} != {expected}")
    inputs = latent_inputs(model, fm_unfolded, cell)
    if counter is not None:
        with counter.stage('latent'):
            result = mlp_forward(model.latent_mlp, inputs, counter, record=record)
    else:
        result = mlp_forward(model.latent_mlp, inputs, record=record)
    raw, tape = result if record else (result, None)
    alpha, beta, z_c = split_latent(model, raw)
    grid = ModulationGrid(gh, gw, alpha, beta, z_c)
    return (grid, raw, tape) if record else grid


def render_rows(model: LmfModel, mods: ModulationGrid, coords: np.ndarray, cell: Cell,
                counter=None) -> np.ndarray:
    """Rendu module des requetes coords (N, 2), local ensemble compris."""
    queries = corner_queries(coords, cell if model.cell_decode else None,
                             mods.height, mods.width, model.local_ensemble)

    def predict(q):
        film, z_c = mods.gather(q.index)
        inp = np.concatenate([z_c, q.extra], axis=1)
        return mlp_forward_modulated(model.render_mlp, inp, film, counter)

    return _ensemble(queries, predict, counter)


def render_stage(model: LmfModel, mods: ModulationGrid, req: RenderRequest, counter=None,
                 workers: int = 1, chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    """
    Etape 2: rend les pixels masques; les autres pixels du tampon sont intacts.
    """
    pixels = req.pixels()
    channels = model.channels
    if req.buffer is not None:
        if req.buffer.shape != (req.out_h, req.out_w, channels):
            raise ShapeError(f"tampon {req.buffer.shape} incompatible")
        out = req.buffer.copy()
    else:
        out = np.zeros((req.out_h, req.out_w, channels))
    if counter is not None:
        counter.rendered_pixels += len(pixels)
    if len(pixels) == 0:
        return out

    coords = make_coord_grid(req.out_h, req.out_w).flat()[pixels]
    cell = cell_of(req.out_h, req.out_w)
    values = _run_chunks(
        len(pixels), lambda a, b, local: render_rows(model, mods, coords[a:b], cell, local),
        counter, 'render', workers, chunk)
    flat = out.reshape(-1, channels)
    flat[pixels] = values
    return out


def check_image(img: np.ndarray):
    if img.ndim != 3:
        raise ShapeError(f"image (H, W, C) attendue, recu {img.shape}")
    if not np.all(np.isfinite(img)):
        raise DataError("image contenant des valeurs non finies")


def prepare(model: LmfModel, img: np.ndarray, counter=None) -> np.ndarray:
    """Encode puis deplie: entree commune de toutes les etapes latentes."""
    check_image(img)
    return feature_unfold(encode(model.encoder, img, counter))


def upsample(model: LmfModel, img: np.ndarray, s: float, counter=None, workers: int = 1,
             chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    """
    Agrandit une image d'un facteur s >= 1 avec LMF: encodage, depliement,
    etape latente a la cellule cible, rendu complet.
    """
    if not s >= 1.0:
        raise DomainError(f"facteur d'echelle < 1 refuse: {s}")
    h, w = img.shape[:2]
    out_h, out_w = output_size(h, w, s)
    unfolded = prepare(model, img, counter)
    mods = latent_stage(model, unfolded, cell_of(out_h, out_w), counter)
    logger.debug(f"[LMF] {h}x{w} -> {out_h}x{out_w}")
    return render_stage(model, mods, RenderRequest(out_h, out_w), counter, workers, chunk)


def upsample_vanilla(model: LmfModel, img: np.ndarray, s: float, theta: MlpParams,
                     counter=None, workers: int = 1) -> np.ndarray:
    if not s >= 1.0:
        raise DomainError(f"facteur d'echelle < 1 refuse: {s}")
    check_image(img)
    out_h, out_w = output_size(img.shape[0], img.shape[1], s)
    fm = encode(model.encoder, img, counter)
    return decode_vanilla(fm, out_h, out_w, theta, counter, model.cell_decode,
                          model.local_ensemble, workers)


def upsample_c2f(model: LmfModel, img: np.ndarray, s: float, theta_l: MlpParams,
                 theta_r: MlpParams, counter=None, workers: int = 1) -> np.ndarray:
    if not s >= 1.0:
        raise DomainError(f"facteur d'echelle < 1 refuse: {s}")
    check_image(img)
    out_h, out_w = output_size(img.shape[0], img.shape[1], s)
    fm = encode(model.encoder, img, counter)
    return decode_c2f(fm, out_h, out_w, theta_l, theta_r, counter, model.cell_decode,
                      model.local_ensemble, workers)
