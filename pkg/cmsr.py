"""
Rendu multi-echelle controlable (CMSR).

- statistique d'intensite de modulation par code latent (moyenne de |beta|)
- construction de la table Scale2Mods (echelle -> intervalle de moyennes)
- ordonnanceur de rendu: chaque code est rendu a sa plus petite echelle
  suffisante, le reste de l'image est obtenu par interpolation bilineaire
- serialisation texte de la table
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from coord_grid import bilinear_resize, bilinear_taps, cell_of, governing_codes
from decoder import (DEFAULT_CHUNK, ModulationGrid, RenderRequest, check_image, latent_stage,
                     output_size, prepare, render_stage)
from errors import DomainError, FormatError, ShapeError, UnsupportedVersionError
from models import LmfModel

logger = logging.getLogger(__name__)

TABLE_MAGIC = 'LMF-S2M'
TABLE_VERSION = 1
COMPOSITE_MODES = ('chain', 'direct')


# =====================================================
# INTENSITE DE MODULATION
# =====================================================

@dataclass
class ModulationMeanMap:
    """Moyenne brute de |beta| par code et sa version normalisee dans [0, 1]."""
    raw: np.ndarray
    normalized: np.ndarray
    calib: Tuple[float, float]
    degenerate: bool = False


def raw_shift_means(mods: ModulationGrid) -> np.ndarray:
    """Moyenne de |beta| sur toutes les couches modulees et tous les canaux, (H, W)."""
    return np.abs(mods.shift_stack()).mean(axis=1).reshape(mods.height, mods.width)


def normalize_means(raw: np.ndarray, calib: Tuple[float, float]) -> Tuple[np.ndarray, bool]:
    lo, hi = calib
    if not hi > lo:
        return np.zeros_like(raw), True
    return np.clip((raw - lo) / (hi - lo), 0.0, 1.0), False


def shift_modulation_means(mods: ModulationGrid,
                           calib: Optional[Tuple[float, float]] = None) -> ModulationMeanMap:
    """
    Carte d'intensite de modulation. Sans calibration fournie, le min et le
    max de la carte elle-meme servent de calibration.
    """
    raw = raw_shift_means(mods)
    if calib is None:
        calib = (float(raw.min()), float(raw.max()))
    normalized, degenerate = normalize_means(raw, calib)
    if degenerate:
        logger.warning(f"[CMSR] calibration degeneree {calib}: carte nulle")
    return ModulationMeanMap(raw, normalized, (float(calib[0]), float(calib[1])), degenerate)


def filtered_mse(a: np.ndarray, b: np.ndarray, mask: Optional[np.ndarray] = None) -> Tuple[float, bool]:
    """
    Erreur quadratique moyenne sur les pixels masques et tous les canaux.

    Returns:
        (mse, masque vide); un masque vide donne (0.0, True)
    """
    if a.shape != b.shape:
        raise ShapeError(f"dimensions differentes: {a.shape} / {b.shape}")
    if mask is None:
        mask = np.ones(a.shape[:2], dtype=bool)
    if mask.shape != a.shape[:2]:
        raise ShapeError(f"masque {mask.shape} != image {a.shape[:2]}")
    if not mask.any():
        return 0.0, True
    diff = a[mask] - b[mask]
    return float(np.mean(diff * diff)), False


def code_complexity(img_hr: np.ndarray, grid_h: int, grid_w: int) -> np.ndarray:
    """Variance locale de l'image HR sur la zone gouvernee par chaque code, (H, W)."""
    out_h, out_w, channels = img_hr.shape
    gov = governing_codes(out_h, out_w, grid_h, grid_w).ravel()
    n = grid_h * grid_w
    counts = np.bincount(gov, minlength=n).astype(np.float64)
    counts[counts == 0] = 1.0
    var = np.zeros(n)
    for c in range(channels):
        x = img_hr[:, :, c].ravel()
        mean = np.bincount(gov, weights=x, minlength=n) / counts
        sq = np.bincount(gov, weights=x * x, minlength=n) / counts
        var += np.maximum(sq - mean * mean, 0.0)
    return (var / channels).reshape(grid_h, grid_w)


def spearman(a, b) -> float:
    """Correlation de rang de Spearman (rangs moyens en cas d'egalite)."""
    ra = pd.Series(np.ravel(a)).rank().to_numpy()
    rb = pd.Series(np.ravel(b)).rank().to_numpy()
    if ra.std() == 0 or rb.std() == 0:
        return 0.0
    return float(np.corrcoef(ra, rb)[0, 1])


# =====================================================
# TABLE SCALE2MODS
# =====================================================

@dataclass
class Scale2ModsTable:
    """
    Intervalles [m_min, m_max) de moyennes normalisees par echelle.

    Un intervalle dont m_max atteint 1 est ferme a droite.
    """
    scales: List[float]
    m_min: List[float]
    m_max: List[float]
    tau: float
    u: float
    calib: Tuple[float, float]

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not (len(self.scales) == len(self.m_min) == len(self.m_max)) or not self.scales:
            raise ShapeError("table Scale2Mods incomplete")
        if any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise DomainError(f"echelles non strictement croissantes: {self.scales}")
        if self.m_min[0] != 0.0:
            raise DomainError("le premier intervalle doit commencer a 0")
        for k in range(len(self.scales)):
            if self.m_min[k] > self.m_max[k]:
                raise DomainError(f"intervalle inverse pour s={self.scales[k]}")
            if k + 1 < len(self.scales) and self.m_min[k + 1] != self.m_max[k]:
                raise DomainError(f"table non contigue entre s={self.scales[k]} et s={self.scales[k + 1]}")
        if self.m_max[-1] > 1.0:
            raise DomainError("moyenne couverte > 1")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'scale': self.scales, 'm_min': self.m_min, 'm_max': self.m_max})


def assign_scales(normalized: np.ndarray, table: Scale2ModsTable) -> np.ndarray:
    """Indice d'echelle de chaque moyenne, -1 si aucune echelle ne la couvre."""
    m = np.asarray(normalized, dtype=np.float64)
    out = np.full(m.shape, -1, dtype=np.int64)
    for k in range(len(table.scales) - 1, -1, -1):
        lo, hi = table.m_min[k], table.m_max[k]
        if not hi > lo:
            continue
        inside = (m >= lo) & ((m < hi) | ((hi >= 1.0) & (m <= hi)))
        out[inside] = k
    return out


def query_min_scale(table: Scale2ModsTable, m: float) -> Optional[float]:
    """Plus petite echelle dont l'intervalle contient m; None = echelle cible."""
    k = int(assign_scales(np.array([m]), table)[0])
    return None if k < 0 else table.scales[k]


def bucket_index(m: np.ndarray, u: float) -> np.ndarray:
    """Seau l de centre l*u, demi-ouvert [l*u - u/2, l*u + u/2)."""
    n_buckets = int(round(1.0 / u)) + 1
    return np.clip(np.floor(np.asarray(m) / u + 0.5).astype(np.int64), 0, n_buckets - 1)


@dataclass
class BucketErrors:
    """Sommes d'erreurs par (echelle, seau) cumulees sur le corpus."""
    scales: List[float]
    u: float
    calib: Tuple[float, float]
    sums: np.ndarray     # (n_scales, n_buckets)
    counts: np.ndarray   # (n_buckets,)
    degenerate: bool = False

    @property
    def n_buckets(self) -> int:
        return self.counts.shape[0]

    @property
    def mse(self) -> np.ndarray:
        """MSE filtree par (echelle, seau), nan pour un seau vide."""
        with np.errstate(invalid='ignore', divide='ignore'):
            return np.where(self.counts > 0, self.sums / np.maximum(self.counts, 1), np.nan)


@dataclass
class _ImageMeasure:
    raw: np.ndarray          # moyennes brutes par code
    gov: np.ndarray          # code gouvernant de chaque pixel a s_K
    errors: np.ndarray       # (n_scales, K_h, K_w) erreur par pixel


def _measure_image(model: LmfModel, img: np.ndarray, scales: Sequence[float], workers: int,
                   chunk: int) -> _ImageMeasure:
    h, w = img.shape[:2]
    top_h, top_w = output_size(h, w, scales[-1])
    unfolded = prepare(model, img)
    mods_top = latent_stage(model, unfolded, cell_of(top_h, top_w))
    reference = render_stage(model, mods_top, RenderRequest(top_h, top_w), workers=workers,
                             chunk=chunk)
    errors = []
    for s in scales:
        out_h, out_w = output_size(h, w, s)
        if (out_h, out_w) == (top_h, top_w):
            errors.append(np.zeros((top_h, top_w)))
            continue
        mods = latent_stage(model, unfolded, cell_of(out_h, out_w))
        coarse = render_stage(model, mods, RenderRequest(out_h, out_w), workers=workers, chunk=chunk)
        diff = bilinear_resize(coarse, top_h, top_w) - reference
        errors.append(np.mean(diff * diff, axis=2))
    return _ImageMeasure(raw_shift_means(mods_top), governing_codes(top_h, top_w, h, w),
                         np.stack(errors))


def measure_bucket_errors(model: LmfModel, images: Sequence[np.ndarray], scales: Sequence[float],
                          u: float, workers: int = 1, chunk: int = DEFAULT_CHUNK) -> BucketErrors:
    """
    Mesure, pour chaque echelle et chaque seau de moyenne, l'erreur entre le
    rendu complet a s_K et le rendu a s_k ramene a s_K par interpolation
    bilineaire, sur les pixels dont le code gouvernant tombe dans le seau.
    """
    scales = [float(s) for s in scales]
    if not images:
        raise DomainError("liste d'images vide")
    if any(b <= a for a, b in zip(scales, scales[1:])) or not scales or scales[0] < 1.0:
        raise DomainError(f"echelles invalides: {scales}")
    if not 0.0 < u <= 1.0:
        raise DomainError(f"pas d'echantillonnage invalide: {u}")
    for img in images:
        check_image(img)

    if workers > 1 and len(images) > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            measures = list(executor.map(lambda im: _measure_image(model, im, scales, 1, chunk), images))
    else:
        measures = [_measure_image(model, im, scales, workers, chunk) for im in images]

    calib = (float(min(m.raw.min() for m in measures)), float(max(m.raw.max() for m in measures)))
    n_buckets = int(round(1.0 / u)) + 1
    sums = np.zeros((len(scales), n_buckets))
    counts = np.zeros(n_buckets)
    degenerate = False
    for m in measures:
        normalized, degenerate = normalize_means(m.raw, calib)
        buckets = bucket_index(normalized.ravel()[m.gov.ravel()], u)
        counts += np.bincount(buckets, minlength=n_buckets)
        for k in range(len(scales)):
            sums[k] += np.bincount(buckets, weights=m.errors[k].ravel(), minlength=n_buckets)
    if degenerate:
        logger.warning(f"[S2M] calibration degeneree {calib}: toutes les moyennes valent 0")
    logger.info(f"[S2M] {len(images)} images mesurees, {int((counts > 0).sum())} seaux non vides")
    return BucketErrors(scales, u, calib, sums, counts, degenerate)


def table_from_errors(errors: BucketErrors, tau: float) -> Scale2ModsTable:
    """
    Parcourt les seaux dans l'ordre croissant pour chaque echelle: m_max
    s'etend tant que l'erreur reste <= tau, le premier echec arrete l'echelle.
    Les seaux vides sont ignores. L'echelle suivante reprend a m_max.
    """
    if not tau > 0:
        raise DomainError(f"seuil MSE invalide: {tau}")
    mse = errors.mse
    u = errors.u
    m_min, m_max = [], []
    start = 0
    lower = 0.0
    for k, s in enumerate(errors.scales):
        upper = lower
        last_pass = start - 1
        for l in range(start, errors.n_buckets):
            if errors.counts[l] == 0:
                continue
            if mse[k, l] <= tau:
                upper = min(l * u + u / 2.0, 1.0)
                last_pass = l
            else:
                break
        m_min.append(lower)
        m_max.append(upper)
        logger.debug(f"[S2M] s={s:g}: [{lower:.4f}, {upper:.4f})")
        lower = upper
        start = last_pass + 1
    table = Scale2ModsTable(list(errors.scales), m_min, m_max, float(tau), float(u), errors.calib)
    table.validate()
    return table


def build_scale2mods_table(model: LmfModel, images: Sequence[np.ndarray], tau: float,
                           scales: Sequence[float], u: float, workers: int = 1,
                           chunk: int = DEFAULT_CHUNK) -> Scale2ModsTable:
    """Construit la table Scale2Mods sur un corpus d'images LR."""
    if not tau > 0:
        raise DomainError(f"seuil MSE invalide: {tau}")
    errors = measure_bucket_errors(model, images, scales, u, workers, chunk)
    return table_from_errors(errors, tau)


def min_scale_curve(errors: BucketErrors, tau: float) -> pd.DataFrame:
    """
    Plus petite echelle suffisante (erreur <= tau) par seau non vide.
    min_scale vaut nan si aucune echelle mesuree ne suffit.
    """
    mse = errors.mse
    rows = []
    for l in np.flatnonzero(errors.counts > 0):
        ok = np.flatnonzero(mse[:, l] <= tau)
        rows.append({
            'mean': l * errors.u,
            'pixels': int(errors.counts[l]),
            'min_scale': errors.scales[ok[0]] if len(ok) else np.nan,
        })
    return pd.DataFrame(rows, columns=['mean', 'pixels', 'min_scale'])


# =====================================================
# RENDU MULTI-ECHELLE
# =====================================================

@dataclass
class CmsrStats:
    """Pixels rendus par etape (echelle -> nombre) et taille de la sortie."""
    full_pixels: int
    rendered: Dict[float, int] = field(default_factory=dict)

    @property
    def rendered_total(self) -> int:
        return sum(self.rendered.values())

    @property
    def saving(self) -> float:
        return 1.0 - self.rendered_total / self.full_pixels if self.full_pixels else 0.0

    def record(self, s: float, n: int):
        self.rendered[s] = self.rendered.get(s, 0) + int(n)


def _support_mask(out_h: int, out_w: int, target_h: int, target_w: int,
                  pixels: np.ndarray) -> np.ndarray:
    """Pixels de la grille (out_h, out_w) lus par l'interpolation vers les pixels cibles."""
    ty, tx = np.divmod(pixels, target_w)
    if out_h == target_h:
        rows = [ty]
    else:
        y0, y1, _ = bilinear_taps(out_h, target_h)
        rows = [y0[ty], y1[ty]]
    if out_w == target_w:
        cols = [tx]
    else:
        x0, x1, _ = bilinear_taps(out_w, target_w)
        cols = [x0[tx], x1[tx]]
    mask = np.zeros((out_h, out_w), dtype=bool)
    for r in rows:
        for c in cols:
            mask[r, c] = True
    return mask


def _chain(model, img, unfolded, mods_target, assigned, s_target, table, stats, counter,
           workers, chunk):
    h, w = img.shape[:2]
    target_h, target_w = output_size(h, w, s_target)
    gov_target = governing_codes(target_h, target_w, h, w)
    covered = np.zeros(assigned.shape, dtype=bool)
    prev = img
    for k, s in enumerate(table.scales):
        if s > s_target:
            break
        out_h, out_w = output_size(h, w, s)
        cur = bilinear_resize(prev, out_h, out_w)
        codes = assigned == k
        if codes.any():
            if (out_h, out_w) == (target_h, target_w):
                mods = mods_target
            else:
                mods = latent_stage(model, unfolded, cell_of(out_h, out_w), counter)
            mask = codes[governing_codes(out_h, out_w, h, w)]
            cur = render_stage(model, mods, RenderRequest(out_h, out_w, mask, cur), counter,
                               workers, chunk)
            stats.record(s, mask.sum())
            covered |= codes
        prev = cur
        if covered.all():
            return bilinear_resize(prev, target_h, target_w)

    base = bilinear_resize(prev, target_h, target_w)
    mask = ~covered[gov_target]
    stats.record(s_target, mask.sum())
    return render_stage(model, mods_target, RenderRequest(target_h, target_w, mask, base), counter,
                        workers, chunk)


def _direct(model, img, unfolded, mods_target, assigned, s_target, table, stats, counter,
            workers, chunk):
    h, w = img.shape[:2]
    target_h, target_w = output_size(h, w, s_target)
    pixel_scale = assigned[governing_codes(target_h, target_w, h, w)]
    out = np.zeros((target_h, target_w, model.channels))
    remaining = np.ones((target_h, target_w), dtype=bool)
    for k, s in enumerate(table.scales):
        if s > s_target:
            break
        out_h, out_w = output_size(h, w, s)
        if (out_h, out_w) == (target_h, target_w):
            break
        targets = pixel_scale == k
        if not targets.any():
            continue
        support = _support_mask(out_h, out_w, target_h, target_w, np.flatnonzero(targets))
        if support.sum() >= targets.sum():
            # pas d'economie a cette echelle: ces pixels restent a s_target
            logger.debug(f"[CMSR] s={s:g}: support {support.sum()} >= {targets.sum()} pixels, ignoree")
            continue
        mods = latent_stage(model, unfolded, cell_of(out_h, out_w), counter)
        coarse = render_stage(model, mods, RenderRequest(out_h, out_w, support), counter,
                              workers, chunk)
        stats.record(s, support.sum())
        out[targets] = bilinear_resize(coarse, target_h, target_w)[targets]
        remaining &= ~targets

    stats.record(s_target, remaining.sum())
    return render_stage(model, mods_target, RenderRequest(target_h, target_w, remaining, out),
                        counter, workers, chunk)


def cmsr_render(model: LmfModel, img: np.ndarray, s_target: float, table: Scale2ModsTable,
                composite: str = 'chain', counter=None, workers: int = 1,
                chunk: int = DEFAULT_CHUNK, return_stats: bool = False):
    """
    Rendu multi-echelle controlable.

    Les moyennes de modulation sont calculees une fois, a la cellule cible.
    composite='chain' enchaine les interpolations bilineaires d'une echelle a
    la suivante; composite='direct' interpole chaque pixel depuis le rendu de
    sa propre echelle (meme mesure que la construction de la table).

    Returns:
        l'image, ou (image, CmsrStats) si return_stats est vrai
    """
    if not s_target >= 1.0:
        raise DomainError(f"facteur d'echelle < 1 refuse: {s_target}")
    if composite not in COMPOSITE_MODES:
        raise DomainError(f"mode de composition inconnu: {composite}")
    check_image(img)
    h, w = img.shape[:2]
    target_h, target_w = output_size(h, w, s_target)
    unfolded = prepare(model, img, counter)
    mods_target = latent_stage(model, unfolded, cell_of(target_h, target_w), counter)
    means = shift_modulation_means(mods_target, table.calib)
    assigned = assign_scales(means.normalized, table).ravel()

    stats = CmsrStats(target_h * target_w)
    run = _chain if composite == 'chain' else _direct
    out = run(model, img, unfolded, mods_target, assigned, s_target, table, stats, counter,
              workers, chunk)
    logger.info(f"[CMSR] s={s_target:g} {composite}: {stats.rendered_total}/{stats.full_pixels} pixels rendus")
    return (out, stats) if return_stats else out


# =====================================================
# SERIALISATION
# =====================================================

def _fmt(x: float) -> str:
    return '%.17g' % x


def save_table(table: Scale2ModsTable, path: str):
    lines = [
        f"{TABLE_MAGIC} {TABLE_VERSION}",
        f"tau {_fmt(table.tau)}",
        f"u {_fmt(table.u)}",
        f"calib_min {_fmt(table.calib[0])}",
        f"calib_max {_fmt(table.calib[1])}",
        f"scales {len(table.scales)}",
    ]
    for s, lo, hi in zip(table.scales, table.m_min, table.m_max):
        lines.append(f"{_fmt(s)} {_fmt(lo)} {_fmt(hi)}")
    with open(path, 'w', encoding='ascii') as f:
        f.write('\n'.join(lines) + '\n')
    logger.info(f"[IO] table ecrite: {path}")


def load_table(path: str) -> Scale2ModsTable:
    """Relit une table; les erreurs de format portent l'offset de la ligne fautive."""
    with open(path, 'rb') as f:
        data = f.read()
    offset = 0
    lines = []
    for raw in data.split(b'\n'):
        if raw.strip():
            lines.append((offset, raw.decode('ascii', errors='replace').split()))
        offset += len(raw) + 1
    if not lines or len(lines[0][1]) != 2 or lines[0][1][0] != TABLE_MAGIC:
        raise FormatError("en-tete de table invalide", offset=0)
    try:
        version = int(lines[0][1][1])
    except ValueError:
        raise FormatError("version de table illisible", offset=0)
    if version != TABLE_VERSION:
        raise UnsupportedVersionError(f"version de table non supportee: {version}", offset=0)

    fields = {}
    for key in ('tau', 'u', 'calib_min', 'calib_max', 'scales'):
        pos = 1 + len(fields)
        if pos >= len(lines) or len(lines[pos][1]) != 2 or lines[pos][1][0] != key:
            raise FormatError(f"champ attendu: {key}", offset=lines[min(pos, len(lines) - 1)][0])
        try:
            fields[key] = float(lines[pos][1][1])
        except ValueError:
            raise FormatError(f"valeur illisible pour {key}", offset=lines[pos][0])

    n = int(fields['scales'])
    rows = lines[6:]
    if len(rows) != n:
        raise FormatError(f"{len(rows)} lignes d'echelle pour {n} annoncees",
                          offset=rows[-1][0] if rows else len(data))
    scales, m_min, m_max = [], [], []
    for off, parts in rows:
        try:
            s, lo, hi = (float(p) for p in parts)
        except ValueError:
            raise FormatError("ligne d'echelle illisible", offset=off)
        scales.append(s)
        m_min.append(lo)
        m_max.append(hi)
    try:
        return Scale2ModsTable(scales, m_min, m_max, fields['tau'], fields['u'],
                               (fields['calib_min'], fields['calib_max']))
    except (DomainError, ShapeError) as e:
        raise FormatError(f"table incoherente: {e}", offset=rows[0][0] if rows else 0)
