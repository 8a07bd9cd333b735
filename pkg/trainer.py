"""
Entrainement a l'echelle du poste de travail: tirage d'echelles continues,
sous-echantillonnage bicubique, perte L1, Adam et audit des gradients par
differences finies.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from coord_grid import Cell, cell_of, feature_unfold, feature_unfold_backward, make_coord_grid
from decoder import corner_queries, latent_stage, upsample
from encoder import encode, encode_backward
from errors import DataError, DomainError, NumericError, ShapeError
from models import DECODERS, LmfModel, attach_ablation_mlps
from tensor_core import mlp_backward, mlp_forward, mlp_forward_modulated

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Hyperparametres d'entrainement."""
    patch: int = 16
    pixels_per_patch: Optional[int] = None
    scale_min: float = 1.0
    scale_max: float = 4.0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 2000
    batch: int = 1
    decay_every: int = 1000
    decay_factor: float = 0.5
    seed: int = 0
    flips: bool = False
    decoder: str = 'lmf'

    def __post_init__(self):
        if self.decoder not in DECODERS:
            raise DomainError(f"decodeur inconnu: {self.decoder}")
        if self.scale_min < 1.0 or self.scale_max < self.scale_min:
            raise DomainError(f"plage d'echelles invalide: [{self.scale_min}, {self.scale_max}]")
        if self.patch < 4:
            raise DomainError(f"patch LR trop petit: {self.patch}")
        if self.steps < 0 or self.batch < 1 or self.decay_every < 1:
            raise DomainError("steps, batch et decay_every doivent etre positifs")
        if self.lr < 0:
            raise DomainError(f"taux d'apprentissage negatif: {self.lr}")

    @property
    def n_pixels(self) -> int:
        return self.pixels_per_patch or self.patch * self.patch

    @classmethod
    def from_config(cls, cfg, **overrides) -> 'TrainConfig':
        """Valeurs par defaut lues dans une classe de config.py."""
        values = dict(
            patch=cfg.TRAIN_PATCH, steps=cfg.TRAIN_STEPS, batch=cfg.TRAIN_BATCH,
            scale_min=cfg.TRAIN_SCALE_MIN, scale_max=cfg.TRAIN_SCALE_MAX, lr=cfg.TRAIN_LR,
            decay_every=cfg.TRAIN_DECAY_EVERY, decay_factor=cfg.TRAIN_DECAY_FACTOR,
            pixels_per_patch=cfg.TRAIN_PIXELS or None, seed=cfg.SEED, flips=cfg.TRAIN_FLIPS,
        )
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass
class TrainSample:
    """Patch LR, requetes HR et cellule du patch HR."""
    lr_patch: np.ndarray
    coords: np.ndarray
    targets: np.ndarray
    cell: Cell
    scale: float = 1.0


# =====================================================
# BICUBIQUE
# =====================================================

def cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Noyau cubique de Keys (a = -0.5: Catmull-Rom)."""
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


def cubic_weights(n_in: int, n_out: int) -> np.ndarray:
    """
    Matrice (n_out, n_in) de reechantillonnage bicubique sur un axe.

    Centres alignes sur les demi-pixels; en reduction, le noyau est elargi du
    facteur d'echelle (anticrenelage). Les indices hors grille sont bornes.
    """
    scale = n_in / n_out
    support = max(scale, 1.0)
    t = (np.arange(n_out) + 0.5) * scale - 0.5
    weights = np.zeros((n_out, n_in))
    for j in range(n_out):
        lo = int(math.floor(t[j] - 2.0 * support))
        hi = int(math.ceil(t[j] + 2.0 * support))
        taps = np.arange(lo, hi + 1)
        w = cubic((t[j] - taps) / support)
        w = w / w.sum()
        np.add.at(weights[j], np.clip(taps, 0, n_in - 1), w)
    return weights


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if out_h < 1 or out_w < 1:
        raise DomainError(f"dimensions cibles invalides: {out_h}x{out_w}")
    if img.ndim != 3:
        raise ShapeError(f"image (H, W, C) attendue, recu {img.shape}")
    h, w = img.shape[:2]
    out = img
    if h != out_h:
        out = np.einsum('ji,iwc->jwc', cubic_weights(h, out_h), out)
    if w != out_w:
        out = np.einsum('ji,hic->hjc', cubic_weights(w, out_w), out)
    return out.copy() if out is img else out


def bicubic_downsample(img: np.ndarray, s: float) -> np.ndarray:
    """Reduction bicubique d'un facteur s >= 1 (taille arrondie, demis vers le haut)."""
    if not s >= 1.0:
        raise DomainError(f"facteur de reduction < 1: {s}")
    h, w = img.shape[:2]
    out_h, out_w = int(math.floor(h / s + 0.5)), int(math.floor(w / s + 0.5))
    if out_h < 1 or out_w < 1:
        raise DomainError(f"image {h}x{w} trop petite pour s={s}")
    return bicubic_resize(img, out_h, out_w)


# =====================================================
# ECHANTILLONNAGE
# =====================================================

def draw_scale(cfg: TrainConfig, rng: np.random.Generator) -> float:
    return float(rng.uniform(cfg.scale_min, cfg.scale_max))


def sample_training_batch(dataset: Sequence[np.ndarray], cfg: TrainConfig,
                          rng: np.random.Generator) -> List[TrainSample]:
    """
    Tire cfg.batch exemples: echelle uniforme, patch HR de cote round(p*s),
    reduction bicubique a p x p et requetes tirees sans remise dans le patch HR.
    Les images trop petites pour le patch tire sont ignorees.
    """
    if not dataset:
        raise DataError("jeu de donnees vide")
    p = cfg.patch
    samples = []
    for _ in range(cfg.batch):
        img = dataset[int(rng.integers(len(dataset)))]
        s = draw_scale(cfg, rng)
        side = int(math.floor(p * s + 0.5))
        h, w = img.shape[:2]
        if side > h or side > w:
            logger.warning(f"[TRAIN] image {h}x{w} trop petite pour un patch {side}, ignoree")
            continue
        y = int(rng.integers(0, h - side + 1))
        x = int(rng.integers(0, w - side + 1))
        crop = img[y:y + side, x:x + side]
        if cfg.flips:
            if rng.random() < 0.5:
                crop = crop[:, ::-1]
            if rng.random() < 0.5:
                crop = crop[::-1, :]
        lr_patch = crop.copy() if side == p else bicubic_resize(crop, p, p)
        coords = make_coord_grid(side, side).flat()
        targets = crop.reshape(-1, crop.shape[2])
        idx = rng.choice(side * side, size=min(cfg.n_pixels, side * side), replace=False)
        samples.append(TrainSample(lr_patch, coords[idx], targets[idx].copy(),
                                   cell_of(side, side), s))
    return samples


# =====================================================
# PERTE, GRADIENTS ET OPTIMISEUR
# =====================================================

def l1_loss(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Erreur absolue moyenne et son gradient sign(pred - target) / N (0 aux egalites).
    """
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} != cible {target.shape}")
    diff = pred - target
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR RGB en dB pour des valeurs dans [0, 1]; +inf si les images sont egales."""
    if a.shape != b.shape:
        raise ShapeError(f"dimensions differentes: {a.shape} / {b.shape}")
    diff = a - b
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


@dataclass
class ForwardState:
    fm: np.ndarray
    enc_tape: object
    raw: Optional[np.ndarray]
    lat_tape: object
    queries: list
    tapes: list
    pred: np.ndarray


def _render_net(model: LmfModel, decoder: str):
    return model.decoder_mlps(decoder)[-1]


def forward(model: LmfModel, sample: TrainSample, decoder: str = 'lmf') -> ForwardState:
    """
    Passe avant enregistree sur un exemple.

    decoder='vanilla' et 'c2f' suivent decode_vanilla et decode_c2f; sans
    etape latente, raw et lat_tape valent None.
    """
    net = _render_net(model, decoder)
    fm, enc_tape = encode(model.encoder, sample.lr_patch, record=True)
    unfolded = feature_unfold(fm)
    gh, gw, depth = unfolded.shape
    codes = unfolded.reshape(gh * gw, depth)
    cell = sample.cell if model.cell_decode else None
    queries = corner_queries(sample.coords, cell, gh, gw, model.local_ensemble)
    raw, lat_tape = None, None
    if decoder == 'lmf':
        grid, raw, lat_tape = latent_stage(model, unfolded, sample.cell, record=True)
    elif decoder == 'c2f':
        raw, lat_tape = mlp_forward(model.c2f_latent, codes, record=True)
        codes = raw

    pred = None
    tapes = []
    for q in queries:
        if decoder == 'lmf':
            film, z_c = grid.gather(q.index)
            out, tape = mlp_forward_modulated(
                net, np.concatenate([z_c, q.extra], axis=1), film, record=True)
        else:
            out, tape = mlp_forward(net, np.concatenate([codes[q.index], q.extra], axis=1),
                                    record=True)
        tapes.append(tape)
        term = q.weight[:, None] * out
        pred = term if pred is None else pred + term
    return ForwardState(fm, enc_tape, raw, lat_tape, queries, tapes, pred)


def _latent_rows(model: LmfModel, film_grads, d_zc: np.ndarray) -> np.ndarray:
    """Gradients (alpha, beta, z_c) remis dans l'ordre de la sortie latente."""
    parts = []
    for a, b in zip(film_grads.alpha, film_grads.beta):
        if model.modulation == 'shift_only':
            a = np.zeros_like(a)
        elif model.modulation == 'scale_only':
            b = np.zeros_like(b)
        parts.extend((a, b))
    parts.append(d_zc)
    return np.concatenate(parts, axis=1)


def forward_backward(model: LmfModel, sample: TrainSample, decoder: str = 'lmf'):
    """
    Perte L1 d'un exemple et gradients de tous les parametres entraines,
    dans l'ordre de model.trainable_arrays(decoder).

    Returns:
        (perte, liste de gradients, prediction)
    """
    state = forward(model, sample, decoder)
    loss, g_pred = l1_loss(state.pred, sample.targets)
    gh, gw, depth = state.fm.shape
    n_codes = gh * gw

    net = _render_net(model, decoder)
    render_grads = [np.zeros_like(a) for a in net.arrays()]
    if decoder == 'vanilla':
        d_codes = np.zeros((n_codes, 9 * depth))
    else:
        d_raw = np.zeros_like(state.raw)
        width = model.d_c if decoder == 'lmf' else d_raw.shape[1]
    for q, tape in zip(state.queries, state.tapes):
        grads, g_in, film_grads = mlp_backward(tape, net, q.weight[:, None] * g_pred)
        for acc, g in zip(render_grads, grads.arrays()):
            acc += g
        if decoder == 'vanilla':
            np.add.at(d_codes, q.index, g_in[:, :9 * depth])
        elif decoder == 'lmf':
            np.add.at(d_raw, q.index, _latent_rows(model, film_grads, g_in[:, :width]))
        else:
            np.add.at(d_raw, q.index, g_in[:, :width])

    lat_grads = []
    if decoder != 'vanilla':
        latent_net = model.decoder_mlps(decoder)[0]
        grads, d_in, _ = mlp_backward(state.lat_tape, latent_net, d_raw)
        lat_grads = grads.arrays()
        d_codes = d_in[:, :9 * depth]
    d_unfolded = d_codes.reshape(gh, gw, 9 * depth)
    enc_grads, _ = encode_backward(model.encoder, state.enc_tape, feature_unfold_backward(d_unfolded, depth))
    return loss, enc_grads + lat_grads + render_grads, state.pred


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]

    @classmethod
    def zeros(cls, params: Sequence[np.ndarray]) -> 'AdamState':
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float, t: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Mise a jour Adam avec correction de biais, en place; t commence a 1."""
    if t < 1:
        raise DomainError(f"pas d'optimisation invalide: {t}")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeError(f"gradient {g.shape} != parametre {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def learning_rate(cfg: TrainConfig, step: int) -> float:
    """Taux divise par decay_factor toutes les decay_every etapes."""
    return cfg.lr * cfg.decay_factor ** ((step - 1) // cfg.decay_every)


def train(model: LmfModel, dataset: Sequence[np.ndarray], cfg: TrainConfig, log_every: int = 100):
    """
    Entraine conjointement l'encodeur et les reseaux du decodeur cfg.decoder.
    Les MLP vanilla ou c2f absents du modele sont d'abord initialises.

    Returns:
        (modele entraine, DataFrame step/loss/lr)
    """
    rng = np.random.default_rng(cfg.seed)
    if attach_ablation_mlps(model, cfg.decoder, cfg.seed):
        logger.info(f"[TRAIN] MLP {cfg.decoder} ajoutes au modele")
    params = model.trainable_arrays(cfg.decoder)
    state = AdamState.zeros(params)
    rows = []
    t = 0
    for step in range(1, cfg.steps + 1):
        lr = learning_rate(cfg, step)
        samples = sample_training_batch(dataset, cfg, rng)
        if not samples:
            continue
        loss = 0.0
        grads = [np.zeros_like(p) for p in params]
        for sample in samples:
            l, g, _ = forward_backward(model, sample, cfg.decoder)
            loss += l
            for acc, gi in zip(grads, g):
                acc += gi
        loss /= len(samples)
        for acc in grads:
            acc /= len(samples)
        if not math.isfinite(loss):
            logger.error(f"[TRAIN] perte non finie a l'etape {step} (lr={lr:g})")
            raise NumericError(f"perte non finie a l'etape {step}")
        t += 1
        adam_step(params, grads, state, lr, t, cfg.beta1, cfg.beta2, cfg.eps)
        model.bump_version()
        rows.append((step, loss, lr))
        if log_every and step % log_every == 0:
            logger.info(f"[TRAIN] etape {step}/{cfg.steps} perte={loss:.5f} lr={lr:g}")
    model.metadata['steps'] = int(model.metadata.get('steps', 0)) + cfg.steps
    model.metadata['seed'] = cfg.seed
    model.metadata['decoder'] = cfg.decoder
    return model, pd.DataFrame(rows, columns=['step', 'loss', 'lr'])


def save_loss_curve(curve: pd.DataFrame, path: str):
    curve.to_csv(path, index=False)
    logger.info(f"[IO] courbe de perte ecrite: {path}")


def reconstruct(model: LmfModel, hr: np.ndarray, s: float, **kwargs) -> Tuple[np.ndarray, np.ndarray]:
    """Reduit hr d'un facteur s puis le reconstruit a sa taille; renvoie (lr, sr)."""
    lr = bicubic_downsample(hr, s)
    sr = upsample(model, lr, s, **kwargs)
    h, w = hr.shape[:2]
    if sr.shape[:2] != (h, w):
        raise ShapeError(f"reconstruction {sr.shape[:2]} != {(h, w)}; choisir s divisant la taille")
    return lr, sr


# =====================================================
# AUDIT DES GRADIENTS
# =====================================================

@dataclass
class AuditResult:
    """Erreurs relatives analytique / differences finies."""
    max_rel_error: float
    checked: int
    kinked: int
    errors: np.ndarray


def _loss_and_signature(model: LmfModel, sample: TrainSample, decoder: str):
    state = forward(model, sample, decoder)
    loss, _ = l1_loss(state.pred, sample.targets)
    parts = [np.packbits(p > 0).tobytes() for p in state.enc_tape.pre[:-1]]
    if state.lat_tape is not None:
        parts += [np.packbits(m > 0).tobytes() for m in state.lat_tape.modulated[:-1]]
    for tape in state.tapes:
        parts += [np.packbits(m > 0).tobytes() for m in tape.modulated[:-1]]
    parts.append(np.sign(state.pred - sample.targets).astype(np.int8).tobytes())
    return loss, b'|'.join(parts)


def gradient_audit(model: LmfModel, sample: TrainSample, n_params: int = 100,
                   rng: Optional[np.random.Generator] = None, h: float = 1e-5,
                   retries: int = 2, decoder: str = 'lmf') -> AuditResult:
    """
    Compare les gradients analytiques a des differences finies centrees sur
    des parametres tires au hasard.

    Si theta +/- h traverse un coude (redresseur ou L1), le pas est divise
    par 10; apres `retries` essais le parametre est compte comme coude.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    _, grads, _ = forward_backward(model, sample, decoder)
    arrays = model.trainable_arrays(decoder)
    ends = np.cumsum([a.size for a in arrays])
    picks = rng.choice(int(ends[-1]), size=min(n_params, int(ends[-1])), replace=False)

    errors = []
    kinked = 0
    for flat in picks:
        ai = int(np.searchsorted(ends, flat, side='right'))
        idx = int(flat - (ends[ai - 1] if ai else 0))
        arr = arrays[ai]
        analytic = float(grads[ai].flat[idx])
        original = arr.flat[idx]
        step = h
        numeric = None
        for _ in range(retries + 1):
            arr.flat[idx] = original + step
            loss_p, sig_p = _loss_and_signature(model, sample, decoder)
            arr.flat[idx] = original - step
            loss_m, sig_m = _loss_and_signature(model, sample, decoder)
            arr.flat[idx] = original
            if sig_p == sig_m:
                numeric = (loss_p - loss_m) / (2.0 * step)
                break
            step /= 10.0
        if numeric is None:
            kinked += 1
            continue
        errors.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6))
    model.bump_version()

    errors = np.array(errors)
    result = AuditResult(float(errors.max()) if errors.size else 0.0, int(errors.size), kinked, errors)
    logger.info(f"[TRAIN] audit: {result.checked} parametres, erreur max {result.max_rel_error:.2e}, "
                f"{kinked} coudes")
    return result
