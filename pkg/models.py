"""
Modeles LMF: conteneur des reseaux, prereglages de dimensions et fichier modele.
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from cost_model import DecoderDims
from encoder import EncoderSpec
from errors import (ChecksumError, DomainError, FormatError, LmfError, ShapeError,
                    UnsupportedVersionError)
from tensor_core import MlpParams

logger = logging.getLogger(__name__)

MODEL_MAGIC = b'LMFM'
MODEL_VERSION = 1
MODULATION_MODES = ('film', 'scale_only', 'shift_only')
DECODERS = ('lmf', 'vanilla', 'c2f')

# Prereglages: profondeur de features, encodeur, MLP latent et MLP de rendu
PRESETS = {
    # dimensions publiees de LM-LIIF (encodeur remplace par tiny_conv)
    'lm-liif': dict(d_f=64, encoder_layers=3, k_l=2, d_c=16, d_h=16, k_r=7),
    # entrainable sur CPU
    'desk': dict(d_f=16, encoder_layers=3, k_l=2, d_c=16, d_h=16, k_r=5),
    # tests unitaires
    'tiny': dict(d_f=4, encoder_layers=2, k_l=2, d_c=4, d_h=8, k_r=3),
}


@dataclass
class LmfModel:
    """Encodeur + MLP latent + MLP de rendu module."""
    encoder: EncoderSpec
    latent_mlp: MlpParams
    render_mlp: MlpParams
    d_c: int
    cell_decode: bool = True
    local_ensemble: bool = True
    modulation: str = 'film'
    metadata: Dict[str, Any] = field(default_factory=dict)
    # decodeurs d'ablation optionnels (vanilla et coarse-to-fine)
    vanilla_mlp: Optional[MlpParams] = None
    c2f_latent: Optional[MlpParams] = None
    c2f_render: Optional[MlpParams] = None

    def __post_init__(self):
        self.validate()

    @property
    def k(self) -> int:
        return self.render_mlp.n_modulated

    @property
    def d_h(self) -> int:
        return self.render_mlp.hidden_width(0) if self.k else 0

    @property
    def d_m(self) -> int:
        return 2 * sum(self.render_mlp.hidden_width(i) for i in range(self.k))

    @property
    def channels(self) -> int:
        return self.render_mlp.out_dim

    @property
    def n_extra_inputs(self) -> int:
        return 4 if self.cell_decode else 2

    def validate(self):
        """Verifie les invariants de dimensions de LmfModel."""
        if self.modulation not in MODULATION_MODES:
            raise ShapeError(f"modulation inconnue: {self.modulation}")
        d_f = self.encoder.out_depth
        cell_in = 2 if self.cell_decode else 0
        if self.latent_mlp.in_dim != 9 * d_f + cell_in:
            raise ShapeError(
                f"entree MLP latent {self.latent_mlp.in_dim} != 9*{d_f}+{cell_in}")
        if self.latent_mlp.out_dim != self.d_m + self.d_c:
            raise ShapeError(
                f"sortie MLP latent {self.latent_mlp.out_dim} != {self.d_m}+{self.d_c}")
        if self.render_mlp.in_dim != self.d_c + self.n_extra_inputs:
            raise ShapeError(
                f"entree MLP de rendu {self.render_mlp.in_dim} != {self.d_c}+{self.n_extra_inputs}")
        if self.vanilla_mlp is not None and self.vanilla_mlp.in_dim != 9 * d_f + self.n_extra_inputs:
            raise ShapeError("entree du MLP vanilla incompatible avec l'encodeur")

    def networks(self) -> Dict[str, MlpParams]:
        nets = {'latent': self.latent_mlp, 'render': self.render_mlp}
        for name in ('vanilla_mlp', 'c2f_latent', 'c2f_render'):
            if getattr(self, name) is not None:
                nets[name] = getattr(self, name)
        return nets

    def decoder_mlps(self, decoder: str = 'lmf') -> List[MlpParams]:
        """Reseaux du decodeur, dans l'ordre de la passe avant."""
        if decoder == 'lmf':
            return [self.latent_mlp, self.render_mlp]
        if decoder == 'vanilla':
            nets = [self.vanilla_mlp]
        elif decoder == 'c2f':
            nets = [self.c2f_latent, self.c2f_render]
        else:
            raise DomainError(f"decodeur inconnu: {decoder}")
        if any(n is None for n in nets):
            raise ShapeError(f"decodeur {decoder} absent du modele")
        return nets

    def trainable_arrays(self, decoder: str = 'lmf') -> List[np.ndarray]:
        """Parametres entraines conjointement: encodeur puis reseaux du decodeur."""
        arrays = self.encoder.arrays()
        for net in self.decoder_mlps(decoder):
            arrays += net.arrays()
        return arrays

    def bump_version(self):
        for net in self.networks().values():
            net.version += 1

    def copy(self) -> 'LmfModel':
        return LmfModel(
            self.encoder.copy(), self.latent_mlp.copy(), self.render_mlp.copy(), self.d_c,
            self.cell_decode, self.local_ensemble, self.modulation, dict(self.metadata),
            self.vanilla_mlp.copy() if self.vanilla_mlp else None,
            self.c2f_latent.copy() if self.c2f_latent else None,
            self.c2f_render.copy() if self.c2f_render else None,
        )

    def n_parameters(self) -> int:
        return sum(a.size for a in self.trainable_arrays())


def latent_layer_dims(d_in: int, d_out: int, k_l: int, d_l: Optional[int] = None):
    d_l = d_l or d_out
    dims = [(d_in, d_l)]
    dims += [(d_l, d_l)] * (k_l - 2)
    dims.append((d_l, d_out))
    return dims


def render_layer_dims(d_in: int, d_h: int, k_r: int, d_out: int):
    return [(d_in, d_h)] + [(d_h, d_h)] * (k_r - 2) + [(d_h, d_out)]


def build_model(
    preset: str = 'desk',
    channels: int = 3,
    seed: int = 0,
    cell_decode: bool = True,
    local_ensemble: bool = True,
    modulation: str = 'film',
    encoder_kind: str = 'tiny_conv',
    **overrides,
) -> LmfModel:
    """
    Construit un LmfModel initialise a partir d'un prereglage.

    Les couches modulees sont l'entree et les couches cachees du MLP de rendu
    (toutes sauf la sortie), soit K = k_r - 1.
    """
    if preset not in PRESETS:
        raise ShapeError(f"prereglage inconnu: {preset}")
    p = dict(PRESETS[preset])
    p.update(overrides)
    rng = np.random.default_rng(seed)

    if encoder_kind == 'identity_unfold':
        encoder = EncoderSpec.identity_unfold(channels)
    else:
        encoder = EncoderSpec.tiny_conv(channels, p['encoder_layers'], p['d_f'], rng)
    d_f = encoder.out_depth

    k = p['k_r'] - 1
    d_m = 2 * k * p['d_h']
    extra = 4 if cell_decode else 2
    latent = MlpParams.init(
        latent_layer_dims(9 * d_f + (2 if cell_decode else 0), d_m + p['d_c'], p['k_l'],
                          p.get('d_l')),
        rng=rng)
    render = MlpParams.init(
        render_layer_dims(p['d_c'] + extra, p['d_h'], p['k_r'], channels),
        modulated_layers=range(k), rng=rng)
    model = LmfModel(encoder, latent, render, p['d_c'], cell_decode, local_ensemble, modulation,
                     metadata={'preset': preset, 'seed': seed, 'steps': 0})
    logger.debug(f"[MODEL] {preset}: {model.n_parameters()} parametres")
    return model


def build_vanilla_mlp(d_f: int, channels: int = 3, d_h: int = 256, k: int = 5,
                      cell_decode: bool = True, seed: int = 0) -> MlpParams:
    """MLP du decodeur vanilla: [9 D_F + 4 -> d_h, (k - 2) x d_h, d_h -> C]."""
    d_in = 9 * d_f + (4 if cell_decode else 2)
    return MlpParams.init(render_layer_dims(d_in, d_h, k, channels),
                          rng=np.random.default_rng(seed))


def build_c2f_mlps(d_f: int, channels: int = 3, d_l: int = 64, d_h: int = 16, k_r: int = 7,
                   cell_decode: bool = True, seed: int = 0):
    """MLP latent [9 D_F -> d_l, d_l -> d_l] et MLP de rendu non module de la variante c2f."""
    rng = np.random.default_rng(seed)
    latent = MlpParams.init(latent_layer_dims(9 * d_f, d_l, 2), rng=rng)
    render = MlpParams.init(
        render_layer_dims(d_l + (4 if cell_decode else 2), d_h, k_r, channels), rng=rng)
    return latent, render


def attach_ablation_mlps(model: LmfModel, decoder: str, seed: int = 0, **dims) -> bool:
    """
    Ajoute au modele les MLP vanilla ou c2f manquants, initialises sur son encodeur.

    Returns:
        True si des reseaux ont ete crees
    """
    d_f = model.encoder.out_depth
    if decoder == 'vanilla' and model.vanilla_mlp is None:
        model.vanilla_mlp = build_vanilla_mlp(d_f, model.channels, cell_decode=model.cell_decode,
                                              seed=seed, **dims)
    elif decoder == 'c2f' and (model.c2f_latent is None or model.c2f_render is None):
        model.c2f_latent, model.c2f_render = build_c2f_mlps(
            d_f, model.channels, cell_decode=model.cell_decode, seed=seed, **dims)
    else:
        model.decoder_mlps(decoder)
        return False
    logger.debug(f"[MODEL] MLP {decoder} initialises (graine {seed})")
    return True


def c2f_dims(theta_l: MlpParams, theta_r: MlpParams) -> DecoderDims:
    return DecoderDims(
        d_out=theta_r.out_dim,
        d_in_l=theta_l.in_dim, d_l=theta_l.out_dim, k_l=theta_l.depth,
        d_c=theta_r.in_dim, d_r=theta_r.weights[0].shape[1], k_r=theta_r.depth,
    )


def vanilla_dims(theta: MlpParams) -> DecoderDims:
    return DecoderDims(d_in=theta.in_dim, d_h=theta.weights[0].shape[1], d_out=theta.out_dim,
                       k=theta.depth)


def dims_from_model(model: LmfModel) -> DecoderDims:
    """
    Dimensions du modele pour les formules de cout.

    Exact seulement si les couches cachees du MLP latent ont la largeur de sa
    sortie (cas de LM-LIIF).
    """
    vanilla = model.vanilla_mlp
    kwargs = {}
    if vanilla is not None:
        kwargs.update(d_in=vanilla.in_dim, d_h=vanilla.weights[0].shape[1], k=vanilla.depth)
    return DecoderDims(
        d_out=model.channels,
        d_in_l=model.latent_mlp.in_dim, d_l=model.latent_mlp.weights[0].shape[1],
        k_l=model.latent_mlp.depth,
        d_c=model.render_mlp.in_dim, d_r=model.render_mlp.weights[0].shape[1],
        k_r=model.render_mlp.depth,
        **kwargs,
    )


# =====================================================
# FICHIER MODELE
# =====================================================

def _mlp_header(p: MlpParams) -> Dict[str, Any]:
    return {'dims': p.layer_dims, 'modulated': list(p.modulated_layers),
            'activation': p.activation}


def save_model(model: LmfModel, path: str):
    """
    Ecrit le modele: magie, version, puis charge utile (en-tete JSON et
    tableaux float64 petit-boutistes) suivie de son SHA-256.
    """
    nets = model.networks()
    header = {
        'encoder': {'kind': model.encoder.kind, 'in_channels': model.encoder.in_channels,
                    'kernels': [list(k.shape) for k in model.encoder.kernels]},
        'mlps': {name: _mlp_header(p) for name, p in nets.items()},
        'd_c': model.d_c,
        'cell_decode': model.cell_decode,
        'local_ensemble': model.local_ensemble,
        'modulation': model.modulation,
        'metadata': model.metadata,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode('utf-8')
    arrays = model.encoder.arrays()
    for p in nets.values():
        arrays += p.arrays()
    body = b''.join(np.ascontiguousarray(a, dtype='<f8').tobytes() for a in arrays)
    payload = struct.pack('<I', len(header_bytes)) + header_bytes + body
    with open(path, 'wb') as f:
        f.write(MODEL_MAGIC + struct.pack('<H', MODEL_VERSION))
        f.write(payload)
        f.write(hashlib.sha256(payload).digest())
    logger.info(f"[IO] modele ecrit: {path} ({len(payload)} octets)")


class _Reader:
    def __init__(self, data: bytes, offset: int):
        self.data = data
        self.offset = offset

    def take(self, shape) -> np.ndarray:
        count = int(np.prod(shape)) if len(shape) else 1
        end = self.offset + 8 * count
        if end > len(self.data):
            raise FormatError("charge utile tronquee", offset=self.offset)
        arr = np.frombuffer(self.data, dtype='<f8', count=count, offset=self.offset)
        self.offset = end
        return arr.astype(np.float64).reshape(shape)


def _read_mlp(reader: _Reader, h: Dict[str, Any]) -> MlpParams:
    weights, biases = [], []
    for d_in, d_out in h['dims']:
        weights.append(reader.take((d_in, d_out)))
        biases.append(reader.take((d_out,)))
    return MlpParams(weights, biases, tuple(h['modulated']), h['activation'])


def load_model(path: str) -> LmfModel:
    """Relit un modele et verifie version, somme de controle et invariants."""
    with open(path, 'rb') as f:
        data = f.read()
    if len(data) < 6 + 4 + 32 or data[:4] != MODEL_MAGIC:
        raise FormatError("en-tete de modele invalide", offset=0)
    (version,) = struct.unpack_from('<H', data, 4)
    if version > MODEL_VERSION or version < 1:
        raise UnsupportedVersionError(f"version de modele non supportee: {version}", offset=4)
    payload, digest = data[6:-32], data[-32:]
    if hashlib.sha256(payload).digest() != digest:
        logger.error(f"[IO] somme de controle invalide: {path}")
        raise ChecksumError("somme de controle invalide", offset=len(data) - 32)

    (header_len,) = struct.unpack_from('<I', payload, 0)
    try:
        header = json.loads(payload[4:4 + header_len].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"en-tete JSON illisible: {e}", offset=10)

    reader = _Reader(payload, 4 + header_len)
    try:
        enc = header['encoder']
        kernels, biases = [], []
        for shape in enc['kernels']:
            kernels.append(reader.take(tuple(shape)))
            biases.append(reader.take((shape[3],)))
        encoder = EncoderSpec(enc['kind'], enc['in_channels'], kernels, biases)
        mlps = {name: _read_mlp(reader, h) for name, h in header['mlps'].items()}
        if reader.offset != len(payload):
            raise FormatError("octets excedentaires apres les tableaux", offset=reader.offset)
        return LmfModel(
            encoder, mlps['latent'], mlps['render'], header['d_c'],
            header['cell_decode'], header['local_ensemble'], header['modulation'],
            header['metadata'],
            mlps.get('vanilla_mlp'), mlps.get('c2f_latent'), mlps.get('c2f_render'),
        )
    except LmfError:
        raise
    except (KeyError, TypeError, ValueError, IndexError, AttributeError) as e:
        logger.error(f"[IO] en-tete de modele incomplet: {path}")
        raise FormatError(f"en-tete de modele incomplet ou mal type: {e!r}", offset=10)
