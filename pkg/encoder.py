"""
Extracteurs de features produisant la FeatureMap consommee par les decodeurs.

- identity_unfold: depliement 3x3 des canaux bruts (profondeur 9C)
- tiny_conv: pile de correlations 3x3 (bords repliques), ReLU entre couches
"""

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from coord_grid import feature_unfold
from errors import DataError, ShapeError

ENCODER_KINDS = ('identity_unfold', 'tiny_conv')


@dataclass
class EncoderSpec:
    """Type d'encodeur et, pour tiny_conv, ses noyaux (3, 3, Cin, Cout) et biais."""
    kind: str
    in_channels: int = 3
    kernels: List[np.ndarray] = field(default_factory=list)
    biases: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ShapeError(f"encodeur inconnu: {self.kind}")
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            if k.ndim != 4 or k.shape[:2] != (3, 3) or b.shape != (k.shape[3],):
                raise ShapeError(f"noyau {k.shape} / biais {b.shape}", layer=i)
            expected = self.in_channels if i == 0 else self.kernels[i - 1].shape[3]
            if k.shape[2] != expected:
                raise ShapeError(f"entree {k.shape[2]} != {expected}", layer=i)

    @classmethod
    def tiny_conv(cls, in_channels: int = 3, n_layers: int = 3, width: int = 16,
                  rng: Optional[np.random.Generator] = None) -> 'EncoderSpec':
        rng = rng if rng is not None else np.random.default_rng(0)
        kernels, biases = [], []
        c_in = in_channels
        for _ in range(n_layers):
            bound = 1.0 / np.sqrt(9 * c_in)
            kernels.append(rng.uniform(-bound, bound, size=(3, 3, c_in, width)))
            biases.append(rng.uniform(-bound, bound, size=(width,)))
            c_in = width
        return cls('tiny_conv', in_channels, kernels, biases)

    @classmethod
    def identity_unfold(cls, in_channels: int = 3) -> 'EncoderSpec':
        return cls('identity_unfold', in_channels)

    @property
    def out_depth(self) -> int:
        if self.kind == 'identity_unfold':
            return 9 * self.in_channels
        return int(self.kernels[-1].shape[3])

    @property
    def n_layers(self) -> int:
        return len(self.kernels)

    def arrays(self) -> List[np.ndarray]:
        out = []
        for k, b in zip(self.kernels, self.biases):
            out.extend((k, b))
        return out

    def copy(self) -> 'EncoderSpec':
        return EncoderSpec(self.kind, self.in_channels,
                           [k.copy() for k in self.kernels], [b.copy() for b in self.biases])


@dataclass
class EncoderTape:
    inputs: List[np.ndarray]
    pre: List[np.ndarray]


def _shift(x: np.ndarray, dy: int, dx: int) -> np.ndarray:
    h, w = x.shape[:2]
    yi = np.clip(np.arange(h) + dy, 0, h - 1)
    xi = np.clip(np.arange(w) + dx, 0, w - 1)
    return x[np.ix_(yi, xi)]


def _conv3x3(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    out = np.zeros(x.shape[:2] + (kernel.shape[3],), dtype=np.result_type(x, kernel))
    for a in range(3):
        for b in range(3):
            out += _shift(x, a - 1, b - 1) @ kernel[a, b]
    return out + bias


def encode(spec: EncoderSpec, img: np.ndarray, counter=None, record: bool = False):
    """
    Calcule la FeatureMap (H, W, D) d'une image (H, W, C).

    Returns:
        la FeatureMap, ou (FeatureMap, EncoderTape) si record est vrai
    """
    if img.ndim != 3 or img.shape[2] != spec.in_channels:
        raise ShapeError(f"image {img.shape} incompatible avec {spec.in_channels} canaux")
    if not np.all(np.isfinite(img)):
        raise DataError("image contenant des valeurs non finies")

    if spec.kind == 'identity_unfold':
        fm = feature_unfold(img)
        return (fm, EncoderTape([], [])) if record else fm

    h, w = img.shape[:2]
    inputs, pres = [], []
    x = img
    for i, (k, b) in enumerate(zip(spec.kernels, spec.biases)):
        z = _conv3x3(x, k, b)
        if counter is not None:
            counter.add_encoder(h * w * 9 * k.shape[2] * k.shape[3])
        if record:
            inputs.append(x)
            pres.append(z)
        x = z if i == spec.n_layers - 1 else np.maximum(z, 0.0)
    return (x, EncoderTape(inputs, pres)) if record else x


def encode_backward(spec: EncoderSpec, tape: EncoderTape, upstream: np.ndarray):
    """
    Gradients des noyaux et biais a partir du gradient sur la FeatureMap.

    Returns:
        (liste [dK0, db0, dK1, db1, ...], gradient sur l'image)
    """
    if spec.kind == 'identity_unfold':
        return [], None
    g = upstream
    grads = [None] * (2 * spec.n_layers)
    for i in range(spec.n_layers - 1, -1, -1):
        if i != spec.n_layers - 1:
            g = g * (tape.pre[i] > 0.0)
        x = tape.inputs[i]
        k = spec.kernels[i]
        h, w, c_in = x.shape
        g_flat = g.reshape(-1, g.shape[-1])
        d_k = np.zeros_like(k)
        d_x = np.zeros_like(x)
        yi_all = np.arange(h)
        xi_all = np.arange(w)
        for a in range(3):
            for b in range(3):
                d_k[a, b] = _shift(x, a - 1, b - 1).reshape(-1, c_in).T @ g_flat
                yi = np.clip(yi_all + a - 1, 0, h - 1)[:, None]
                xi = np.clip(xi_all + b - 1, 0, w - 1)[None, :]
                np.add.at(d_x, (yi, xi), g @ k[a, b].T)
        grads[2 * i] = d_k
        grads[2 * i + 1] = g_flat.sum(axis=0)
        g = d_x
    return grads, g
