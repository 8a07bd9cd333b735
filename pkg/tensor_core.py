"""
Noyaux numeriques denses: passe avant MLP, modulation FiLM et
retropropagation suffisante pour entrainer tous les reseaux du depot.

Convention: les poids sont stockes (in_dim, out_dim) et une couche calcule
x @ W + b. Les entrees peuvent etre un vecteur (D,) ou un lot (N, D).
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from errors import ShapeError, ModulationArityError, StaleTapeError

ACTIVATIONS = ('relu', 'identity')


@dataclass
class MlpParams:
    """Poids, biais et couches modulees d'un perceptron multicouche."""
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    modulated_layers: Tuple[int, ...] = ()
    activation: str = 'relu'
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        self.modulated_layers = tuple(sorted(set(self.modulated_layers)))
        self.validate()

    @classmethod
    def init(
        cls,
        layer_dims: Sequence[Tuple[int, int]],
        modulated_layers: Sequence[int] = (),
        rng: Optional[np.random.Generator] = None,
        activation: str = 'relu',
        dtype=np.float64,
    ) -> 'MlpParams':
        """
        Initialise un MLP: uniforme dans [-1/sqrt(fan_in), 1/sqrt(fan_in)].

        Args:
            layer_dims: liste de paires (in_dim, out_dim)
            modulated_layers: indices des couches dont la sortie est modulee
            rng: generateur numpy (graine fixe pour la reproductibilite)
        """
        rng = rng if rng is not None else np.random.default_rng(0)
        weights, biases = [], []
        for fan_in, fan_out in layer_dims:
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
            biases.append(rng.uniform(-bound, bound, size=(fan_out,)).astype(dtype))
        return cls(weights, biases, tuple(modulated_layers), activation)

    @property
    def layer_dims(self) -> List[Tuple[int, int]]:
        return [(int(w.shape[0]), int(w.shape[1])) for w in self.weights]

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return int(self.weights[0].shape[0])

    @property
    def out_dim(self) -> int:
        return int(self.weights[-1].shape[1])

    @property
    def n_modulated(self) -> int:
        return len(self.modulated_layers)

    def hidden_width(self, k: int) -> int:
        """Largeur de la k-ieme couche modulee."""
        return int(self.weights[self.modulated_layers[k]].shape[1])

    def validate(self):
        """Verifie le chainage des dimensions et les positions modulees."""
        if not self.weights or len(self.weights) != len(self.biases):
            raise ShapeError("nombre de poids et de biais incoherent")
        if self.activation not in ACTIVATIONS:
            raise ShapeError(f"activation inconnue: {self.activation}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"poids {w.shape} / biais {b.shape}", layer=i)
            if i > 0 and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(
                    f"sortie {self.weights[i - 1].shape[1]} != entree {w.shape[0]}", layer=i)
        for k in self.modulated_layers:
            if k < 0 or k >= self.depth - 1:
                raise ShapeError(f"couche modulee {k} invalide (couche de sortie exclue)")

    def arrays(self) -> List[np.ndarray]:
        """Parametres a plat dans l'ordre [W0, b0, W1, b1, ...]."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> 'MlpParams':
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         self.modulated_layers, self.activation)

    def n_parameters(self) -> int:
        return sum(a.size for a in self.arrays())


@dataclass
class FilmParams:
    """Modulations FiLM: echelle alpha et decalage beta par couche modulee."""
    alpha: List[np.ndarray]
    beta: List[np.ndarray]

    @classmethod
    def zeros(cls, params: MlpParams, batch: Optional[int] = None) -> 'FilmParams':
        shape = (lambda d: (d,)) if batch is None else (lambda d: (batch, d))
        widths = [params.hidden_width(k) for k in range(params.n_modulated)]
        return cls([np.zeros(shape(d)) for d in widths], [np.zeros(shape(d)) for d in widths])

    @property
    def k(self) -> int:
        return len(self.alpha)


@dataclass
class MlpGrads:
    """Gradients des poids et biais, miroir exact de MlpParams."""
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def arrays(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


@dataclass
class GradientTape:
    """Valeurs primales enregistrees pendant une passe avant."""
    params_id: int
    params_version: int
    layer_dims: List[Tuple[int, int]]
    inputs: List[np.ndarray]       # entree de chaque couche
    pre: List[np.ndarray]          # sortie lineaire de chaque couche
    modulated: List[np.ndarray]    # sortie apres FiLM (egale a pre si non modulee)
    mods: Optional[FilmParams]
    squeeze: bool


def _as_batch(x: np.ndarray) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64) if not isinstance(x, np.ndarray) else x
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == 'identity':
        return z
    return np.maximum(z, 0.0)


def _activation_grad(z: np.ndarray, activation: str) -> np.ndarray:
    # sous-gradient du redresseur en 0 pris egal a 0
    if activation == 'identity':
        return np.ones_like(z)
    return (z > 0.0).astype(z.dtype)


def film_apply(h: np.ndarray, alpha: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Applique (1 + alpha) * h + beta, sans activation."""
    h = np.asarray(h)
    alpha = np.asarray(alpha)
    beta = np.asarray(beta)
    if alpha.shape[-1] != h.shape[-1] or beta.shape[-1] != h.shape[-1]:
        raise ShapeError(
            f"largeurs FiLM: h={h.shape[-1]}, alpha={alpha.shape[-1]}, beta={beta.shape[-1]}")
    return (1.0 + alpha) * h + beta


def _forward(params: MlpParams, x, mods: Optional[FilmParams], counter, record: bool):
    xb, squeeze = _as_batch(x)
    if xb.shape[-1] != params.in_dim:
        raise ShapeError(f"entree {xb.shape[-1]} != {params.in_dim}", layer=0)
    if mods is not None and mods.k != params.n_modulated:
        raise ModulationArityError(
            f"{mods.k} modulations pour {params.n_modulated} couches modulees")
    mod_index = {layer: k for k, layer in enumerate(params.modulated_layers)} if mods else {}

    inputs, pres, modulated = [], [], []
    rows = xb.shape[0]
    h = xb
    last = params.depth - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        if h.shape[-1] != w.shape[0]:
            raise ShapeError(f"entree {h.shape[-1]} != {w.shape[0]}", layer=i)
        z = h @ w + b
        if counter is not None:
            counter.add_linear(rows * w.shape[0] * w.shape[1])
        if record:
            inputs.append(h)
            pres.append(z)
        if i in mod_index:
            k = mod_index[i]
            z_mod = film_apply(z, mods.alpha[k], mods.beta[k])
            if counter is not None:
                counter.add_film(rows * w.shape[1])
        else:
            z_mod = z
        if record:
            modulated.append(z_mod)
        h = z_mod if i == last else _activate(z_mod, params.activation)

    tape = None
    if record:
        tape = GradientTape(id(params), params.version, params.layer_dims,
                            inputs, pres, modulated, mods, squeeze)
    out = h[0] if squeeze else h
    return out, tape


def mlp_forward(params: MlpParams, x, counter=None, record: bool = False):
    """
    Passe avant sans modulation (les couches modulees sont ignorees).

    Returns:
        la sortie, ou (sortie, bande) si record est vrai
    """
    out, tape = _forward(params, x, None, counter, record)
    return (out, tape) if record else out


def mlp_forward_modulated(params: MlpParams, x, mods: FilmParams, counter=None,
                          record: bool = False):
    """
    Passe avant modulee: lineaire -> FiLM -> activation -> lineaire suivante.

    Les modulations peuvent etre partagees (D_H,) ou propres a chaque ligne (N, D_H).
    """
    out, tape = _forward(params, x, mods, counter, record)
    return (out, tape) if record else out


def _reduce_like(grad: np.ndarray, ref: np.ndarray) -> np.ndarray:
    if ref.ndim == 1 and grad.ndim == 2:
        return grad.sum(axis=0)
    return grad


def mlp_backward(tape: GradientTape, params: MlpParams, upstream):
    """
    Retropropagation a partir d'un gradient amont sur la sortie.

    Returns:
        (MlpGrads, gradient d'entree, FilmParams des gradients ou None)
    """
    if (tape.params_id != id(params) or tape.params_version != params.version
            or tape.layer_dims != params.layer_dims):
        raise StaleTapeError("bande produite par d'autres parametres")
    g, _ = _as_batch(upstream)
    if g.shape != tape.modulated[-1].shape:
        raise ShapeError(f"gradient amont {g.shape} != sortie {tape.modulated[-1].shape}")

    mods = tape.mods
    mod_index = {layer: k for k, layer in enumerate(params.modulated_layers)} if mods else {}
    d_alpha = [None] * (mods.k if mods else 0)
    d_beta = [None] * (mods.k if mods else 0)
    d_w = [None] * params.depth
    d_b = [None] * params.depth

    last = params.depth - 1
    for i in range(last, -1, -1):
        if i != last:
            g = g * _activation_grad(tape.modulated[i], params.activation)
        if i in mod_index:
            k = mod_index[i]
            d_alpha[k] = _reduce_like(g * tape.pre[i], mods.alpha[k])
            d_beta[k] = _reduce_like(g, mods.beta[k])
            g = g * (1.0 + mods.alpha[k])
        d_w[i] = tape.inputs[i].T @ g
        d_b[i] = g.sum(axis=0)
        g = g @ params.weights[i].T

    grad_in = g[0] if tape.squeeze else g
    film_grads = FilmParams(d_alpha, d_beta) if mods else None
    return MlpGrads(d_w, d_b), grad_in, film_grads
