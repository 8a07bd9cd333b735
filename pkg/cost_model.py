"""
Modele de cout: formules fermees du nombre de multiplications des decodeurs
et compteur instrumente des multiplications-accumulations executees.

Les formules ne comptent que les couches lineaires; les multiplications FiLM
et la ponderation du local ensemble sont rapportees a part ("overhead").
Tous les comptes sont des entiers Python (precision arbitraire).
"""

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field, asdict
from typing import Callable, Dict, Optional

from errors import DomainError

STAGES = ('latent', 'render', 'vanilla')


@dataclass(frozen=True)
class DecoderDims:
    """Dimensions des decodeurs vanilla (d_in, d_h, d_out, k) et LMF."""
    d_in: int = 580
    d_h: int = 256
    d_out: int = 3
    k: int = 5
    d_in_l: int = 578
    d_l: int = 208
    k_l: int = 2
    d_c: int = 20
    d_r: int = 16
    k_r: int = 7

    def __post_init__(self):
        for name, value in asdict(self).items():
            if int(value) != value or value < 1:
                raise DomainError(f"{name} doit etre un entier positif")
        if self.k < 2 or self.k_r < 2:
            raise DomainError("k et k_r doivent etre >= 2")


# Dimensions publiees: MLP LIIF 580/256 a 5 couches, MLP latent 578/208 et rendu 20/16 a 7 couches
PUBLISHED_DIMS = DecoderDims()

# preset -> decodeur dont la formule s'applique
DIMS_PRESETS = {
    'liif': 'vanilla',
    'lm-liif': 'lmf',
}


def _check_extent(h, w, s):
    if h < 1 or w < 1:
        raise DomainError(f"dimensions invalides: {h}x{w}")
    if int(s) != s or s < 1:
        raise DomainError(f"facteur d'echelle entier >= 1 attendu: {s}")


def macs_vanilla(dims: DecoderDims, h: int, w: int, s: int) -> int:
    """4 (d_in d_h + (k - 2) d_h^2 + d_h d_out) s^2 h w."""
    _check_extent(h, w, s)
    per_query = dims.d_in * dims.d_h + (dims.k - 2) * dims.d_h ** 2 + dims.d_h * dims.d_out
    return 4 * per_query * int(s) ** 2 * int(h) * int(w)


def macs_lmf_latent(dims: DecoderDims, h: int, w: int) -> int:
    return (dims.d_in_l * dims.d_l + (dims.k_l - 1) * dims.d_l ** 2) * int(h) * int(w)


def macs_lmf_render(dims: DecoderDims, h: int, w: int, s: int) -> int:
    per_query = dims.d_c * dims.d_r + (dims.k_r - 2) * dims.d_r ** 2 + dims.d_r * dims.d_out
    return 4 * per_query * int(s) ** 2 * int(h) * int(w)


def macs_lmf(dims: DecoderDims, h: int, w: int, s: int) -> int:
    """(d_in d_l + (k_l - 1) d_l^2) h w + 4 (d_c d_r + (k_r - 2) d_r^2 + d_r d_out) s^2 h w."""
    _check_extent(h, w, s)
    return macs_lmf_latent(dims, h, w) + macs_lmf_render(dims, h, w, s)


def macs_vanilla_at(dims: DecoderDims, out_h: int, out_w: int) -> int:
    """Variante pour une sortie de taille quelconque (echelles non entieres)."""
    per_query = dims.d_in * dims.d_h + (dims.k - 2) * dims.d_h ** 2 + dims.d_h * dims.d_out
    return 4 * per_query * int(out_h) * int(out_w)


def macs_lmf_at(dims: DecoderDims, h: int, w: int, out_h: int, out_w: int) -> int:
    per_query = dims.d_c * dims.d_r + (dims.k_r - 2) * dims.d_r ** 2 + dims.d_r * dims.d_out
    return macs_lmf_latent(dims, h, w) + 4 * per_query * int(out_h) * int(out_w)


def reduction(dims: DecoderDims, h: int, w: int, s: int) -> float:
    """Reduction relative des multiplications de LMF par rapport au decodeur vanilla."""
    return 1.0 - macs_lmf(dims, h, w, s) / macs_vanilla(dims, h, w, s)


class MacCounter:
    """
    Compteur de multiplications-accumulations d'une invocation.

    Chaque unite de travail parallele possede son propre compteur; les
    compteurs sont fusionnes par addition aux points de jonction.
    """

    def __init__(self):
        self.linear = 0
        self.film = 0
        self.ensemble = 0
        self.encoder = 0
        self.by_stage: Dict[str, int] = {name: 0 for name in STAGES}
        self.rendered_pixels = 0
        self._stage: Optional[str] = None
        self._lock = threading.Lock()

    @contextmanager
    def stage(self, name: str):
        previous = self._stage
        self._stage = name
        try:
            yield self
        finally:
            self._stage = previous

    def add_linear(self, n: int):
        self.linear += int(n)
        if self._stage is not None:
            self.by_stage[self._stage] += int(n)

    def add_film(self, n: int):
        self.film += int(n)

    def add_ensemble(self, n: int):
        self.ensemble += int(n)

    def add_encoder(self, n: int):
        self.encoder += int(n)

    def merge(self, other: 'MacCounter'):
        with self._lock:
            self.linear += other.linear
            self.film += other.film
            self.ensemble += other.ensemble
            self.encoder += other.encoder
            self.rendered_pixels += other.rendered_pixels
            for name, value in other.by_stage.items():
                self.by_stage[name] = self.by_stage.get(name, 0) + value


@dataclass
class CostReport:
    """Comptes analytiques et instrumentes d'une execution."""
    analytic_total: Optional[int]
    instrumented_total: Optional[int]
    latent: int = 0
    render: int = 0
    vanilla: int = 0
    encoder: int = 0
    overhead: int = 0
    rendered_pixels: int = 0
    scale: float = 1.0
    h: int = 0
    w: int = 0
    extra: Dict[str, object] = field(default_factory=dict)

    @property
    def matches(self) -> bool:
        return (self.analytic_total is not None and self.instrumented_total is not None
                and self.analytic_total == self.instrumented_total)

    def to_dict(self) -> Dict[str, object]:
        d = asdict(self)
        extra = d.pop('extra')
        d.update(extra)
        d['matches'] = self.matches
        return d

    def to_keyvalue(self) -> str:
        """Texte machine key=value, une paire par ligne."""
        return '\n'.join(f"{k}={'' if v is None else v}" for k, v in self.to_dict().items()) + '\n'

    def to_lines(self) -> str:
        """Rapport lisible."""
        lines = [f"Cout pour h={self.h} w={self.w} s={self.scale:g}"]
        if self.analytic_total is not None:
            lines.append(f"  analytique   : {self.analytic_total:,}")
        if self.instrumented_total is not None:
            lines.append(f"  instrumente  : {self.instrumented_total:,}")
            lines.append(f"    latent     : {self.latent:,}")
            lines.append(f"    render     : {self.render:,}")
            if self.vanilla:
                lines.append(f"    vanilla    : {self.vanilla:,}")
            lines.append(f"    encodeur   : {self.encoder:,}")
            lines.append(f"    overhead   : {self.overhead:,}")
            lines.append(f"    pixels     : {self.rendered_pixels:,}")
        if self.analytic_total is not None and self.instrumented_total is not None:
            lines.append(f"  concordance  : {'oui' if self.matches else 'NON'}")
        for k, v in self.extra.items():
            lines.append(f"  {k}: {v}")
        return '\n'.join(lines)


def instrumented_count(run: Callable[[MacCounter], object], analytic: Optional[int] = None,
                       scale: float = 1.0, h: int = 0, w: int = 0):
    """
    Execute run(counter) et construit le CostReport correspondant.

    Returns:
        (CostReport, valeur de retour de run)
    """
    counter = MacCounter()
    result = run(counter)
    report = CostReport(
        analytic_total=analytic,
        instrumented_total=counter.linear,
        latent=counter.by_stage['latent'],
        render=counter.by_stage['render'],
        vanilla=counter.by_stage['vanilla'],
        encoder=counter.encoder,
        overhead=counter.film + counter.ensemble,
        rendered_pixels=counter.rendered_pixels,
        scale=scale, h=h, w=w,
    )
    return report, result
