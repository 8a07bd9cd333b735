"""
Lecture et ecriture d'images: netpbm binaire (P5/P6) et, si ENABLE_PNG est
actif, PNG via pypng. Les valeurs sont des reels dans [0, 1].
"""

import logging
import os
from typing import List, Optional, Tuple

import numpy as np

from config import get_config
from errors import DataError, FormatError, ShapeError

logger = logging.getLogger(__name__)

PNM_EXTENSIONS = ('.ppm', '.pgm', '.pnm')
PNG_EXTENSIONS = ('.png',)
_WHITESPACE = b' \t\r\n\v\f'


class _HeaderParser:
    """Lit les jetons d'en-tete netpbm (commentaires # ignores)."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def _skip(self):
        while self.pos < len(self.data):
            c = self.data[self.pos:self.pos + 1]
            if c == b'#':
                end = self.data.find(b'\n', self.pos)
                self.pos = len(self.data) if end < 0 else end + 1
            elif c in _WHITESPACE:
                self.pos += 1
            else:
                break

    def token(self) -> Tuple[bytes, int]:
        self._skip()
        start = self.pos
        while self.pos < len(self.data) and self.data[self.pos:self.pos + 1] not in _WHITESPACE + b'#':
            self.pos += 1
        if start == self.pos:
            raise FormatError("en-tete tronque", offset=start)
        return self.data[start:self.pos], start

    def integer(self, name: str) -> int:
        tok, offset = self.token()
        if not tok.isdigit():
            raise FormatError(f"{name} invalide: {tok!r}", offset=offset)
        return int(tok)


def decode_pnm(data: bytes) -> np.ndarray:
    """Decode un flux P5 (gris) ou P6 (RGB) en image (H, W, C) dans [0, 1]."""
    parser = _HeaderParser(data)
    magic, _ = parser.token()
    if magic not in (b'P5', b'P6'):
        raise FormatError(f"format netpbm non supporte: {magic!r}", offset=0)
    channels = 1 if magic == b'P5' else 3
    width = parser.integer('largeur')
    height = parser.integer('hauteur')
    maxval_offset = parser.pos
    maxval = parser.integer('maxval')
    if width < 1 or height < 1:
        raise FormatError(f"dimensions nulles: {width}x{height}", offset=maxval_offset)
    if not 1 <= maxval <= 65535:
        raise FormatError(f"maxval hors limites: {maxval}", offset=maxval_offset)
    if parser.pos >= len(data) or data[parser.pos:parser.pos + 1] not in _WHITESPACE:
        raise FormatError("separateur manquant apres maxval", offset=parser.pos)
    start = parser.pos + 1

    dtype = np.dtype('u1') if maxval < 256 else np.dtype('>u2')
    count = width * height * channels
    end = start + count * dtype.itemsize
    if end > len(data):
        raise FormatError(f"donnees tronquees: {len(data) - start} octets sur {end - start}",
                          offset=len(data))
    pixels = np.frombuffer(data, dtype=dtype, count=count, offset=start)
    if pixels.max(initial=0) > maxval:
        raise FormatError("valeur superieure a maxval", offset=start)
    return (pixels.astype(np.float64) / maxval).reshape(height, width, channels)


def encode_pnm(img: np.ndarray, maxval: int = 255) -> bytes:
    """Quantifie (arrondi au demi superieur) et encode en P5 ou P6."""
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ShapeError(f"image (H, W, 1|3) attendue, recu {img.shape}")
    if not np.all(np.isfinite(img)):
        raise DataError("image contenant des valeurs non finies")
    height, width, channels = img.shape
    q = np.floor(np.clip(img, 0.0, 1.0) * maxval + 0.5).astype(np.int64)
    dtype = '>u2' if maxval > 255 else 'u1'
    magic = b'P5' if channels == 1 else b'P6'
    header = magic + f"\n{width} {height}\n{maxval}\n".encode('ascii')
    return header + q.astype(dtype).tobytes()


def read_pnm(path: str) -> np.ndarray:
    with open(path, 'rb') as f:
        return decode_pnm(f.read())


def write_pnm(img: np.ndarray, path: str, maxval: int = 255):
    with open(path, 'wb') as f:
        f.write(encode_pnm(img, maxval))


def _require_png(enable_png: Optional[bool]):
    enabled = get_config().ENABLE_PNG if enable_png is None else enable_png
    if not enabled:
        raise DataError("PNG desactive (ENABLE_PNG=1 pour l'activer)")
    import png
    return png


def read_png(path: str, enable_png: Optional[bool] = None) -> np.ndarray:
    png = _require_png(enable_png)
    try:
        width, height, rows, info = png.Reader(filename=path).asDirect()
        flat = np.vstack([np.asarray(row, dtype=np.float64) for row in rows])
    except png.Error as e:
        raise FormatError(f"PNG illisible: {e}")
    planes = info['planes']
    img = flat.reshape(height, width, planes) / float(2 ** info['bitdepth'] - 1)
    if info.get('alpha'):
        img = img[:, :, :planes - 1]
    return img


def write_png(img: np.ndarray, path: str, enable_png: Optional[bool] = None):
    png = _require_png(enable_png)
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ShapeError(f"image (H, W, 1|3) attendue, recu {img.shape}")
    height, width, channels = img.shape
    q = np.floor(np.clip(img, 0.0, 1.0) * 255 + 0.5).astype(np.uint8)
    writer = png.Writer(width, height, greyscale=(channels == 1), bitdepth=8)
    with open(path, 'wb') as f:
        writer.write(f, q.reshape(height, width * channels).tolist())


def read_image(path: str) -> np.ndarray:
    """Lit une image selon son extension."""
    ext = os.path.splitext(path)[1].lower()
    if ext in PNG_EXTENSIONS:
        return read_png(path)
    return read_pnm(path)


def write_image(img: np.ndarray, path: str):
    ext = os.path.splitext(path)[1].lower()
    if ext in PNG_EXTENSIONS:
        write_png(img, path)
    else:
        write_pnm(img, path)
    logger.debug(f"[IO] image ecrite: {path} {img.shape}")


def load_dataset(directory: str) -> List[np.ndarray]:
    """Charge toutes les images d'un dossier, par ordre alphabetique."""
    if not os.path.isdir(directory):
        raise DataError(f"dossier introuvable: {directory}")
    extensions = PNM_EXTENSIONS + (PNG_EXTENSIONS if get_config().ENABLE_PNG else ())
    names = sorted(n for n in os.listdir(directory) if os.path.splitext(n)[1].lower() in extensions)
    if not names:
        raise DataError(f"aucune image dans {directory}")
    images = [read_image(os.path.join(directory, n)) for n in names]
    logger.info(f"[IO] {len(images)} images chargees depuis {directory}")
    return images
