"""
Exceptions du moteur LMF et codes de sortie de la CLI.
"""

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class LmfError(Exception):
    """Erreur de base."""
    exit_code = EXIT_DATA


class ShapeError(LmfError, ValueError):
    """Dimensions incompatibles."""

    def __init__(self, message, layer=None):
        if layer is not None:
            message = f"couche {layer}: {message}"
        super().__init__(message)
        self.layer = layer


class ModulationArityError(ShapeError):
    """Nombre de modulations different du nombre de couches modulees."""


class StaleTapeError(LmfError):
    """La bande d'enregistrement ne correspond pas aux parametres."""


class DomainError(LmfError, ValueError):
    """Argument hors domaine (dimension nulle, echelle < 1, ...)."""
    exit_code = EXIT_USAGE


class DataError(LmfError):
    """Donnees d'entree invalides (valeurs non finies, image trop petite...)."""


class FormatError(DataError):
    """Fichier mal forme."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (octet {offset})"
        super().__init__(message)
        self.offset = offset


class ChecksumError(FormatError):
    """Somme de controle invalide."""


class UnsupportedVersionError(FormatError):
    """Version de fichier non supportee."""


class NumericError(LmfError):
    """Echec numerique (perte NaN, divergence)."""
    exit_code = EXIT_NUMERIC
