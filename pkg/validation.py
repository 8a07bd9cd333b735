"""
Validation des arguments de la ligne de commande.
Chaque validateur renvoie (valeur, message d'erreur).
"""

import math
import os


def validate_positive_number(value, field_name, min_val=0, max_val=None, strict=False):
    """Valide un reel fini >= min_val (> min_val si strict)."""
    if value is None:
        return None, None
    try:
        num = float(value)
    except (ValueError, TypeError):
        return None, f"{field_name} invalide"
    if not math.isfinite(num):
        return None, f"{field_name} doit etre fini"
    if num < min_val or (strict and num == min_val):
        return None, f"{field_name} doit etre {'>' if strict else '>='} {min_val}"
    if max_val is not None and num > max_val:
        return None, f"{field_name} doit etre <= {max_val}"
    return num, None


def validate_integer(value, field_name, min_val=0, max_val=None):
    """Valide un entier."""
    if value is None:
        return None, None
    try:
        num = int(value)
    except (ValueError, TypeError):
        return None, f"{field_name} invalide"
    if num < min_val:
        return None, f"{field_name} doit etre >= {min_val}"
    if max_val is not None and num > max_val:
        return None, f"{field_name} doit etre <= {max_val}"
    return num, None


def validate_choice(value, choices, field_name):
    """Valide une valeur parmi une liste de choix."""
    if value is None:
        return None, None
    if value not in choices:
        return None, f"{field_name} invalide (choix: {', '.join(choices)})"
    return value, None


def validate_scale_list(value, field_name='scales'):
    """Liste d'echelles '2,3,4' strictement croissante, toutes >= 1."""
    if value is None:
        return None, None
    try:
        scales = [float(v) for v in str(value).split(',') if v.strip()]
    except ValueError:
        return None, f"{field_name} invalide"
    if not scales:
        return None, f"{field_name} vide"
    if scales[0] < 1 or any(b <= a for a, b in zip(scales, scales[1:])):
        return None, f"{field_name} doit etre strictement croissante et >= 1"
    return scales, None


def validate_existing_path(value, field_name, directory=False):
    if value is None:
        return None, f"{field_name} requis"
    exists = os.path.isdir(value) if directory else os.path.isfile(value)
    if not exists:
        return None, f"{field_name} introuvable: {value}"
    return value, None


def collect(*results):
    """Separe les valeurs validees des messages d'erreur."""
    values = [v for v, _ in results]
    errors = [e for _, e in results if e]
    return values, errors
