"""
Configuration du moteur d'upsampling LMF
"""

import os
from dotenv import load_dotenv

load_dotenv()


def _env_list(name, default):
    """Lit une liste de reels separes par des virgules."""
    raw = os.getenv(name)
    if not raw:
        return list(default)
    return [float(v) for v in raw.split(',') if v.strip()]


class Config:
    """Configuration de base."""
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')
    SEED = int(os.getenv('SEED', '0'))

    # Parallelisme (threads) et taille fixe des unites de travail
    WORKERS = int(os.getenv('WORKERS', '4'))
    RENDER_CHUNK = int(os.getenv('RENDER_CHUNK', '4096'))

    # Format PNG optionnel (pypng)
    ENABLE_PNG = os.getenv('ENABLE_PNG', '0') == '1'

    # Modele
    MODEL_PRESET = os.getenv('MODEL_PRESET', 'desk')

    # Entrainement
    TRAIN_PATCH = int(os.getenv('TRAIN_PATCH', '16'))
    TRAIN_STEPS = int(os.getenv('TRAIN_STEPS', '2000'))
    TRAIN_BATCH = int(os.getenv('TRAIN_BATCH', '1'))
    # 0: toutes les positions du patch HR
    TRAIN_PIXELS = int(os.getenv('TRAIN_PIXELS', '0'))
    TRAIN_SCALE_MIN = float(os.getenv('TRAIN_SCALE_MIN', '1.0'))
    TRAIN_SCALE_MAX = float(os.getenv('TRAIN_SCALE_MAX', '4.0'))
    TRAIN_LR = float(os.getenv('TRAIN_LR', '1e-3'))
    TRAIN_DECAY_EVERY = int(os.getenv('TRAIN_DECAY_EVERY', '1000'))
    TRAIN_DECAY_FACTOR = float(os.getenv('TRAIN_DECAY_FACTOR', '0.5'))
    TRAIN_FLIPS = os.getenv('TRAIN_FLIPS', '0') == '1'

    # CMSR
    CMSR_TAU = float(os.getenv('CMSR_TAU', '2e-5'))
    CMSR_U = float(os.getenv('CMSR_U', '0.01'))
    CMSR_SCALES = _env_list('CMSR_SCALES', [2, 3, 4, 6, 8])


class DevelopmentConfig(Config):
    """Configuration de developpement."""
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'DEBUG')


class ProductionConfig(Config):
    """Configuration aux dimensions publiees (patch 48, lm-liif)."""
    MODEL_PRESET = os.getenv('MODEL_PRESET', 'lm-liif')
    TRAIN_PATCH = int(os.getenv('TRAIN_PATCH', '48'))
    TRAIN_BATCH = int(os.getenv('TRAIN_BATCH', '16'))
    TRAIN_STEPS = int(os.getenv('TRAIN_STEPS', '20000'))
    TRAIN_DECAY_EVERY = int(os.getenv('TRAIN_DECAY_EVERY', '5000'))


class TestingConfig(Config):
    """Configuration de test."""
    TESTING = True
    WORKERS = 1
    MODEL_PRESET = 'tiny'
    TRAIN_PATCH = 8
    TRAIN_STEPS = 20


# Mapping des configurations
config = {
    'development': DevelopmentConfig,
    'production': ProductionConfig,
    'testing': TestingConfig,
    'default': DevelopmentConfig
}


def get_config():
    """Retourne la configuration selon l'environnement."""
    env = os.getenv('LMF_ENV', 'development')
    return config.get(env, config['default'])
