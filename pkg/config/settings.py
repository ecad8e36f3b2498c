"""
Django settings for the dual_lora_bench project.
"""

import os
from pathlib import Path
from decouple import config

# Build paths
BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = config('SECRET_KEY', default='django-insecure-local-experiments-only')
DEBUG = config('DEBUG', default=False, cast=bool)
ALLOWED_HOSTS = []

# Numerical kernels run single-threaded unless told otherwise; must be set before numpy loads
COMPUTE_THREADS = config('DUALLORA_COMPUTE_THREADS', default=1, cast=int)
for _variable in ('OMP_NUM_THREADS', 'OPENBLAS_NUM_THREADS', 'MKL_NUM_THREADS', 'NUMEXPR_NUM_THREADS'):
    os.environ.setdefault(_variable, str(COMPUTE_THREADS))

# Application definition
INSTALLED_APPS = [
    # Local apps
    'apps.numeric',
    'apps.adapters',
    'apps.expressiveness',
    'apps.vce',
    'apps.conflictbench',
    'apps.experiments',
]

TEMPLATES = [
    {
        'BACKEND': 'django.template.backends.django.DjangoTemplates',
        'DIRS': [BASE_DIR / 'templates'],
        'APP_DIRS': True,
        'OPTIONS': {
            'autoescape': True,
        },
    },
]

# No experiment database
DATABASES = {}

# Internationalization
LANGUAGE_CODE = 'en-us'
TIME_ZONE = 'UTC'
USE_I18N = False
USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# Run outputs
OUTPUT_DIR = Path(config('DUALLORA_OUTPUT_DIR', default=str(BASE_DIR / 'runs')))
TOOL_VERSION = '0.1.0'

# Long training/benchmark checks in the test suite
RUN_EXPERIMENTS = config('DUALLORA_RUN_EXPERIMENTS', default=False, cast=bool)

# Defaults for experiment config forms (alpha None means 2 x rank)
DUALLORA_DEFAULTS = {
    'alpha': None,
    'dropout': 0.05,
    'gamma': 1.0,
    'scale_rule': 'r_over_alpha',
    'total_rank': 64,
    'moe_ranks': [32, 16, 8, 8],
    'vce_levels': 4,
    'vce_heads': 2,
    'vce_points': 4,
    'vce_channels': 32,
    'entropy_bins': 64,
}

# Logging
LOG_LEVEL = config('DUALLORA_LOG_LEVEL', default='INFO')

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {
            'format': '{levelname} {name}: {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'plain',
        },
    },
    'root': {
        'handlers': ['console'],
        'level': LOG_LEVEL,
    },
}
