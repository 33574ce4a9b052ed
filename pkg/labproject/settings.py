"""
Django settings for the DWP laboratory.

Read through `django.conf.settings`. Point DJANGO_SETTINGS_MODULE at
another module to swap the whole set. DWP_OUTPUT_DIR and DWP_DATA_DIR
override the two directories.
"""

import os


# Build paths inside the project like this: os.path.join(BASE_DIR, ...)
BASE_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

OUTPUT_DIR = os.environ.get('DWP_OUTPUT_DIR', os.path.join(BASE_DIR, 'runs'))

DATA_DIR = os.environ.get('DWP_DATA_DIR', os.path.join(BASE_DIR, 'data'))


# Unused: there is no web surface and no database.
SECRET_KEY = os.environ.get('DJANGO_SECRET_KEY', 'dwplab-local-only')

DEBUG = False

ALLOWED_HOSTS = []

# Application definition
INSTALLED_APPS = [
    'dwplab.apps.DwplabConfig',
]

DATABASES = {}

USE_TZ = True


# Attack defaults. Budgets are on the [0,1] pixel scale: 16/255 and 2/255
# are the 8-bit budgets of the reference setup.
ATTACK_DEFAULTS = {
    'epsilon': 16 / 255,
    'alpha': 2 / 255,
    'iters': 100,
    'mu': 1.0,
    'scale_copies': 3,
    'p_di': 0.7,
    'di_range': 0.9,
    'kernel': {'family': 'gaussian', 'length': 5, 'sigma': 3.0},
    'augmentation': 'dwp',
    'r': 0.7,
    'p_bern': 0.5,
    'loss': 'logit',
}

# Ghost Networks and Dual-Stage Network Erosion baseline parameterizations
EROSION_DEFAULTS = {
    'gn': {'drop_rate': 0.012, 'skip_range': 0.22, 'scale_range': 0.0, 'bias_gamma': 1.0},
    'dsne': {'drop_rate': 0.01, 'skip_range': 0.14, 'scale_range': 0.1, 'bias_gamma': 0.8},
}


# Victim zoo
ZOO_ARCHITECTURES = ['small_conv', 'small_vgg', 'small_res', 'small_incept']

TRAIN_DEFAULTS = {
    'epochs': 3,
    'batch_size': 64,
    'learning_rate': 0.01,
    'momentum': 0.9,
}

PGD_DEFAULTS = {
    'steps': 3,
    'epsilon_at': 8 / 255,
    'step_size': 2.5 * (8 / 255) / 3,
}


# Desk-scale acceptance tunables (not claims about the reference numbers)
COSINE_OFFDIAG_THRESHOLD = 0.3
GRADCAM_IOU_THRESHOLD = 0.2
DECAY_MASKS_PER_POINT = 50
DECAY_RATE_GRID = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]
ABLATION_R_GRID = [0.0, 0.35, 0.7, 1.0]
COSINE_INSTANCES = 5
COSINE_IMAGES = 10


# Parallelism cap for attacks that split a batch across workers
JOBS = 1


# Logging
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'simple': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'simple',
        },
    },
    'loggers': {
        'dwplab': {
            'handlers': ['console'],
            'level': os.environ.get('DWP_LOG_LEVEL', 'INFO'),
        },
    },
}
