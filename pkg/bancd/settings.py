import os
from pathlib import Path
from dotenv import load_dotenv

load_dotenv()

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# Only used by Django internals; there is no HTTP surface.
SECRET_KEY = os.environ.get('SECRET_KEY', 'bancd-insecure-local-key')

DEBUG = os.environ.get('DEBUG', 'False').lower() == 'true'

ALLOWED_HOSTS = os.environ.get('ALLOWED_HOSTS', 'localhost,127.0.0.1').split(',')

# Application definition
INSTALLED_APPS = [
    'django.contrib.contenttypes',
    'rest_framework',
    'changedetection',
]

# Database Configuration - run history only
DATABASES = {
    'default': {
        'ENGINE': os.environ.get('BAN_DB_ENGINE', 'django.db.backends.sqlite3'),
        'NAME': os.environ.get('BAN_DB_NAME', str(BASE_DIR / 'db.sqlite3')),
        'USER': os.environ.get('BAN_DB_USER', ''),
        'PASSWORD': os.environ.get('BAN_DB_PASSWORD', ''),
        'HOST': os.environ.get('BAN_DB_HOST', ''),
        'PORT': os.environ.get('BAN_DB_PORT', ''),
    }
}

# Internationalization
LANGUAGE_CODE = 'en-us'
TIME_ZONE = os.environ.get('TIME_ZONE', 'UTC')
USE_I18N = False
USE_TZ = True

# Default primary key field type
DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# REST Framework configuration (serializers are used for run-config validation)
REST_FRAMEWORK = {
    'DEFAULT_RENDERER_CLASSES': [
        'rest_framework.renderers.JSONRenderer',
    ],
    'DEFAULT_PARSER_CLASSES': [
        'rest_framework.parsers.JSONParser',
    ],
    'UNAUTHENTICATED_USER': None,
}

# Celery Configuration
CELERY_BROKER_URL = os.environ.get('CELERY_BROKER_URL', 'redis://localhost:6379/0')
CELERY_RESULT_BACKEND = os.environ.get('CELERY_RESULT_BACKEND', 'redis://localhost:6379/0')
CELERY_ACCEPT_CONTENT = ['json']
CELERY_TASK_SERIALIZER = 'json'
CELERY_RESULT_SERIALIZER = 'json'
CELERY_TIMEZONE = TIME_ZONE
CELERY_TASK_ALWAYS_EAGER = os.environ.get('CELERY_TASK_ALWAYS_EAGER', 'False').lower() == 'true'
# One trainer owns parameter mutation; a worker runs one job at a time.
CELERY_WORKER_CONCURRENCY = int(os.environ.get('CELERY_WORKER_CONCURRENCY', '1'))
CELERY_WORKER_PREFETCH_MULTIPLIER = 1

# Logging Configuration
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} {module} {process:d} {thread:d} {message}',
            'style': '{',
        },
        'simple': {
            'format': '{levelname} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'file': {
            'level': os.environ.get('LOG_LEVEL', 'INFO'),
            'class': 'logging.FileHandler',
            'filename': os.environ.get('LOG_FILE_PATH', str(BASE_DIR / 'logs' / 'bancd.log')),
            'formatter': 'verbose',
        },
        'console': {
            'level': os.environ.get('BAN_CONSOLE_LOG_LEVEL', 'INFO'),
            'class': 'logging.StreamHandler',
            'formatter': 'simple',
        },
    },
    'root': {
        'handlers': ['console', 'file'],
        'level': 'INFO',
    },
    'loggers': {
        'django': {
            'handlers': ['console', 'file'],
            'level': os.environ.get('LOG_LEVEL', 'INFO'),
            'propagate': False,
        },
        'changedetection': {
            'handlers': ['console', 'file'],
            'level': os.environ.get('BAN_LOG_LEVEL', 'DEBUG'),
            'propagate': False,
        },
    },
}

# Ensure logs directory exists
os.makedirs(BASE_DIR / 'logs', exist_ok=True)


# Change detection runtime
BAN_WORK_DIR = Path(os.environ.get('BAN_WORK_DIR', str(BASE_DIR / 'work_dirs')))
BAN_DEVICE = os.environ.get('BAN_DEVICE', 'cpu')
BAN_NUM_THREADS = int(os.environ.get('BAN_NUM_THREADS', '0'))  # 0 keeps torch's default
BAN_DEFAULT_SEED = int(os.environ.get('BAN_DEFAULT_SEED', '0'))
BAN_RECORD_RUNS = os.environ.get('BAN_RECORD_RUNS', 'True').lower() == 'true'
BAN_NUM_WORKERS = int(os.environ.get('BAN_NUM_WORKERS', '0'))
BAN_FPS_WARMUP = int(os.environ.get('BAN_FPS_WARMUP', '2'))
