import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'labproject.settings')
django.setup()
