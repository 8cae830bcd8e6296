"""
WSGI entry point of the formation_bridge API (served by gunicorn).
"""

import os

from django.core.wsgi import get_wsgi_application

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'formation_bridge.settings')

application = get_wsgi_application()
