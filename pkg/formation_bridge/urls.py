"""
URL configuration for the formation_bridge project.

The formation app contributes the read-only ``/api/`` routes.
"""
from django.contrib import admin
from django.urls import path, include

from .views import health_check

urlpatterns = [
    path('admin/', admin.site.urls),
    path('api-auth/', include('rest_framework.urls')),
    path('api/health/', health_check, name='health_check'),
    path('', include('formation.urls')),
]
