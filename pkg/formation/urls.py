from django.urls import path, include
from rest_framework.routers import DefaultRouter
from . import views

router = DefaultRouter()
router.register(r'runs', views.ScenarioRunViewSet)
router.register(r'stress-results', views.StressResultViewSet)
router.register(r'schemas', views.SchemaViewSet, basename='schema')

urlpatterns = [
    path('api/', include(router.urls)),
]
