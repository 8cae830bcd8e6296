from django.http import Http404
from rest_framework import status, viewsets
from rest_framework.decorators import action
from rest_framework.permissions import AllowAny
from rest_framework.response import Response

from .models import ScenarioRun, StressResult
from .msgs import MessageError, default_registry
from .serializers import AgentSummarySerializer, ScenarioRunSerializer, StressResultSerializer


class ScenarioRunViewSet(viewsets.ReadOnlyModelViewSet):
    """
    Read-only access to scenario runs and their per-agent summaries.

    Runs are started from the command line; the API only reports them.
    """
    queryset = ScenarioRun.objects.prefetch_related('agents')
    serializer_class = ScenarioRunSerializer
    permission_classes = [AllowAny]

    def get_queryset(self):
        """Optionally filter runs by status."""
        queryset = ScenarioRun.objects.prefetch_related('agents')
        run_status = self.request.query_params.get('status', None)
        if run_status is not None:
            queryset = queryset.filter(status=run_status)
        return queryset

    def list(self, request, *args, **kwargs):
        run_status = self.request.query_params.get('status', None)
        if run_status is not None:
            valid_statuses = [choice[0] for choice in ScenarioRun.STATUS_CHOICES]
            if run_status not in valid_statuses:
                return Response(
                    {
                        'error': 'Invalid status parameter',
                        'details': f'status must be one of: {", ".join(valid_statuses)}',
                        'valid_statuses': valid_statuses
                    },
                    status=status.HTTP_400_BAD_REQUEST
                )
        return super().list(request, *args, **kwargs)

    def retrieve(self, request, *args, **kwargs):
        try:
            return super().retrieve(request, *args, **kwargs)
        except Http404:
            return Response(
                {
                    'error': 'Run not found',
                    'details': f'No scenario run found with ID {kwargs.get("pk")}'
                },
                status=status.HTTP_404_NOT_FOUND
            )

    @action(detail=True, methods=['get'])
    def agents(self, request, pk=None):
        """Per-agent tracking metrics of one run."""
        try:
            run = self.get_object()
        except Http404:
            return Response(
                {
                    'error': 'Run not found',
                    'details': f'No scenario run found with ID {pk}'
                },
                status=status.HTTP_404_NOT_FOUND
            )
        serializer = AgentSummarySerializer(run.agents.all(), many=True)
        return Response(serializer.data)


class StressResultViewSet(viewsets.ReadOnlyModelViewSet):
    """Stress rows, optionally filtered by ``batch_id``."""
    queryset = StressResult.objects.all()
    serializer_class = StressResultSerializer
    permission_classes = [AllowAny]

    def get_queryset(self):
        queryset = StressResult.objects.all()
        batch_id = self.request.query_params.get('batch_id', None)
        if batch_id is not None:
            queryset = queryset.filter(batch_id=batch_id)
        return queryset


class SchemaViewSet(viewsets.ViewSet):
    """
    Message schemas loaded from the configured schema directory.
    """
    permission_classes = [AllowAny]
    lookup_field = 'name'

    @staticmethod
    def _describe(schema):
        return {
            'name': schema.name,
            'version': schema.version,
            'fields': [{
                'name': spec.name,
                'type': spec.type,
                'is_array': spec.is_array,
                'length': spec.length,
                'unit': spec.unit,
                'required': spec.required,
            } for spec in schema.fields],
            'declaration': schema.render(),
        }

    def _registry(self):
        return default_registry()

    def list(self, request):
        try:
            registry = self._registry()
        except MessageError as e:
            return Response(
                {'error': 'Schema directory is invalid', 'details': str(e)},
                status=status.HTTP_500_INTERNAL_SERVER_ERROR
            )
        return Response([self._describe(registry.get(name)) for name in registry.names()])

    def retrieve(self, request, name=None):
        try:
            registry = self._registry()
        except MessageError as e:
            return Response(
                {'error': 'Schema directory is invalid', 'details': str(e)},
                status=status.HTTP_500_INTERNAL_SERVER_ERROR
            )
        if name not in registry:
            return Response(
                {
                    'error': 'Schema not found',
                    'details': f'No schema named {name}',
                    'available': registry.names()
                },
                status=status.HTTP_404_NOT_FOUND
            )
        return Response(self._describe(registry.get(name)))
