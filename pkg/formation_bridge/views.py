"""
Project-level views.
"""
from django.conf import settings
from rest_framework.decorators import api_view, permission_classes
from rest_framework.permissions import AllowAny
from rest_framework.response import Response
from rest_framework import status

from formation.msgs import MessageError, default_registry


@api_view(['GET'])
@permission_classes([AllowAny])
def health_check(request):
    """
    Report API liveness, the configured bridge endpoint and whether the
    schema directory loads.
    """
    formation = settings.FORMATION
    try:
        schema_count = len(default_registry())
        schemas_ok = True
    except MessageError:
        schema_count = 0
        schemas_ok = False

    return Response({
        'status': 'healthy' if schemas_ok else 'degraded',
        'message': 'Formation bridge API is running',
        'bridge': {
            'host': formation['BRIDGE_HOST'],
            'rx_port': formation['BRIDGE_RX_PORT'],
            'tx_port': formation['BRIDGE_TX_PORT'],
            'heartbeat_port': formation['BRIDGE_HEARTBEAT_PORT'],
        },
        'schema_count': schema_count,
    }, status=status.HTTP_200_OK)
