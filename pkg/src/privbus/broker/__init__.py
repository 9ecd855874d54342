from .client import BrokerClient, PublisherStream
from .metrics import BrokerMetrics
from .routing import BadAuthorization, DuplicatePublisher, RoutingTable, SecureMatcher, UnknownPublisher
from .server import Broker, BrokerConfig, BrokerThread

__all__ = [
    "BadAuthorization",
    "Broker",
    "BrokerClient",
    "BrokerConfig",
    "BrokerMetrics",
    "BrokerThread",
    "DuplicatePublisher",
    "PublisherStream",
    "RoutingTable",
    "SecureMatcher",
    "UnknownPublisher",
]
