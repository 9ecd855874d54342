from .authorizer import AuthorizationDenied, Authorizer, AuthorizerServer, request_subscription
from .consumer import Consumer, ConsumerConfig, Delivery, consumer_run
from .dispatcher import DispatchError, Dispatcher
from .mdc import MDC, DispatcherLink, mdc_process
from .meter import Constant, Meter, MeterConfig, RandomWalk, meter_tick
from .producer import Producer, ProducerConfig

__all__ = [
    "AuthorizationDenied",
    "Authorizer",
    "AuthorizerServer",
    "Constant",
    "Consumer",
    "ConsumerConfig",
    "Delivery",
    "DispatchError",
    "Dispatcher",
    "DispatcherLink",
    "MDC",
    "Meter",
    "MeterConfig",
    "Producer",
    "ProducerConfig",
    "RandomWalk",
    "consumer_run",
    "mdc_process",
    "meter_tick",
    "request_subscription",
]
