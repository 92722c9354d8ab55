from .core import DEFAULT_BINDINGS, Broker, Delivery
from .wire import BrokerClient, BrokerServer

__all__ = ["Broker", "BrokerClient", "BrokerServer", "Delivery",
           "DEFAULT_BINDINGS"]
