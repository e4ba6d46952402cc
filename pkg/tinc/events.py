"""Events dispatched between the protocol planes, and a small listener hub."""
import inspect
import logging
from typing import Callable, Dict, List, Optional

__log__ = logging.getLogger(__name__)

__all__ = ('Emitter',
           'ReconfigurationTrigger',
           'DocumentUpdated',
           'Saturation',
           'CrossShardAborted')


class ReconfigurationTrigger:
    """Event dispatched when a revocation removes a node from service.

    Attributes
    ------------
    node: int
        The node whose DDID was revoked.
    ddid: str
        The revoked identifier.
    at: float
        Simulated time of the revocation.
    reason: str
        Why reconfiguration was requested.
    """

    __slots__ = ('node', 'ddid', 'at', 'reason')

    def __init__(self, node, ddid: str, at: float, reason: str = 'revoked'):
        self.node = node
        self.ddid = ddid
        self.at = at
        self.reason = reason

    def __str__(self):
        return 'ReconfigurationTriggerEvent'


class DocumentUpdated:
    """Event dispatched when a new DDID version is committed."""

    __slots__ = ('ddid', 'version', 'kind')

    def __init__(self, ddid: str, version: int, kind: str):
        self.ddid = ddid
        self.version = version
        self.kind = kind

    def __str__(self):
        return 'DocumentUpdatedEvent'


class Saturation:

    __slots__ = ('rate', 'capacity', 'at')

    def __init__(self, rate: float, capacity: float, at: float):
        self.rate = rate
        self.capacity = capacity
        self.at = at

    def __str__(self):
        return 'SaturationEvent'


class CrossShardAborted:

    __slots__ = ('tx_id', 'reason', 'at')

    def __init__(self, tx_id: bytes, reason: str, at: float):
        self.tx_id = tx_id
        self.reason = reason
        self.at = at

    def __str__(self):
        return 'CrossShardAbortedEvent'


class Emitter:
    """Listener registry.

    Example
    ---------
    .. code:: py

        @registry.events.listener()
        def on_revoked(event: ReconfigurationTrigger):
            print(f'{event.ddid} revoked at {event.at}')
    """

    def __init__(self):
        self._listeners: Dict[str, List[Callable]] = {}

    def listener(self, event: Optional[str] = None):
        """Decorator registering a function under ``event`` or its own name."""

        def wrapper(func):
            if inspect.iscoroutinefunction(func):
                raise TypeError('Listeners must be plain functions.')
            self.add_listener(func, event or func.__name__)
            return func

        return wrapper

    def add_listener(self, func: Callable, event: str) -> None:
        self._listeners.setdefault(event, []).append(func)

    def remove_listener(self, func: Callable, event: str) -> None:
        try:
            self._listeners[event].remove(func)
        except (KeyError, ValueError):
            pass

    def dispatch(self, event: str, payload) -> int:
        """Call every listener of ``event``; returns how many ran without raising."""
        ok = 0
        for func in list(self._listeners.get(event, ())):
            try:
                func(payload)
            except Exception:
                __log__.exception(f'Ignoring exception in listener {func.__name__} for {payload}')
            else:
                ok += 1
        return ok
