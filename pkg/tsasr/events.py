import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Callable, List, Optional

from tsasr.models import TrainingEvent

logger = logging.getLogger(__name__)

Listener = Callable[[TrainingEvent], None]


# In-process broadcast channel fanning training events out to every listener
@dataclass
class BroadcastChannel:
    _listeners: List[Listener] = field(default_factory=list)

    def subscribe(self, listener: Listener) -> Listener:
        self._listeners.append(listener)
        return listener

    def unsubscribe(self, listener: Listener) -> None:
        if listener in self._listeners:
            self._listeners.remove(listener)

    @property
    def num_listeners(self) -> int:
        return len(self._listeners)

    def publish(self, event: TrainingEvent) -> None:
        for listener in list(self._listeners):
            try:
                listener(event)
            except Exception as e:
                logger.error(f"Listener {listener!r} failed on {event.event}: {e}")


class MetricLogWriter:
    """Appends every event as one JSON line."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._handle: Optional[IO[str]] = self.path.open("a", encoding="utf-8")

    def __call__(self, event: TrainingEvent) -> None:
        if self._handle is None:
            raise RuntimeError("MetricLogWriter is not initialized")
        self._handle.write(json.dumps(event.to_json()) + "\n")
        self._handle.flush()

    def close(self) -> None:
        if self._handle is not None:
            self._handle.close()
            self._handle = None


def log_event(event: TrainingEvent) -> None:
    level = logging.DEBUG if event.event == "step" else logging.INFO
    logger.log(level, str(event))


def read_metric_log(path: str | Path) -> List[TrainingEvent]:
    events = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        data = json.loads(line)
        event, phase, step = data.pop("event"), data.pop("phase"), data.pop("step")
        data.pop("timestamp", None)
        events.append(TrainingEvent(event=event, phase=phase, step=step, values=data))
    return events
