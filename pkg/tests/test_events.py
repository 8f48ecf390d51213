import logging

import pytest

from tsasr.events import BroadcastChannel, MetricLogWriter, log_event, read_metric_log
from tsasr.models import TrainingEvent


@pytest.fixture
def channel():
    return BroadcastChannel()


def make_event(step=1, event="step", **values):
    return TrainingEvent(event=event, phase="full", step=step, values=values or {"loss": 1.5})


class TestBroadcastChannel:
    def test_fan_out(self, channel):
        """Test every subscriber receives every event in order"""
        first, second = [], []
        channel.subscribe(first.append)
        channel.subscribe(second.append)
        events = [make_event(step) for step in range(3)]
        for event in events:
            channel.publish(event)
        assert first == second == events
        assert channel.num_listeners == 2

    def test_unsubscribe(self, channel):
        """Test an unsubscribed listener stops receiving events"""
        received = []
        listener = channel.subscribe(received.append)
        channel.publish(make_event(1))
        channel.unsubscribe(listener)
        channel.unsubscribe(listener)
        channel.publish(make_event(2))
        assert [e.step for e in received] == [1]
        assert channel.num_listeners == 0

    def test_failing_listener_is_isolated(self, channel, caplog):
        """Test a raising listener is logged and does not block the others"""
        received = []

        def broken(event):
            raise ValueError("boom")

        channel.subscribe(broken)
        channel.subscribe(received.append)
        with caplog.at_level(logging.ERROR, logger="tsasr.events"):
            channel.publish(make_event(4))
        assert [e.step for e in received] == [4]
        assert "boom" in caplog.text


class TestMetricLog:
    def test_write_and_read(self, tmp_path):
        """Test events written as JSON lines read back with their values"""
        path = tmp_path / "logs" / "metrics.jsonl"
        writer = MetricLogWriter(path)
        writer(make_event(1, loss=2.0, lr=0.1))
        writer(make_event(2, event="eval", cpwer=0.25))
        writer.close()
        events = read_metric_log(path)
        assert [(e.event, e.step) for e in events] == [("step", 1), ("eval", 2)]
        assert events[0].values == {"loss": 2.0, "lr": 0.1}
        assert events[1].values == {"cpwer": 0.25}

    def test_appends(self, tmp_path):
        """Test a second writer appends to an existing log"""
        path = tmp_path / "metrics.jsonl"
        for step in (1, 2):
            writer = MetricLogWriter(path)
            writer(make_event(step))
            writer.close()
        assert [e.step for e in read_metric_log(path)] == [1, 2]

    def test_closed_writer(self, tmp_path):
        """Test writing after close fails"""
        writer = MetricLogWriter(tmp_path / "m.jsonl")
        writer.close()
        writer.close()
        with pytest.raises(RuntimeError, match="MetricLogWriter is not initialized"):
            writer(make_event())


def test_log_event_levels(caplog):
    """Test step events log at debug and evaluations at info"""
    with caplog.at_level(logging.DEBUG, logger="tsasr.events"):
        log_event(make_event(1))
        log_event(make_event(2, event="eval", cpwer=0.5))
    levels = [record.levelno for record in caplog.records]
    assert levels == [logging.DEBUG, logging.INFO]
    assert "eval in full at step 2: cpwer=0.5" in caplog.text
