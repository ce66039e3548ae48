import pytest

from ambox.runtime import (
    SIM_EPOCH_MS,
    RealRuntime,
    SimRuntime,
    TaskCancelled,
    WaitTimeout,
)


def test_virtual_time_starts_at_epoch():
    rt = SimRuntime()
    assert rt.now_ms() == SIM_EPOCH_MS


def test_sleep_order_and_time():
    rt = SimRuntime()
    trace = []

    def worker(name, delay):
        def run():
            rt.sleep(delay)
            trace.append((name, rt.now_ms() - SIM_EPOCH_MS))
        return run

    rt.spawn("b", worker("b", 200))
    rt.spawn("a", worker("a", 100))
    rt.scheduler.drain()
    assert trace == [("a", 100), ("b", 200)]


def test_same_instant_ordered_by_creation():
    rt = SimRuntime()
    trace = []
    for name in ("first", "second", "third"):
        rt.spawn(name, lambda n=name: trace.append(n))
    rt.scheduler.drain()
    assert trace == ["first", "second", "third"]


def test_run_until_lands_on_time():
    rt = SimRuntime()
    rt.spawn("t", lambda: rt.sleep(500))
    rt.scheduler.run_until(SIM_EPOCH_MS + 1000)
    assert rt.now_ms() == SIM_EPOCH_MS + 1000


def test_queue_wakes_waiter():
    rt = SimRuntime()
    q = rt.new_queue()
    got = []

    def consumer():
        got.append(q.get())
        got.append(q.get())

    def producer():
        rt.sleep(50)
        q.put("x")
        rt.sleep(50)
        q.put("y")

    rt.spawn("consumer", consumer)
    rt.spawn("producer", producer)
    rt.scheduler.drain()
    assert got == ["x", "y"]


def test_queue_timeout():
    rt = SimRuntime()
    q = rt.new_queue()
    outcome = []

    def consumer():
        try:
            q.get(timeout_ms=250)
        except WaitTimeout:
            outcome.append(rt.now_ms() - SIM_EPOCH_MS)

    rt.spawn("consumer", consumer)
    rt.scheduler.drain()
    assert outcome == [250]


def test_cancel_parked_task():
    rt = SimRuntime()
    events = []

    def sleeper():
        try:
            rt.sleep(10_000)
            events.append("woke")
        except TaskCancelled:
            events.append("cancelled")
            raise

    task = rt.spawn("sleeper", sleeper)

    def canceller():
        rt.sleep(100)
        task.cancel()

    rt.spawn("canceller", canceller)
    rt.scheduler.drain()
    assert events == ["cancelled"]
    assert not task.alive


def test_cancelled_task_never_runs_user_code_again():
    rt = SimRuntime()
    ticks = []

    def ticker():
        while True:
            rt.sleep(10)
            ticks.append(rt.now_ms())

    task = rt.spawn("ticker", ticker)

    def killer():
        rt.sleep(35)
        task.cancel()

    rt.spawn("killer", killer)
    rt.scheduler.run_until(SIM_EPOCH_MS + 200)
    assert len(ticks) == 3  # t=10,20,30; the t=40 tick must not fire


def test_signal_set_and_wait():
    rt = SimRuntime()
    log = []
    sig = rt.new_signal()

    def waiter():
        assert sig.wait(timeout_ms=1000) is True
        log.append(rt.now_ms() - SIM_EPOCH_MS)

    def setter():
        rt.sleep(300)
        sig.set()

    rt.spawn("waiter", waiter)
    rt.spawn("setter", setter)
    rt.scheduler.drain()
    assert log == [300]


def test_signal_wait_timeout_false():
    rt = SimRuntime()
    result = []
    sig = rt.new_signal()
    rt.spawn("w", lambda: result.append(sig.wait(timeout_ms=100)))
    rt.scheduler.drain()
    assert result == [False]


def test_mutex_serializes_critical_sections():
    rt = SimRuntime()
    mutex = rt.new_mutex()
    log = []

    def worker(name, hold_ms):
        def run():
            with mutex:
                log.append(f"{name}:in")
                rt.sleep(hold_ms)
                log.append(f"{name}:out")
        return run

    rt.spawn("a", worker("a", 100))
    rt.spawn("b", worker("b", 10))
    rt.scheduler.drain()
    assert log == ["a:in", "a:out", "b:in", "b:out"]


def test_task_error_propagates_to_driver():
    rt = SimRuntime()

    def boom():
        rt.sleep(10)
        raise ValueError("exploded")

    rt.spawn("boom", boom)
    with pytest.raises(RuntimeError, match="boom"):
        rt.scheduler.drain()


def test_determinism_two_identical_runs():
    def run_once():
        rt = SimRuntime()
        trace = []

        def periodic(name, interval, count):
            def run():
                for _ in range(count):
                    rt.sleep(interval)
                    trace.append((name, rt.now_ms() - SIM_EPOCH_MS))
            return run

        q = rt.new_queue()

        def pinger():
            for i in range(5):
                rt.sleep(70)
                q.put(i)

        def ponger():
            while True:
                item = q.get()
                trace.append(("pong", item, rt.now_ms() - SIM_EPOCH_MS))
                if item == 4:
                    return

        rt.spawn("a", periodic("a", 30, 10))
        rt.spawn("b", periodic("b", 50, 6))
        rt.spawn("ping", pinger)
        rt.spawn("pong", ponger)
        rt.scheduler.drain()
        return trace

    assert run_once() == run_once()


def test_real_runtime_basics():
    rt = RealRuntime()
    q = rt.new_queue()
    results = []

    def worker():
        results.append(q.get(timeout_ms=2000))

    task = rt.spawn("w", worker)
    q.put("hello")
    task.join(2.0)
    assert results == ["hello"]


def test_real_runtime_cancel_interrupts_sleep():
    rt = RealRuntime()
    outcome = []

    def sleeper():
        try:
            rt.sleep(5000)
            outcome.append("woke")
        except TaskCancelled:
            outcome.append("cancelled")

    task = rt.spawn("s", sleeper)
    import time

    time.sleep(0.05)
    task.cancel()
    task.join(2.0)
    assert outcome == ["cancelled"]