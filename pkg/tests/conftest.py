import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def central_diff(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f(x)
        x[i] = old - eps
        lo = f(x)
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-7):
    """Relative agreement with an absolute floor where the gradient is ~0."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    bad = np.abs(analytic - numeric) > np.maximum(rtol * scale, atol)
    assert not bad.any(), f"max abs err {np.max(np.abs(analytic - numeric)):.3g} at {np.argwhere(bad)[:3].tolist()}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class FrozenStopGradients:
    """Record every ``stop_gradient`` output once, then replay those values as constants.

    Finite differences of a graph with stop-gradients only make sense on the
    surrogate in which each stopped value is held at the base point; this
    helper builds that surrogate by patching ``autodiff.stop_gradient``.
    """

    def __init__(self, monkeypatch):
        from poservq import autodiff as ad

        self._real = ad.stop_gradient
        self._values: list[np.ndarray] = []
        self._cursor: int | None = None  # None while recording
        monkeypatch.setattr(ad, "stop_gradient", self._call)

    def replay(self):
        self._cursor = 0

    def _call(self, x):
        if self._cursor is None:
            out = self._real(x)
            self._values.append(out.value.copy())
            return out
        v = self._values[self._cursor]
        self._cursor += 1
        return x.tape.constant(v)


def model_grad_check(model, batch, monkeypatch, per_tensor=12, seed=0, rtol=1e-4, atol=1e-7):
    """FD check of ``forward(batch).final`` w.r.t. sampled entries of every trainable tensor."""
    frozen = FrozenStopGradients(monkeypatch)
    fwd = model.forward(batch)
    grads = fwd.tape.backward(fwd.final)
    targets = {k: (model.params, k, grads[t]) for k, t in fwd.params.items()}
    rng = np.random.default_rng(seed)
    checked = 0

    def loss():
        frozen.replay()
        return model.forward(batch).final.item()

    def check(get, put, analytic, name):
        nonlocal checked
        flat = analytic.ravel()
        picks = rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False)
        base = get().copy()
        for i in picks:
            idx = np.unravel_index(i, base.shape)
            vals = []
            for sign in (1, -1):
                arr = base.copy()
                arr[idx] += sign * 1e-5
                put(arr)
                vals.append(loss())
            put(base)
            numeric = (vals[0] - vals[1]) / 2e-5
            assert_grad_close(np.array([flat[i]]), np.array([numeric]), rtol, atol)
            checked += 1

    for k, (store, key, g) in targets.items():
        check(lambda: store[key], lambda a: store.__setitem__(key, a), g, k)
    pc = model.pose_codebook
    check(lambda: pc.entries, lambda a: setattr(pc, "entries", a), grads[fwd.pose_codebook], "pose_codebook")
    return checked


def tiny_config(**overrides):
    from poservq.model import TrainConfig

    base = dict(latent_dim=4, width=8, res_blocks=1, crop_length=8, stride=4, residual_codebook_size=8,
                batch_size=2, iterations=20, warmup=5, val_every=5, checkpoint_every=10)
    base.update(overrides)
    return TrainConfig(**base)


def tiny_setup(stages=2, seed=0, **overrides):
    """A tiny model plus one generic batch of synthetic crops."""
    from poservq.model import MotionTokenizer
    from poservq.parser import default_schema
    from poservq.skeleton import default_skeleton
    from poservq.synth import generate_dataset
    from poservq.training import TrainingData

    cfg = tiny_config(stages=stages, seed=seed, **overrides)
    sk, sch = default_skeleton(), default_schema()
    model = MotionTokenizer.init(cfg, sch, sk, np.random.default_rng(seed))
    data = TrainingData(generate_dataset(per_class=1, length=24, seed=seed), sch, sk, cfg.crop_length, cfg.stride)
    return model, data.sample_batch(np.random.default_rng(seed + 1), cfg.batch_size)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
