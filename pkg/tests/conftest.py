import numpy as np
import pytest

from percept.denoiser import DenoiserModel, tiny_denoiser_config
from percept.encoder import FeatureEncoder, tiny_config
from percept.scenes import generate_dataset, load_manifest

# printed by the acceptance module; emitted after the run so the verdict
# lines survive pytest's output capture
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def record_criterion():
    """One pass/fail verdict line per acceptance criterion."""

    def rec(num: int, ok: bool, detail: str) -> None:
        status = "PASS" if ok else "FAIL"
        ACCEPTANCE_LINES.append(f"[criterion {num}] {status}  {detail}")
        assert ok, f"criterion {num} failed: {detail}"

    return rec


@pytest.fixture(scope="session")
def dataset(tmp_path_factory):
    """Small labeled 2-mic dataset shared across tests: (manifest, scenes, base)."""
    root = tmp_path_factory.mktemp("scenes")
    manifest = generate_dataset({"train": 2, "val": 1, "test": 3}, "cec1_like",
                                seed=9, out_dir=root, duration_s=1.0, mic_count=2,
                                with_labels=True)
    scenes, base = load_manifest(manifest)
    return manifest, scenes, base


@pytest.fixture(scope="session")
def dataset_factory(tmp_path_factory):
    """Generate a throwaway dataset in its own directory; returns the root."""

    def make(name, counts, difficulty="cec1_like", seed=5, n_mics=2,
             duration_s=1.0, with_labels=False):
        root = tmp_path_factory.mktemp(name)
        generate_dataset(counts, difficulty, seed=seed, out_dir=root,
                         duration_s=duration_s, mic_count=n_mics,
                         with_labels=with_labels)
        return str(root)

    return make


@pytest.fixture(scope="session")
def tiny_encoder():
    return FeatureEncoder.init_random(tiny_config(8), seed=1)


@pytest.fixture(scope="session")
def tiny_model():
    return DenoiserModel(tiny_denoiser_config(n_mics=2, sample_rate_hz=16000), seed=0)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
