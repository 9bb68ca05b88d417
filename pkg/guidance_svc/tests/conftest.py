import threading

import numpy as np
import pytest

from guidance_svc.denoiser import init_state
from guidance_svc.server import GuidanceService


def start_service(state, echo):
    service = GuidanceService(("127.0.0.1", 0), state, echo=echo)
    thread = threading.Thread(target=service.serve_forever, daemon=True)
    thread.start()
    return service, thread


def stop_service(service, thread):
    service.shutdown()
    service.server_close()
    thread.join(timeout=5)


@pytest.fixture(scope="session")
def tiny_state():
    state = init_state(seed=3, n_features=4, l_t=5, l_i=4, d=8)
    state.start_stage2()
    return state


@pytest.fixture()
def echo_service(tiny_state):
    service, thread = start_service(tiny_state, echo=True)
    yield service.server_address
    stop_service(service, thread)


@pytest.fixture()
def denoise_service(tiny_state):
    service, thread = start_service(tiny_state, echo=False)
    yield service.server_address
    stop_service(service, thread)


@pytest.fixture()
def probe_images():
    rng = np.random.default_rng(9)
    h, w = 12, 16
    # push through float32 so wire round trips can be compared byte for byte
    img = lambda: rng.random((h, w, 3)).astype("<f4").astype(np.float64)
    dep = lambda: (rng.random((h, w)) * 8).astype("<f4").astype(np.float64)
    return {
        "rendered": img(),
        "ref_prev": img(),
        "ref_next": img(),
        "depth_target": dep(),
        "depth_prev": dep(),
        "depth_next": dep(),
    }
