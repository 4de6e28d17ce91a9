import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from gatedrecon.gating import GatingParams  # noqa: E402
from gatedrecon.illum import IlluminatorModel  # noqa: E402
from gatedrecon.render import Intrinsics  # noqa: E402
from gatedrecon.synthio import Primitive, SceneSpec, look_at, simulate_dataset  # noqa: E402

TINY_RES = (41, 21, 71)


def tiny_spec(n=4, width=32, height=18) -> SceneSpec:
    poses = [look_at([-2.0 + 4.0 * i / max(n - 1, 1), -0.5, 0.0], [0.0, 0.0, 30.0]) for i in range(n)]
    splits = ["train"] * (n - 1) + ["test"]
    prims = [
        Primitive("plane", albedo=0.3, ambient=0.05, point=(0, 3.0, 0), normal=(0, -1.0, 0)),
        Primitive("sphere", albedo=0.7, ambient=0.15, center=(0.0, 0.0, 22.0), radius=3.0),
        Primitive("plane", albedo=0.5, ambient=0.1, point=(0, 0, 34.0), normal=(0, 0, -1.0)),
    ]
    return SceneSpec(bounds=[[-10.0, -6.0, 5.0], [10.0, 4.0, 40.0]],
                     intrinsics=Intrinsics(40.0, 40.0, width / 2, height / 2, width, height),
                     poses=poses, splits=splits, primitives=prims,
                     gating=GatingParams(xi=(100, 150, 200), t_l=60, t_g=(120, 150, 200)),
                     illuminator=IlluminatorModel(Omega=(0.5, 0.4), trans=(0.5, 0.0, 0.0)))


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    return simulate_dataset(tiny_spec(), out, seed=0, resolution=TINY_RES, log=None)


@pytest.fixture(autouse=True)
def _restore_torch_state():
    threads = torch.get_num_threads()
    yield
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(False)
    np.seterr(all="warn")
