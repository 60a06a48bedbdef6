import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hesrn.graph import HeteroGraph, SynthSpec, synth_graph

settings.register_profile(
    "hesrn", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("hesrn")

ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record(criterion: str, passed: bool, detail: str):
    ACCEPTANCE[criterion] = (passed, detail)
    print(f"\nACCEPTANCE {criterion}: {'PASS' if passed else 'FAIL'} | {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda s: (int(s.split()[0]), s)):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"criterion {name}: {'PASS' if ok else 'FAIL'} | {detail}")


@pytest.fixture
def small_graph() -> HeteroGraph:
    return synth_graph(SynthSpec(nodes_per_type=(20, 10, 10), feature_dim=(5, 4, 3), avg_degree=4.0, seed=3))


def path_graph(types, edges, target_type=0, dims=2, seed=0) -> HeteroGraph:
    """Hand-built graph; features are seeded noise."""
    types = np.asarray(types)
    c = int(types.max()) + 1
    rng = np.random.default_rng(seed)
    return HeteroGraph(
        num_nodes=types.size,
        node_type=types,
        type_names=[f"t{i}" for i in range(c)],
        features=[rng.normal(size=(int((types == t).sum()), dims)) for t in range(c)],
        edges=np.array([(a, b, 0) for a, b in edges]).reshape(-1, 3),
        target_type=target_type,
    )
