import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gcrmf.graph import IndustryCategory, Label, RelationType, TemporalHeteroGraph

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

CATS = [IndustryCategory.MOBILITY, IndustryCategory.ENERGY, IndustryCategory.FINTECH]
RELS = list(RelationType)


def random_graph(n_nodes, n_edges, seed=0, n_features=4, horizon=10, labels=False, cats=CATS, rels=RELS):
    """Seeded random typed temporal multigraph, frozen."""
    rng = np.random.default_rng(seed)
    g = TemporalHeteroGraph(n_features)
    for _ in range(n_nodes):
        label = Label.UNKNOWN
        if labels:
            label = [Label.ILLICIT, Label.LICIT, Label.UNKNOWN][rng.integers(3)]
        g.add_node(cats[rng.integers(len(cats))], rng.normal(size=n_features), label, 0)
    for _ in range(n_edges):
        s, d = rng.integers(n_nodes, size=2)
        g.add_edge(int(s), int(d), rels[rng.integers(len(rels))], int(rng.integers(horizon + 1)),
                   float(rng.uniform(1, 100)))
    return g.freeze()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_acceptance_lines = []


@pytest.fixture(scope="session")
def acceptance_log():
    return _acceptance_lines


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)


def objective_fixture(seed=1):
    """10-node graph, two meta-paths, every loss term active; returns a zero-arg loss and the store."""
    from gcrmf.encoder import EncoderConfig
    from gcrmf.metapath import MetaPath
    from gcrmf.model import ModelConfig, init_model, prepare
    from gcrmf.training import ContrastiveConfig, LossWeights, TrainConfig, compute_losses, make_batch, second_view

    g = random_graph(10, 60, seed=seed, labels=True, horizon=3,
                     cats=[IndustryCategory.MOBILITY, IndustryCategory.FINTECH, IndustryCategory.ENERGY],
                     rels=[RelationType.FUND_TRANSFER, RelationType.CREDIT_ISSUE, RelationType.ENERGY_TRADE])
    mps = [MetaPath.parse(["Mobility", "FundTransfer", "Fintech", "FundTransfer", "Energy"]),
           MetaPath.parse(["Fintech", "CreditIssue", "Energy", "EnergyTrade", "Fintech"])]
    config = ModelConfig(EncoderConfig(hidden_dim=4, n_layers=2), mps, att_dim=3, seed=seed)
    tcfg = TrainConfig(ContrastiveConfig(tau=0.5), LossWeights(gamma_loss=0.3, eta=1.0), seed=seed)
    store = init_model(g, config, seed=seed)
    ctx = prepare(g, config, 3)
    ctx_b = second_view(g, config, tcfg, 3, seed)
    rng = np.random.default_rng(seed)
    labeled = np.flatnonzero(g.targets >= 0)
    previous = rng.normal(size=(10, 4))
    batch = make_batch(np.arange(10), ctx_b, rng, tcfg, labeled, g.targets[labeled], previous, np.ones(10, bool))

    def loss():
        return compute_losses(store, config, tcfg, ctx, batch)["l_total"]

    return loss, store, ctx
