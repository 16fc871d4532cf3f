"""Smoke test for the fedgame_py extension.

Build it first, for example:

    cargo build --release -p fedgame-python
    cp target/release/libfedgame_py.so python/fedgame_py.so
    python3 python/smoke_test.py

or `maturin develop -m crates/python/Cargo.toml`.
"""

import json
import math
import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent))

import fedgame_py as fg  # noqa: E402

ROOT = pathlib.Path(__file__).resolve().parent.parent


def check_metrics():
    y = [1.0, 2.0, 3.0]
    assert abs(fg.quantile_score(y, [1.5, 2.0, 2.0], 0.9) - (0.1 * 0.5 + 0.9 * 1.0) / 3) < 1e-12
    assert fg.icp(y, [0.0, 2.5, 2.0], [1.5, 3.0, 4.0]) == 2 / 3
    assert fg.mil([0.0, 1.0], [1.0, 4.0]) == 2.0
    try:
        fg.quantile_score([], [], 0.5)
    except ValueError:
        pass
    else:
        raise AssertionError("empty input should raise ValueError")


def check_comm():
    six = fg.comm_cost(8, preset="lstm-h6")
    assert (six["head_params"], six["total_params"]) == (2322, 996013)
    assert six["ratio"] == 1 + 2322 / (2 * 996013)
    assert round(six["head_params"] / six["total_params"], 4) == 0.0023
    twelve = fg.comm_cost(1, preset="lstm-h12")
    assert (twelve["head_params"], twelve["total_params"]) == (4644, 994852)
    assert fg.comm_cost(4, total_params=100, head_params=10, kind="fedavg")["ratio"] == 1.0


def check_synth():
    series = fg.synth(4, 2, 200, noise_sd=0.1, seed=3)
    assert len(series) == 4 and all(len(s["values"]) == 200 for s in series)
    assert sorted({s["cluster"] for s in series}) == [0, 1]
    assert fg.synth(4, 2, 200, noise_sd=0.1, seed=3) == series


def check_aggregator():
    agg = fg.Aggregator(head_dim=6, n_clients=4, seed=1, embed_dim=8, noise=False)
    deltas = [[math.sin(i + 3 * c) for i in range(6)] for c in range(4)]
    pers, att = agg.aggregate(deltas)
    assert len(pers) == 4 and len(att) == 4
    for i, row in enumerate(att):
        assert row[i] == 0.0
        assert abs(sum(row) - 1.0) < 1e-9
    assert all(sum(1 for c in mix if c != 0.0) == 2 for mix in agg.expert_mix(deltas))
    before = agg.meta_loss(deltas)
    for _ in range(20):
        agg.train_step(deltas)
    assert agg.meta_loss(deltas) < before
    same = [deltas[0]] * 4
    assert agg.meta_loss(same) < 1e-10
    assert fg.meta_loss([1.0, 0.0], [1.0, 0.0]) == 0.0


def check_experiment():
    text = (ROOT / "configs" / "quick.toml").read_text()
    assert fg.validate_config(text) == []
    bad = text.replace("embed_dim = 8", "embed_dim = 8\ntop_k = 9")
    assert any("top_k" in p for p in fg.validate_config(bad))
    out = json.loads(fg.run_experiment(text))
    assert len(out["reports"]) == 5
    assert out["eval"]["macro_avg"]["qs"] > 0
    assert json.loads(fg.run_experiment(text)) == out
    fedavg = json.loads(fg.run_experiment(text, method="fedavg"))
    assert fedavg["reports"][0]["aggregator_kind"] == "fedavg"
    assert "game" in fg.aggregator_kinds()


if __name__ == "__main__":
    for check in (check_metrics, check_comm, check_synth, check_aggregator, check_experiment):
        check()
        print(f"ok  {check.__name__}")
    print("python smoke test passed")
