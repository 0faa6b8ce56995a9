"""Figure-1 style comparison of adversarial training pipelines on single-index teachers.

Five pipelines share the AD-stage data stream, test set and second-layer/bias
initialization for a given seed, so curves differ only in how the first layer
is obtained and whether it is trained:

- ``FullAD``: adversarial training of every layer from random init.
- ``SDthenADall`` / ``SDthenADsecond``: standard training first, rows of W
  renormalized, then adversarial training of all layers / of ``a`` and ``b``.
- ``KnownUTrainable`` / ``KnownUFixed``: every row of W set to the teacher
  direction, then adversarial training with W trained / frozen.
"""

from __future__ import annotations

import csv
import json
import os
import platform
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from robustfl.adversary import AttackConfig, attacked_losses
from robustfl.data import DataStream, MultiIndexTask, gen_dataset
from robustfl.model import TwoLayerNet
from robustfl.rng import GENERATOR_ID, seed_sequence, stream
from robustfl.robust_train import TrainConfig, adversarial_train_full, default_init, standard_train

METHODS = ("FullAD", "SDthenADall", "SDthenADsecond", "KnownUFixed", "KnownUTrainable")
TEACHERS = {"relu": "relu", "tanh": "tanh", "he2": "he2"}
UNKNOWN_DIRECTION = ("FullAD", "SDthenADall", "SDthenADsecond")
RESULT_COLUMNS = ("experiment_id", "method", "seed", "iter", "samples",
                  "robust_test_risk", "std_test_risk")
PLOT_COLUMNS = ("iter", "method", "mean_risk", "std_risk", "n_seeds")
SALT_ENV = "MIM_ROBUST_SEED_SALT"


def _teacher_kind(name: str) -> str:
    key = name.lower()
    if key not in TEACHERS:
        raise ValueError(f"unknown teacher {name!r}; expected one of ReLU, Tanh, He2")
    return TEACHERS[key]


@dataclass
class ExperimentSpec:
    teacher: str = "ReLU"
    d: int = 100
    N: int = 100
    epsilon: float = 1.0
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    batch: int = 300
    iters: int = 2000
    probe_every: int = 100
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    attack: AttackConfig = field(default_factory=AttackConfig)
    test_n: int = 10_000
    test_attack_steps: int = 20
    # None reuses the training step rule; "normalized" gives a stronger l2 evaluation,
    # since signed steps put less of the budget along u when rows are spread out
    test_step_mode: str | None = None
    test_step_size: float | None = None
    # the known-direction nets have N identical rows, so their curvature in ``a``
    # grows like N; 0.01 already oscillates at N = 100
    lr: float = 0.003
    sd_iters: int = 2000
    # at 0.003 the He2 first layer is still poorly aligned after 2000 steps
    sd_lr: float = 0.03
    batch_overrides: dict[str, int] = field(default_factory=dict)
    experiment_id: str = "exp"

    def __post_init__(self):
        if isinstance(self.attack, dict):
            self.attack = AttackConfig.from_dict(self.attack)
        _teacher_kind(self.teacher)
        if not self.methods:
            raise ValueError("methods must be nonempty")
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        bad = [m for m in self.methods if m not in METHODS]
        bad += [m for m in self.batch_overrides if m not in METHODS]
        if bad:
            raise ValueError(f"unknown method tag(s) {bad}; expected {METHODS}")
        if min(self.d, self.N, self.batch, self.iters, self.test_n) < 1:
            raise ValueError("d, N, batch, iters and test_n must be >= 1")
        if self.probe_every < 0 or self.sd_iters < 0 or self.test_attack_steps < 0:
            raise ValueError("probe_every, sd_iters and test_attack_steps must be >= 0")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        # the attack budget is the experiment's epsilon
        self.attack = AttackConfig(**{**self.attack.to_dict(), "epsilon": self.epsilon})
        self.test_attack()

    @classmethod
    def figure1(cls, teacher: str, **kw) -> ExperimentSpec:
        """Defaults of the published protocol, with 500-sample batches for He2 without known u."""
        if _teacher_kind(teacher) == "he2":
            kw.setdefault("batch_overrides", {m: 500 for m in UNKNOWN_DIRECTION})
        return cls(teacher=teacher, **kw)

    def batch_for(self, method: str) -> int:
        return self.batch_overrides.get(method, self.batch)

    def test_attack(self) -> AttackConfig:
        over = {"steps": self.test_attack_steps}
        if self.test_step_mode is not None:
            over["step_mode"] = self.test_step_mode
        if self.test_step_size is not None:
            over["step_size"] = self.test_step_size
        return AttackConfig(**{**self.attack.to_dict(), **over})

    def to_dict(self) -> dict:
        out = asdict(self)
        out["attack"] = self.attack.to_dict()
        return out

    @classmethod
    def from_dict(cls, spec: dict) -> ExperimentSpec:
        return cls(**spec)


@dataclass
class ResultRecord:
    experiment_id: str
    method: str
    seed: int
    iter: int
    samples: int
    robust_test_risk: float
    std_test_risk: float
    wall_s: float = 0.0

    def __post_init__(self):
        if self.robust_test_risk < 0 or self.std_test_risk < 0:
            raise ValueError("risks must be >= 0")

    def row(self) -> list:
        return [self.experiment_id, self.method, self.seed, self.iter, self.samples,
                repr(self.robust_test_risk), repr(self.std_test_risk)]


def seed_salt() -> int:
    raw = os.environ.get(SALT_ENV, "0").strip() or "0"
    salt = int(raw)
    if salt < 0:
        raise ValueError(f"{SALT_ENV} must be a non-negative integer")
    return salt


def salted_seed(seed: int, salt: int) -> int:
    if salt == 0:
        return int(seed)
    return int(seed_sequence(seed, "salt", salt).generate_state(1)[0])


def known_direction_net(task: MultiIndexTask, N: int, seed: int) -> TwoLayerNet:
    base = default_init(task.d, N, seed)
    return base.copy(W=np.tile(task.U[0], (N, 1)))


def _normalize_rows(W: np.ndarray) -> np.ndarray:
    nrm = np.linalg.norm(W, axis=1, keepdims=True)
    return W / np.where(nrm > 0, nrm, 1.0)


class _Prober:
    """Robust and standard risk on a fixed test set."""

    def __init__(self, task: MultiIndexTask, spec: ExperimentSpec, seed: int):
        self.data = gen_dataset(task, spec.test_n, stream(seed, "test-set").integers(2**62))
        self.attack = spec.test_attack()

    def __call__(self, net: TwoLayerNet) -> tuple[float, float]:
        rob = attacked_losses(net, self.data.X, self.data.y, self.attack, "pgd")
        std = (net.forward(self.data.X) - self.data.y) ** 2
        return float(rob.mean()), float(std.mean())


def run_cell(spec: ExperimentSpec, method: str, seed: int, salt: int = 0) -> list[ResultRecord]:
    """Train one (method, seed) pipeline and return its probe records."""
    s = salted_seed(seed, salt)
    task = MultiIndexTask.single_index(spec.d, _teacher_kind(spec.teacher), seed=s)
    probe = _Prober(task, spec, s)
    batch = spec.batch_for(method)

    if method in ("KnownUFixed", "KnownUTrainable"):
        net = known_direction_net(task, spec.N, s)
    else:
        net = default_init(spec.d, spec.N, s)
        if method != "FullAD":
            sd_cfg = TrainConfig(iters=spec.sd_iters, batch=batch, lr=spec.sd_lr,
                                 attack=spec.attack, seed=s)
            if spec.sd_iters:
                sd_net, _ = standard_train(net, DataStream(task, s, "sd-stream"), sd_cfg)
            else:
                sd_net = net
            # fresh second layer and biases, identical to FullAD's
            net = net.copy(W=_normalize_rows(sd_net.W))

    cfg = TrainConfig(iters=spec.iters, batch=batch, lr=spec.lr, attack=spec.attack,
                      freeze_first_layer=method in ("KnownUFixed", "SDthenADsecond"),
                      probe_every=spec.probe_every or spec.iters, seed=s)
    rob0, std0 = probe(net)
    records = [ResultRecord(spec.experiment_id, method, seed, 0, 0, rob0, std0, 0.0)]
    trained, trace = adversarial_train_full(net, DataStream(task, s, "ad-stream"), cfg, probe)
    for rec in trace.records:
        if rec.robust_test_risk is not None:
            records.append(ResultRecord(spec.experiment_id, method, seed, rec.iter, rec.samples,
                                        rec.robust_test_risk, rec.std_test_risk, rec.wall_s))
    if records[-1].iter != spec.iters:
        last = trace.records[-1]
        rob, std = probe(trained)
        records.append(ResultRecord(spec.experiment_id, method, seed, last.iter, last.samples,
                                    rob, std, last.wall_s))
    return records


def _code_version() -> str:
    from robustfl import __version__
    return __version__


def run_experiment(spec: ExperimentSpec, out_dir, threads: int = 1,
                   salt: int | None = None) -> dict[str, Path]:
    """Run every (method, seed) cell and write ``results.csv``, ``timings.csv`` and ``manifest.json``.

    ``results.csv`` is deterministic given the manifest; wall-clock times go to
    ``timings.csv`` so they do not break that.
    """
    salt = seed_salt() if salt is None else int(salt)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = [(m, s) for m in spec.methods for s in spec.seeds]
    with ThreadPoolExecutor(max_workers=max(1, int(threads))) as pool:
        results = list(pool.map(lambda c: run_cell(spec, c[0], c[1], salt), cells))
    records = [r for cell in results for r in cell]

    paths = {"results": out / "results.csv", "timings": out / "timings.csv",
             "manifest": out / "manifest.json"}
    with open(paths["results"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        w.writerows(r.row() for r in records)
    with open(paths["timings"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("method", "seed", "iter", "wall_s"))
        w.writerows((r.method, r.seed, r.iter, f"{r.wall_s:.6f}") for r in records)
    manifest = {"spec": spec.to_dict(), "seed_salt": salt, "code_version": _code_version(),
                "rng": GENERATOR_ID, "numpy": np.__version__, "python": platform.python_version()}
    paths["manifest"].write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return paths


def rerun_from_manifest(manifest_path, out_dir, threads: int = 1) -> dict[str, Path]:
    m = json.loads(Path(manifest_path).read_text())
    return run_experiment(ExperimentSpec.from_dict(m["spec"]), out_dir, threads, m["seed_salt"])


def read_results(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def emit_plot_data(results_csv, out_csv=None, group_by=("iter", "method"),
                   value: str = "robust_test_risk") -> list[dict]:
    """Mean and sample std of ``value`` over seeds for each (iter, method)."""
    rows = read_results(results_csv)
    if not rows:
        raise ValueError("no records in results file")
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault(tuple(r[g] for g in group_by), []).append(float(r[value]))
    keys = sorted(groups, key=lambda k: tuple(int(x) if x.isdigit() else x for x in k))
    agg = []
    for k in keys:
        v = np.asarray(groups[k])
        std = float(v.std(ddof=1)) if len(v) > 1 else 0.0
        row = dict(zip(group_by, k))
        row.update(mean_risk=float(v.mean()), std_risk=std, n_seeds=len(v))
        agg.append(row)
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            cols = list(group_by) + ["mean_risk", "std_risk", "n_seeds"]
            w.writerow(cols)
            w.writerows([r[c] for c in cols] for r in agg)
    return agg
