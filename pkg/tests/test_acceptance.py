"""Acceptance criteria, one test (or a few) per criterion.

The directional criteria run the full toy pipeline: 8 classes, 800/200 split,
N=256, both victims, seven attacks, APC with default settings. Artifacts are
built in a temporary workspace; set ``APC_ACCEPT_CACHE=/some/dir`` to keep
and reuse them between runs (every artifact is stamped with its config, and
recorded CPU times travel with it).

A summary line per criterion is printed at the end of the pytest run.
"""

import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from apc_toolkit.apc import APCConfig, apc_param_count, apc_purify, build_apc, loss_geo, loss_sem, loss_total, train_apc
from apc_toolkit.attacks import AttackSpec, attack_add, attack_drop, attack_ifgm, attack_pgd, default_specs
from apc_toolkit.config import ExperimentConfig
from apc_toolkit.datasets import SHAPE_KINDS, generate_shape, load_pairs
from apc_toolkit.defenses import SOR_ALPHA, SOR_K, sor, sor_mask
from apc_toolkit.evaluation import (APCDefense, IdentityDefense, eval_cross_model, eval_defense, in_out_attack_study,
                                    measure_efficiency)
from apc_toolkit.experiment import Workspace
from apc_toolkit.geometry import chamfer_one_sided, hausdorff_one_sided, knn_indices
from apc_toolkit.victims import build_victim, freeze, input_gradient, param_count, param_hash
from conftest import double_victim
from oracles import (central_fd, combined, grid_with_outliers, nn_selection, rel_err, smooth_points, sor_oracle,
                     victim_selections)

POINTNET, DGCNN = "pointnet_mini", "dgcnn_mini"
TRAIN_ATTACKS = ("pgd", "knn", "drop")
SEEDS = (0, 1, 2)
SPECS = default_specs()


@pytest.fixture(scope="session")
def ws(tmp_path_factory):
    root = os.environ.get("APC_ACCEPT_CACHE")
    root = Path(root) if root else tmp_path_factory.mktemp("acceptance")
    return Workspace(root, ExperimentConfig())


@pytest.fixture(scope="session")
def hybrid(ws):
    """Default hybrid APC trained against pointnet_mini, with its training log."""
    return ws.apc(POINTNET)


def _detail(record_property, text):
    record_property("detail", text)


# --------------------------------------------------------------------------
# 1. geometry oracles


def _bf_sqdist(a, b):
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)


def _bf_knn(x, k):
    d = _bf_sqdist(x, x)
    np.fill_diagonal(d, np.inf)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def _random_cloud(r, n):
    style = r.integers(3)
    if style == 0:
        return r.normal(size=(n, 3))
    if style == 1:
        return r.uniform(-1, 1, size=(n, 3))
    # coarse lattice: exact ties and duplicate points
    return r.integers(-2, 3, size=(n, 3)).astype(np.float64)


@pytest.mark.criterion(1, "geometry oracles (200 clouds, N<=128, dev<=1e-6, <30 s)")
def test_c01_geometry_oracles(record_property):
    r = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = {"knn": 0, "chamfer": 0.0, "hausdorff": 0.0}
    for _ in range(200):
        n, m = int(r.integers(2, 129)), int(r.integers(1, 129))
        a, b = _random_cloud(r, n), _random_cloud(r, m)
        k = int(r.integers(1, min(16, n - 1) + 1))
        worst["knn"] = max(worst["knn"], int((knn_indices(a, k).numpy() != _bf_knn(a, k)).sum()))
        nearest = _bf_sqdist(a, b).min(axis=1)
        worst["chamfer"] = max(worst["chamfer"], abs(float(chamfer_one_sided(a, b)) - nearest.mean()))
        worst["hausdorff"] = max(worst["hausdorff"], abs(float(hausdorff_one_sided(a, b)) - nearest.max()))
    elapsed = time.perf_counter() - t0
    _detail(record_property, f"knn mismatches {worst['knn']}, chamfer dev {worst['chamfer']:.1e}, "
                             f"hausdorff dev {worst['hausdorff']:.1e}, {elapsed:.1f} s")
    assert worst["knn"] == 0
    assert worst["chamfer"] <= 1e-6 and worst["hausdorff"] <= 1e-6
    assert elapsed < 30


# --------------------------------------------------------------------------
# 2. attack budgets and cardinality contracts


def _run_pairs(ws, r, count):
    """``count`` random (model, example) draws over trained and randomly initialised victims."""
    test = ws.splits()["test"].examples
    models = [ws.victim(POINTNET), ws.victim(DGCNN)] + [freeze(build_victim(n, seed=s)) for n in (POINTNET, DGCNN)
                                                         for s in (1, 2)]
    for _ in range(count):
        model = models[int(r.integers(len(models)))]
        if r.random() < 0.5:
            ex = test[int(r.integers(len(test)))]
        else:
            kind = SHAPE_KINDS[int(r.integers(len(SHAPE_KINDS)))]
            ex = generate_shape(kind, int(r.integers(32, 129)), int(r.integers(1 << 30)))
        yield model, ex


def _rows(x):
    return {tuple(p) for p in np.asarray(x, dtype=np.float32).tolist()}


@pytest.mark.criterion(2, "attack budget soundness (100 PGD, 100 IFGM, drop/add contracts)")
def test_c02_attack_budgets(ws, record_property):
    r = np.random.default_rng(202)
    pgd_worst = ifgm_worst = -np.inf
    for i, (model, ex) in enumerate(_run_pairs(ws, r, 100)):
        eps = SPECS["pgd"].epsilon if i == 0 else float(r.uniform(0.005, 0.2))
        spec = replace(SPECS["pgd"], epsilon=eps, steps=int(r.integers(1, 21)))
        res = attack_pgd(model, ex, spec)
        pgd_worst = max(pgd_worst, float(np.abs(res.adversarial - ex.cloud).max()) - eps)
    for i, (model, ex) in enumerate(_run_pairs(ws, r, 100)):
        eps = SPECS["ifgm"].epsilon if i == 0 else float(r.uniform(0.05, 1.5))
        spec = replace(SPECS["ifgm"], epsilon=eps, steps=int(r.integers(1, 21)))
        res = attack_ifgm(model, ex, spec)
        ifgm_worst = max(ifgm_worst, float(np.linalg.norm(res.adversarial - ex.cloud)) - eps)
    drop_bad = add_bad = 0
    for model, ex in _run_pairs(ws, r, 30):
        n = len(ex.cloud)
        m = int(r.integers(0, min(50, n - 9)))
        res = attack_drop(model, ex, AttackSpec("drop", extras={"drop_count": m, "rounds": int(r.integers(1, 6))}))
        drop_bad += res.adversarial.shape != (n - m, 3) or not _rows(res.adversarial) <= _rows(ex.cloud)
    for model, ex in _run_pairs(ws, r, 30):
        n = len(ex.cloud)
        spec = replace(SPECS["add" if r.random() < 0.5 else "cluster"], steps=int(r.integers(0, 11)))
        res = attack_add(model, ex, spec, seed=int(r.integers(1000)))
        m = spec.extras["add_count"]
        add_bad += res.adversarial.shape != (n + m, 3) or not np.array_equal(
            res.adversarial[:n], ex.cloud.astype(res.adversarial.dtype))
    _detail(record_property, f"max PGD excess {pgd_worst:.1e}, max IFGM excess {ifgm_worst:.1e}, "
                             f"drop violations {drop_bad}/30, add violations {add_bad}/30")
    assert pgd_worst <= 1e-6 and ifgm_worst <= 1e-6
    assert drop_bad == 0 and add_bad == 0


# --------------------------------------------------------------------------
# 3./4. APC structure


def _random_head(model, seed):
    """Replace the zero-initialised output layer so the counter is non-trivial."""
    with torch.no_grad():
        torch.manual_seed(seed)
        for p in model.decoder[-1].parameters():
            p.normal_(0, 0.1)
    return model


@pytest.mark.criterion(3, "APC permutation equivariance (50 permutations, dev<=1e-5)")
def test_c03_permutation_equivariance(ws, record_property):
    r = np.random.default_rng(303)
    model = _random_head(build_apc(APCConfig()), 7)
    clouds = load_pairs(ws.test_store(POINTNET), attack=("pgd", "add"))[:10]
    worst = 0.0
    for i in range(50):
        x = torch.from_numpy(clouds[i % len(clouds)].adversarial)
        base = apc_purify(model, x).purified
        keep = sor_mask(x, model.config.sor_k, model.config.sor_alpha).numpy()
        pos = np.full(len(x), -1)
        pos[np.flatnonzero(keep)] = np.arange(keep.sum())
        perm = r.permutation(len(x))
        out = apc_purify(model, x[perm]).purified
        expected = base[pos[perm[keep[perm]]]]
        assert out.shape == expected.shape
        worst = max(worst, float((out - expected).abs().max()))
    _detail(record_property, f"max deviation {worst:.1e}")
    assert worst <= 1e-5


@pytest.mark.criterion(4, "identity at initialisation (bitwise)")
def test_c04_identity_at_init(ws, record_property):
    test = load_pairs(ws.test_store(POINTNET))
    r = np.random.default_rng(404)
    mismatches = 0
    for seed, i in enumerate(r.choice(len(test), 30, replace=False)):
        model = build_apc(APCConfig(seed=seed))
        x = torch.from_numpy(test[i].adversarial)
        res = apc_purify(model, x)
        mismatches += bool(torch.count_nonzero(res.counter)) or not torch.equal(res.purified, sor(x))
    _detail(record_property, f"{mismatches}/30 non-identical")
    assert mismatches == 0


# --------------------------------------------------------------------------
# 5. gradient checks


def _fd_check(points, grad, value):
    return max(rel_err(grad(x), central_fd(value, x)) for x in points)


@pytest.mark.criterion(5, "finite-difference gradient checks (10 points each, rel err<=1e-4)")
@pytest.mark.parametrize("target", ["input_gradient", "loss_geo", "loss_sem", "loss_total"])
def test_c05_gradients(target, record_property):
    r = np.random.default_rng(505)
    errors = {}
    if target == "input_gradient":
        for name in (POINTNET, DGCNN):
            model = double_victim(name, seed=11, **({"k_graph": 4} if name == DGCNN else {}))
            label = 3

            def value(z, model=model):
                logits, _ = model(torch.from_numpy(z).unsqueeze(0))
                return float(torch.nn.functional.cross_entropy(logits, torch.tensor([label])))

            pts = smooth_points(victim_selections(model), lambda: r.normal(size=(12, 3)), 10)
            errors[name] = _fd_check(pts, lambda x, model=model: input_gradient(model, x, label).numpy(), value)
    elif target == "loss_geo":
        clean = r.normal(size=(14, 3))
        for distance in ("chamfer", "hausdorff"):
            sel = nn_selection(clean)
            if distance == "hausdorff":
                base = sel

                def sel(z, base=base):
                    d = ((z[:, None, :] - clean[None]) ** 2).sum(-1).min(-1)
                    return base(z) + [np.argmax(d)]

            def grad(x, distance=distance):
                t = torch.tensor(x, requires_grad=True)
                loss_geo(t, torch.from_numpy(clean), distance).backward()
                return t.grad.numpy()

            pts = smooth_points(sel, lambda: r.normal(size=(10, 3)), 10)
            errors[distance] = _fd_check(pts, grad, lambda z, distance=distance: float(
                loss_geo(torch.from_numpy(z), torch.from_numpy(clean), distance)))
    else:
        victim = double_victim(POINTNET, seed=12)
        clean = r.normal(size=(10, 3))
        if target == "loss_sem":
            fn = lambda z: loss_sem(victim, z, clean)  # noqa: E731
            sel = victim_selections(victim)
        else:
            fn = lambda z: loss_total(victim, z, clean, 5, 1.5, 0.7)["total"]  # noqa: E731
            sel = combined(victim_selections(victim), nn_selection(clean))

        def grad(x):
            t = torch.tensor(x, requires_grad=True)
            fn(t).backward()
            return t.grad.numpy()

        pts = smooth_points(sel, lambda: r.normal(size=(10, 3)), 10)
        errors[target] = _fd_check(pts, grad, lambda z: float(fn(torch.from_numpy(z))))
    _detail(record_property, ", ".join(f"{k} {v:.1e}" for k, v in errors.items()))
    assert max(errors.values()) <= 1e-4


# --------------------------------------------------------------------------
# 6. SOR


@pytest.mark.criterion(6, "SOR removes exactly the injected outliers (50 constructions)")
def test_c06_sor_oracle(record_property):
    r = np.random.default_rng(606)
    wrong = 0
    for _ in range(50):
        cloud, outliers = grid_with_outliers(r, side=int(r.integers(5, 11)), n_out=int(r.integers(1, 5)),
                                             spacing=float(r.uniform(0.05, 0.2)))
        mask = sor_mask(cloud, SOR_K, SOR_ALPHA).numpy()
        wrong += not (np.array_equal(mask, ~outliers) and np.array_equal(mask, sor_oracle(cloud, SOR_K, SOR_ALPHA)))
    _detail(record_property, f"{wrong}/50 wrong")
    assert wrong == 0


# --------------------------------------------------------------------------
# 7. frozen victims


@pytest.mark.criterion(7, "victim hash unchanged by train_apc and eval_cross_model")
def test_c07_frozen_victims(ws, hybrid, record_property):
    victims = {name: ws.victim(name) for name in (POINTNET, DGCNN)}
    before = {name: param_hash(v) for name, v in victims.items()}
    _, tlog = train_apc(victims[POINTNET], ws.train_store(POINTNET), replace(ws.config.apc, epochs=1))
    after_train = param_hash(victims[POINTNET])
    stores = {name: ws.test_store(name) for name in victims}
    eval_cross_model(hybrid[0], POINTNET, victims, stores, ["pgd"])
    after_eval = {name: param_hash(v) for name, v in victims.items()}
    _detail(record_property, f"pointnet {before[POINTNET][:12]} -> {after_train[:12]} (train) -> "
                             f"{after_eval[POINTNET][:12]} (transfer)")
    assert tlog["victim_hash"] == before[POINTNET] == after_train
    assert after_eval == before


# --------------------------------------------------------------------------
# 8./9. victims and attacks


@pytest.mark.slow
@pytest.mark.criterion(8, "clean training: pointnet >=90% in 5 CPU-min, dgcnn >=90% in 15 CPU-min")
def test_c08_clean_training(ws, record_property):
    logs = {name: ws.victim_log(name) for name in (POINTNET, DGCNN)}
    _detail(record_property, ", ".join(f"{n} {100 * g['test_accuracy']:.1f}% in {g['cpu_seconds']:.0f} CPU-s"
                                       for n, g in logs.items()))
    assert logs[POINTNET]["test_accuracy"] >= 0.90 and logs[POINTNET]["cpu_seconds"] <= 5 * 60
    assert logs[DGCNN]["test_accuracy"] >= 0.90 and logs[DGCNN]["cpu_seconds"] <= 15 * 60


@pytest.mark.slow
@pytest.mark.criterion(9, "default PGD drives pointnet accuracy <=20%")
def test_c09_attack_collapse(ws, record_property):
    rep = eval_defense(ws.victim(POINTNET), IdentityDefense(), ws.test_store(POINTNET), ["pgd"])
    _detail(record_property, f"PGD accuracy {rep.per_attack_accuracy['pgd']:.1f}%")
    assert rep.per_attack_accuracy["pgd"] <= 20.0


# --------------------------------------------------------------------------
# 10. APC recovery


@pytest.mark.slow
@pytest.mark.criterion(10, "hybrid APC: training-attack avg >=70%, clean within 5 pts, <=30 CPU-min")
def test_c10_apc_recovery(ws, hybrid, record_property):
    victim = ws.victim(POINTNET)
    store = ws.test_store(POINTNET)
    model, tlog = hybrid
    assert tlog["pair_counts"] == {a: 240 for a in (*TRAIN_ATTACKS, "clean")}
    t0 = time.process_time()
    rep = eval_defense(victim, APCDefense(model), store, list(TRAIN_ATTACKS))
    undefended = eval_defense(victim, IdentityDefense(), store, list(TRAIN_ATTACKS))
    eval_cpu = time.process_time() - t0
    cpu = (ws.data_cpu_seconds() + ws.victim_log(POINTNET)["cpu_seconds"]
           + ws.attack_cpu_seconds(POINTNET, "train", TRAIN_ATTACKS)
           + ws.attack_cpu_seconds(POINTNET, "test", TRAIN_ATTACKS) + tlog["cpu_seconds"] + eval_cpu)
    gap = undefended.clean_accuracy - rep.clean_accuracy
    _detail(record_property, f"avg {rep.average:.1f}% (" + ", ".join(
        f"{a} {v:.1f}" for a, v in rep.per_attack_accuracy.items()) + f"), clean {rep.clean_accuracy:.1f}% vs "
        f"{undefended.clean_accuracy:.1f}% undefended, {cpu / 60:.1f} CPU-min")
    assert rep.average >= 70.0
    assert gap <= 5.0
    assert cpu <= 30 * 60


# --------------------------------------------------------------------------
# 11. hybrid vs single-attack APC


@pytest.mark.slow
@pytest.mark.criterion(11, "hybrid out-attack >= every IAPC out-attack; IAPC in >= out (3 seeds)")
def test_c11_hybrid_vs_iapc(ws, hybrid, record_property):
    rows = in_out_attack_study(ws.config.apc, ws.victim(POINTNET), None, ws.test_store(POINTNET), SEEDS,
                               ws.trainer(POINTNET))
    means = {}
    for label in {r["model"] for r in rows}:
        mine = [r for r in rows if r["model"] == label]
        assert len(mine) == len(SEEDS)
        means[label] = (np.mean([r["in_attack"] for r in mine]), np.mean([r["out_attack"] for r in mine]))
    _detail(record_property, ", ".join(f"{k} in {v[0]:.1f}/out {v[1]:.1f}" for k, v in sorted(means.items())))
    iapc = [k for k in means if k != "hybrid"]
    assert len(iapc) == 3
    for k in iapc:
        assert means["hybrid"][1] >= means[k][1], k
        assert means[k][0] >= means[k][1], k


# --------------------------------------------------------------------------
# 12. transfer


@pytest.mark.slow
@pytest.mark.criterion(12, "APC[pointnet] lifts dgcnn avg by >=20 pts without parameter changes")
def test_c12_cross_model(ws, hybrid, record_property):
    apc = hybrid[0]
    before = param_hash(apc)
    tm = eval_cross_model(apc, POINTNET, {DGCNN: ws.victim(DGCNN)}, {DGCNN: ws.test_store(DGCNN)},
                          list(ws.config.eval.attacks))
    gain = tm.entries[DGCNN] - tm.baseline[DGCNN]
    _detail(record_property, f"dgcnn avg {tm.baseline[DGCNN]:.1f}% -> {tm.entries[DGCNN]:.1f}% (+{gain:.1f})")
    assert param_hash(apc) == before
    assert gain >= 20.0


# --------------------------------------------------------------------------
# 13. efficiency


@pytest.mark.slow
@pytest.mark.criterion(13, "APC params <25% of pointnet, median purify <50 ms, one forward pass")
def test_c13_efficiency(ws, hybrid, record_property):
    apc = hybrid[0]
    ratio = apc_param_count(apc) / param_count(ws.victim(POINTNET))
    clouds = [r.adversarial for r in load_pairs(ws.test_store(POINTNET))[: ws.config.eval.efficiency_samples]]
    (row,) = measure_efficiency([APCDefense(apc)], clouds, repeats=ws.config.eval.efficiency_repeats)
    calls = []
    handle = apc.register_forward_hook(lambda *a: calls.append(1))
    try:
        counts = []
        for c in clouds[:10]:
            calls.clear()
            apc_purify(apc, c)
            counts.append(len(calls))
    finally:
        handle.remove()
    _detail(record_property, f"{apc_param_count(apc)} params ({100 * ratio:.1f}%), median "
                             f"{1000 * row['median_seconds']:.2f} ms, forward calls {sorted(set(counts))}")
    assert ratio < 0.25
    assert row["median_seconds"] < 0.050
    assert counts == [1] * len(counts)


# --------------------------------------------------------------------------
# 14. loss ablation


@pytest.mark.slow
@pytest.mark.criterion(14, "loss ablation: both >= either >= neither (3 seeds, 1-pt tolerance)")
def test_c14_loss_ablation(ws, hybrid, record_property):
    victim = ws.victim(POINTNET)
    store = ws.test_store(POINTNET)
    trainer = ws.trainer(POINTNET)
    base = ws.config.apc
    variants = {"both": base, "geo": replace(base, beta=0.0), "sem": replace(base, alpha=0.0),
                "neither": replace(base, alpha=0.0, beta=0.0)}
    means = {}
    for label, cfg in variants.items():
        accs = [eval_defense(victim, APCDefense(trainer(replace(cfg, seed=s))[0]), store).average for s in SEEDS]
        means[label] = float(np.mean(accs))
    _detail(record_property, ", ".join(f"{k} {v:.1f}" for k, v in means.items()))
    tol = 1.0
    assert means["both"] >= means["geo"] - tol and means["both"] >= means["sem"] - tol
    assert means["geo"] >= means["neither"] - tol and means["sem"] >= means["neither"] - tol
