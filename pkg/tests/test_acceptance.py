"""Acceptance suite: one PASS/FAIL line per criterion (run with ``pytest -s`` to see them live).

The desk-scale experiment (criteria 8 and 9) trains nine models; set
``MUFASA_SKIP_DESK=1`` to skip it during development.
"""

import os
import time

import numpy as np
import pytest
import torch

from mufasa.cli import run_command
from mufasa.decoder import BroadcastDecoder, TransformerDecoder
from mufasa.fusion import SlotFusion, hungarian_match
from mufasa.metrics import fg_ari, mbo_metric, miou_metric
from mufasa.model import reconstruction_loss
from mufasa.slot_attention import SlotAttention
from mufasa.training import Trainer

from common import finite_difference_error, tiny_config, tiny_split
from oracles import ari_pairs, exhaustive_assignment, mbo_bruteforce, miou_bruteforce

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
LINES = []


def report(number, title, passed, detail):
    line = f"CRITERION {number:>2} {'PASS' if passed else 'FAIL'}: {title} -- {detail}"
    LINES.append(line)
    print("\n" + line)
    with open(os.path.join(ROOT, "acceptance_results.txt"), "a", encoding="utf-8") as fh:
        fh.write(line + "\n")
    assert passed, line


@pytest.fixture(scope="module", autouse=True)
def fresh_results_file():
    path = os.path.join(ROOT, "acceptance_results.txt")
    if os.path.exists(path):
        os.remove(path)
    yield


def test_c01_assignment_oracle():
    rng = np.random.default_rng(1)
    start = time.time()
    mismatches = 0
    for _ in range(1000):
        K = int(rng.integers(1, 7))
        score = rng.random((K, K))
        value, perm = exhaustive_assignment(score)
        got = hungarian_match(score)
        if list(got) != list(perm) or abs(score[np.arange(K), got].sum() - value) > 1e-12:
            mismatches += 1
    elapsed = time.time() - start
    report(1, "assignment vs exhaustive search", mismatches == 0 and elapsed < 10,
           f"{mismatches} mismatches on 1000 matrices in {elapsed:.2f} s")


def test_c02_metric_oracles():
    rng = np.random.default_rng(2)
    start = time.time()
    worst = 0.0
    for _ in range(500):
        n_gt, n_pred = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        gt = rng.integers(0, n_gt, (16, 16))
        pred = rng.integers(0, n_pred, (16, 16))
        if (gt != 0).any():
            worst = max(worst, abs(fg_ari(pred, gt) - ari_pairs(pred, gt)))
        worst = max(worst, abs(miou_metric(pred, gt) - miou_bruteforce(pred, gt)))
        worst = max(worst, abs(mbo_metric(pred, gt) - mbo_bruteforce(pred, gt)))
    elapsed = time.time() - start
    report(2, "metrics vs brute-force oracles", worst <= 1e-9 and elapsed < 60,
           f"max abs error {worst:.2e} on 500 map pairs in {elapsed:.1f} s")


def test_c03_gradient_check():
    start = time.time()
    errors = {}
    for decoder in ("transformer", "mlp"):
        torch.manual_seed(0)
        cfg = tiny_config(decoder=decoder, n_slots=3, sa_iters=2, layer_ids=(1, 2), dtype="float64")
        feats = torch.randn(1, 2, 16, 7, dtype=torch.float64)
        errors[decoder] = finite_difference_error(cfg, feats, step=1e-5)
    elapsed = time.time() - start
    worst = max(errors.values())
    report(3, "end-to-end finite differences", worst <= 1e-4 and elapsed < 120,
           ", ".join(f"{k} {v:.1e}" for k, v in errors.items()) + f" max relative error, {elapsed:.1f} s")


def test_c04_analytic_loss():
    x = torch.randn(4, 16, 7, dtype=torch.float64)
    zero = reconstruction_loss(x, x.clone()).item()
    one = reconstruction_loss(x, x + 1.0).item()
    report(4, "analytic reconstruction loss", zero == 0.0 and abs(one - 1.0) <= 1e-12,
           f"loss(x, x) = {zero}, loss(x, x + 1) = {one!r}")


def test_c05_normalisation():
    rng = np.random.default_rng(5)
    worst = {"sa": 0.0, "decoder": 0.0, "fused": 0.0, "weights": 0.0}
    for trial in range(200):
        torch.manual_seed(trial)
        K, N, d = int(rng.integers(1, 7)), 16, int(rng.choice([4, 8]))
        B = int(rng.integers(1, 3))
        h = torch.as_tensor(rng.normal(size=(B, N, d)) * rng.uniform(0.1, 10))
        sa = SlotAttention(d, d, K, mlp_hidden=8).double()
        slots, attn = sa(h, generator=torch.Generator().manual_seed(trial))
        worst["sa"] = max(worst["sa"], (attn.sum(-1) - 1).abs().max().item())
        for dec in (TransformerDecoder(d, d, N, width=8, n_layers=1, n_heads=2).double(),
                    BroadcastDecoder(d, d, N, hidden=8, n_layers=2).double()):
            _, mask = dec(slots, h)
            worst["decoder"] = max(worst["decoder"], (mask.sum(-1) - 1).abs().max().item())
        M = int(rng.integers(2, 5))
        fusion = SlotFusion(M, d, hidden=8, mask_weights="learned").double()
        with torch.no_grad():
            fusion.mask_logits.copy_(torch.as_tensor(rng.normal(size=M - 1) * 5))
        masks = [torch.as_tensor(rng.dirichlet(np.ones(K), size=(B, N))) for _ in range(M)]
        fused = fusion.fuse_masks(masks)
        worst["fused"] = max(worst["fused"], (fused.sum(-1) - 2).abs().max().item())
        worst["weights"] = max(worst["weights"], abs(fusion.mask_weights().sum().item() - 1))
    report(5, "normalisation invariants", max(worst.values()) <= 1e-6,
           ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " max deviation over 200 configurations")


def test_c06_equivariance():
    rng = np.random.default_rng(6)
    worst = 0.0
    exact = True
    for trial in range(50):
        torch.manual_seed(trial)
        K = int(rng.integers(2, 6))
        perm = torch.as_tensor(rng.permutation(K))
        sa = SlotAttention(8, 8, K, mlp_hidden=8, init_mode="learned").double()
        h = torch.randn(2, 16, 8, dtype=torch.float64)
        init = sa.slots_init.detach().expand(2, -1, -1)
        s1, a1 = sa(h, slots=init)
        s2, a2 = sa(h, slots=init[:, perm])
        worst = max(worst, (s2 - s1[:, perm]).abs().max().item(), (a2 - a1[..., perm]).abs().max().item())
        dec = BroadcastDecoder(8, 8, 16, hidden=8, n_layers=3).double()
        r1, m1 = dec(s1)
        r2, m2 = dec(s1[:, perm])
        worst = max(worst, (r2 - r1).abs().max().item(), (m2 - m1[..., perm]).abs().max().item())
        gt = rng.integers(0, 4, (16, 16))
        pred = rng.integers(0, 5, (16, 16))
        # background keeps id 0, object ids are shuffled
        relabel_gt = np.concatenate([[0], 1 + rng.permutation(3)])[gt]
        relabel_pred = rng.permutation(5)[pred]
        for f in (miou_metric, mbo_metric, fg_ari):
            exact &= f(pred, gt) == pytest.approx(f(relabel_pred, relabel_gt), abs=1e-12)
        fusion = SlotFusion(3, 8, hidden=8).double()
        masks = [torch.as_tensor(rng.dirichlet(np.ones(K), size=16)) for _ in range(3)]
        w = torch.as_tensor(rng.dirichlet(np.ones(2)))
        base = fusion.fuse_masks(masks, w).argmax(-1)
        scaled = fusion.fuse_masks(masks, w * float(rng.uniform(0.01, 100))).argmax(-1)
        exact &= bool(torch.equal(base, scaled))
    report(6, "equivariance and invariance", worst <= 1e-6 and exact,
           f"max permutation deviation {worst:.1e}; metric relabelling and mask scaling exact: {exact}")


def test_c07_degeneration():
    data = tiny_split(16)
    common = dict(layer_ids=(2,), epochs=13, dtype="float64", decoder="transformer")
    multi = Trainer(tiny_config(**common), train=data)
    single = Trainer(tiny_config(architecture="single", **common), train=data)
    a = [r["loss"] for r in multi.run_steps(max_steps=50)]
    b = [r["loss"] for r in single.run_steps(max_steps=50)]
    worst = max(abs(x - y) for x, y in zip(a, b))
    report(7, "single-layer degeneration", len(a) == 50 and worst <= 1e-9,
           f"max per-step loss gap {worst:.1e} over {len(a)} steps")


@pytest.fixture(scope="module")
def desk_results():
    if os.environ.get("MUFASA_SKIP_DESK"):
        pytest.skip("desk experiment disabled by MUFASA_SKIP_DESK")
    import desk

    results = desk.run_all(os.path.join(ROOT, "data", "shapes"))
    return desk.summarise(results)


def test_c08_desk_comparison(desk_results):
    s = desk_results
    fused = s["m_fusion"]
    ok = fused["fg_ari"] >= 0.6 and fused["mbo_i"] >= 0.5 and s["epoch_fraction"] <= 0.6
    minutes = s["seconds"] / 60
    report(8, "desk-scale comparison", ok and minutes <= 30,
           f"median M=2 FG-ARI {fused['fg_ari']:.3f}, mBO_i {fused['mbo_i']:.3f}; "
           f"baseline mBO_i {s['baseline']['mbo_i']:.3f} reached at {s['epoch_fraction']:.0%} of its epochs; "
           f"9 runs took {minutes:.1f} min")


def test_c09_fusion_ablation(desk_results):
    m, a = desk_results["m_fusion"]["mbo_i"], desk_results["avg_fusion"]["mbo_i"]
    report(9, "fusion ablation direction", m >= a - 0.02,
           f"median mBO_i m_fusion {m:.3f} vs avg_fusion {a:.3f}")


def test_c10_end_to_end_smoke(tmp_path, capsys):
    data, run = str(tmp_path / "data"), str(tmp_path / "run")
    cfg_data = os.path.join(ROOT, "configs", "demo_data.cfg")
    cfg_train = os.path.join(ROOT, "configs", "demo_train.cfg")
    codes = [
        run_command(["gen-data", "--config", cfg_data, "--out", data]),
        run_command(["train", "--config", cfg_train, "--data", data, "--out", run]),
    ]
    ckpt = os.path.join(run, "last.ckpt")
    reports = []
    for name in ("eval1", "eval2"):
        codes.append(run_command(["eval", "--ckpt", ckpt, "--data", data, "--out", str(tmp_path / name)]))
        reports.append((tmp_path / name / "report.json").read_bytes() + (tmp_path / name / "report.txt").read_bytes())
    codes.append(run_command(["export-masks", "--ckpt", ckpt, "--data", data, "--out", str(tmp_path / "masks")]))
    ok = codes == [0] * 5 and reports[0] == reports[1]
    report(10, "end-to-end smoke", ok, f"exit codes {codes}; repeated eval byte-identical: {reports[0] == reports[1]}")
