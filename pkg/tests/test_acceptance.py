"""End-to-end acceptance checks; each test carries its criterion number.

The shared two-stage run on the synthetic overfit config is a session fixture
(see conftest.py), so the whole file trains a handful of small models.
"""

import math
import time

import numpy as np
import pytest
import torch

from hiva.config import apply_overrides
from hiva.evaluation import export_attention_maps, evaluate, localization_rates, text_features, write_metrics_table
from hiva.graph import AUBranches, GraphRefine, PerAUHead, au_loss, build_topk_graph, pairwise_similarity
from hiva.gradcheck import gradient_check
from hiva.interaction import CDCA, DDCA, scaled_cross_attention
from hiva.text import diff_loss
from hiva.training import build_model, load_model, save_checkpoint, train_stage1, train_stage2


def _detail(request, text):
    request.node.criterion_detail = text


def _randomize(module, gen, scale=1.0):
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)
    return module


# 1 ---------------------------------------------------------------------------

@pytest.mark.criterion(1)
def test_analytic_oracles(request):
    t0 = time.perf_counter()
    same = diff_loss(torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)).item()
    ortho = diff_loss(torch.eye(2, dtype=torch.float64)).item()
    ln2 = au_loss(torch.tensor([0.0], dtype=torch.float64), torch.tensor([1.0], dtype=torch.float64),
                  torch.ones(1, dtype=torch.float64)).item()
    elapsed = time.perf_counter() - t0
    _detail(request, f"identical={same!r} orthonormal={ortho!r} ln2_err={abs(ln2 - math.log(2)):.1e} t={elapsed:.3f}s")
    assert abs(same - 0.5) <= 1e-10
    assert abs(ortho) <= 1e-12
    assert abs(ln2 - math.log(2)) <= 1e-10
    assert elapsed < 1.0


# 2 ---------------------------------------------------------------------------

@pytest.mark.criterion(2)
def test_gradient_suite(request):
    t0 = time.perf_counter()
    results = gradient_check()
    elapsed = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.max_rel_error)
    _detail(request, f"worst={worst.target}:{worst.max_rel_error:.2e} t={elapsed:.1f}s")
    assert {r.target for r in results} == {"diff_loss", "graph_refine", "ddca", "cdca", "fuse_and_predict", "au_loss"}
    assert all(r.max_rel_error < 1e-4 for r in results)
    assert elapsed < 30


# 3 ---------------------------------------------------------------------------

@pytest.mark.criterion(3)
def test_attention_invariants(request):
    t0 = time.perf_counter()
    gen = torch.Generator().manual_seed(0)
    rows, worst_sum, min_entry = 0, 0.0, 1.0
    isolation_ok = True
    for draw in range(1000):
        n = int(torch.randint(1, 5, (1,), generator=gen))
        d = int(torch.randint(2, 9, (1,), generator=gen))
        L = int(torch.randint(1, 5, (1,), generator=gen))
        h = w = int(torch.randint(1, 3, (1,), generator=gen))
        scale = float(torch.rand(1, generator=gen)) * 5 + 0.1
        U = torch.randn(2, n, d, generator=gen) * scale
        F = torch.randn(2, n, h, w, d, generator=gen) * scale
        T = torch.randn(n, L, d, generator=gen) * scale
        mask = torch.ones(n, L, dtype=torch.bool)
        mask[:, 1:] = torch.rand(n, L - 1, generator=gen) > 0.3
        Z = torch.randn(n, d, generator=gen) * scale
        ddca = _randomize(DDCA(d, d), gen)
        cdca = _randomize(CDCA(d), gen)
        D, rec = ddca(U, F, T, mask, Z)
        _, rec2 = cdca(F[:, 0], Z)
        for r in [*rec.values(), *rec2.values()]:
            wts = r.weights
            rows += wts.numel() // wts.shape[-1]
            worst_sum = max(worst_sum, (wts.sum(-1) - 1).abs().max().item())
            min_entry = min(min_entry, wts.min().item())
        j = int(torch.randint(0, n, (1,), generator=gen))
        T2 = T.clone()
        T2[j] = torch.randn(L, d, generator=gen)
        D2, _ = ddca(U, F, T2, mask, Z)
        others = torch.arange(n) != j
        isolation_ok &= bool(((D2 - D)[:, others] == 0).all())
    elapsed = time.perf_counter() - t0
    _detail(request, f"rows={rows} max|sum-1|={worst_sum:.1e} min={min_entry:.1e} isolation={isolation_ok} "
                     f"t={elapsed:.1f}s")
    assert worst_sum <= 1e-6 and min_entry >= 0
    assert isolation_ok
    assert elapsed < 30


# 4 ---------------------------------------------------------------------------

def _topk_oracle(S, k):
    n = len(S)
    A = np.zeros((n, n), dtype=int)
    for i in range(n):
        cands = sorted((j for j in range(n) if j != i), key=lambda j: (-S[i][j], j))
        for j in cands[:k]:
            A[i, j] = 1
    return A


@pytest.mark.criterion(4)
def test_graph_invariants(request):
    t0 = time.perf_counter()
    gen = torch.Generator().manual_seed(0)
    c, draws, checks = 6, 1000, 0
    modules = {}
    for n in range(2, 9):
        modules[n] = (_randomize(AUBranches(n, c).double(), gen, 0.5), _randomize(GraphRefine(c).double(), gen, 0.5),
                      _randomize(PerAUHead(n, c).double(), gen, 0.5))
    max_equiv_err = 0.0
    for draw in range(draws):
        n = 2 + draw % 7
        branches, refine, head = modules[n]
        U = torch.randn(n, c, generator=gen, dtype=torch.float64)
        if draw % 4 == 0:  # force exact ties
            U = torch.round(U)
            U[int(torch.randint(0, n, (1,), generator=gen))] = U[0]
        S = pairwise_similarity(U)
        for k in range(1, n):
            A = build_topk_graph(S, k)
            assert (A.sum(-1) == k).all() and (A.diagonal() == 0).all()
            assert (A.numpy().astype(int) == _topk_oracle(S.tolist(), k)).all()
            assert torch.equal(A, build_topk_graph(S, k))
            checks += 1

        # permutation equivariance of branch -> similarity -> graph -> refine -> predict
        xg = torch.randn(1, 2, 2, c, generator=gen, dtype=torch.float64)
        perm = torch.randperm(n, generator=gen)
        k = 1 + draw % (n - 1)
        pb = AUBranches(n, c).double()
        ph = PerAUHead(n, c).double()
        with torch.no_grad():
            pb.weight.copy_(branches.weight[perm])
            pb.bias.copy_(branches.bias[perm])
            ph.weight.copy_(head.weight[perm])
            ph.bias.copy_(head.bias[perm])

        def chain(br, hd):
            _, Uc = br(xg)
            Sc = pairwise_similarity(Uc)
            Ac = build_topk_graph(Sc, k)
            R = refine(Uc, Ac)
            return Sc[0], Ac[0], R[0], hd(R)[0]

        S1, A1, R1, p1 = chain(branches, head)
        S2, A2, R2, p2 = chain(pb, ph)
        assert torch.equal(A2, A1[perm][:, perm])
        max_equiv_err = max(max_equiv_err, (S2 - S1[perm][:, perm]).abs().max().item(),
                            (R2 - R1[perm]).abs().max().item(), (p2 - p1[perm]).abs().max().item())
    elapsed = time.perf_counter() - t0
    _detail(request, f"draws={draws} graph_checks={checks} equiv_err={max_equiv_err:.1e} t={elapsed:.1f}s")
    assert max_equiv_err < 1e-10
    assert elapsed < 60


# 5 ---------------------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.criterion(5)
def test_two_stage_overfit(request, overfit_cfg, overfit_data, overfit_run):
    _, samples = overfit_data
    c1, c2 = overfit_run["stage1"], overfit_run["stage2"]
    report = evaluate(c2, samples, overfit_cfg, threshold=0.5)
    steps = c1.step + c2.step
    _detail(request, f"mean_F1={report.mean_f1:.1f} steps={steps} t={overfit_run['seconds']:.0f}s")
    assert overfit_cfg.num_aus == 6 and len(samples) == 64 and overfit_cfg.model.backbone == "toy-conv"
    assert overfit_cfg.model.image_size == 32 and overfit_cfg.model.width == 64
    assert report.mean_f1 >= 95.0
    assert steps <= 2000
    assert overfit_run["seconds"] < 600


# 6 ---------------------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.criterion(6)
def test_localization(request, overfit_cfg, overfit_data, overfit_run, tmp_path):
    spec, samples = overfit_data
    c2 = overfit_run["stage2"]
    export_attention_maps(c2, samples, tmp_path, overfit_cfg)
    ids = overfit_cfg.data.au_ids
    maps = np.stack([[np.load(tmp_path / f"{s.sample_id}_{au}.npy") for au in ids] for s in samples])
    stride = overfit_cfg.model.image_size // maps.shape[-1]
    labels = np.stack([s.labels for s in samples])
    rates = localization_rates(maps, labels, spec.region_map, stride)
    _detail(request, "rates=" + ",".join(f"{au}:{r:.2f}" for au, r in zip(ids, rates)))
    assert (rates >= 0.70).all()


# 7 ---------------------------------------------------------------------------

def _mean_offdiag_abs_cos(ckpt, cfg):
    H = text_features(load_model(ckpt, cfg), cfg, ckpt.param_hash).sentences
    Hn = torch.nn.functional.normalize(H.double(), dim=-1)
    G = (Hn @ Hn.T).abs()
    n = G.shape[0]
    return ((G.sum() - G.diagonal().sum()) / (n * n - n)).item()


@pytest.mark.slow
@pytest.mark.criterion(7)
def test_regularizer_effect(request, overfit_cfg, overfit_data, overfit_run):
    _, samples = overfit_data
    cfg0 = apply_overrides(overfit_cfg, {"loss.lambda": 0.0})
    without = train_stage2(cfg0, samples, overfit_run["stage1"])
    with_reg = _mean_offdiag_abs_cos(overfit_run["stage2"], overfit_cfg)
    no_reg = _mean_offdiag_abs_cos(without, cfg0)
    _detail(request, f"lambda={overfit_cfg.loss.lam}: {with_reg:.3f}  lambda=0: {no_reg:.3f}")
    assert overfit_cfg.loss.lam > 0
    assert with_reg < no_reg


# 8 ---------------------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.criterion(8)
def test_ablation_harness(request, overfit_cfg, overfit_data, overfit_run, tmp_path):
    _, samples = overfit_data
    c1, full_ckpt = overfit_run["stage1"], overfit_run["stage2"]
    rows = [("HiVA", evaluate(full_ckpt, samples, overfit_cfg))]
    for flag, label in [("no_ddca", "w/o DDCA"), ("no_cdca", "w/o CDCA"), ("no_text", "Baseline"),
                        ("no_diff_loss", "w/o L_diff")]:
        cfg = apply_overrides(overfit_cfg, {f"ablation.{flag}": True})
        ckpt = train_stage2(cfg, samples, c1)
        assert ckpt.step == full_ckpt.step
        rows.append((label, evaluate(ckpt, samples, cfg)))
    path = write_metrics_table(rows, tmp_path / "ablation.csv")
    lines = path.read_text().splitlines()
    _detail(request, " ".join(f"{label}={rep.mean_f1:.1f}" for label, rep in rows))
    assert lines[0] == "AU," + ",".join(overfit_cfg.data.au_ids) + ",AVE"
    assert len(lines) == 6
    full = rows[0][1].mean_f1
    assert all(full >= rep.mean_f1 for _, rep in rows[1:])


# 9 ---------------------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.criterion(9)
def test_reproducibility(request, overfit_cfg, overfit_data, overfit_run, tmp_path):
    _, samples = overfit_data
    c1 = train_stage1(overfit_cfg, samples)
    c2 = train_stage2(overfit_cfg, samples, c1)
    same = True
    for name, a, b in [("s1", overfit_run["stage1"], c1), ("s2", overfit_run["stage2"], c2)]:
        pa = save_checkpoint(a, tmp_path / f"{name}_a")
        pb = save_checkpoint(b, tmp_path / f"{name}_b")
        same &= pa.read_bytes() == pb.read_bytes()
        same &= pa.with_suffix(".json").read_bytes() == pb.with_suffix(".json").read_bytes()
    ra = evaluate(overfit_run["stage2"], samples, overfit_cfg)
    rb = evaluate(c2, samples, overfit_cfg)
    _detail(request, f"checkpoints_identical={same} reports_identical={ra == rb} deterministic={overfit_cfg.deterministic}")
    assert overfit_cfg.deterministic
    assert same and ra == rb


# 10 --------------------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.criterion(10)
def test_protocol_fidelity(request, overfit_cfg, overfit_data, overfit_run, tmp_path):
    _, samples = overfit_data
    c1, c2 = overfit_run["stage1"], overfit_run["stage2"]
    seen = {}

    def hook(stage, step, model):
        if step == 0:
            seen.update({k: v.detach().clone() for k, v in model.state_dict().items()})

    train_stage2(apply_overrides(overfit_cfg, {"stage2.max_steps": 1}), samples, c1, on_step=hook)
    branch_keys = [k for k in c1.state if k.startswith(("branches.", "vision."))]
    start_equal = all(torch.equal(seen[k], c1.state[k]) for k in branch_keys)

    init = build_model(overfit_cfg).state_dict()
    untouched = [k for k in init if k.startswith(("text.", "interaction."))]
    stage1_clean = all(torch.equal(init[k], c1.state[k]) for k in untouched)

    recomputed = evaluate(c2, samples, overfit_cfg, use_cache=False)
    evaluate(c2, samples, overfit_cfg, cache_dir=tmp_path)  # writes the cache
    cached = evaluate(c2, samples, overfit_cfg, cache_dir=tmp_path)
    _detail(request, f"stage2_start_equal={start_equal} stage1_text_interaction_untouched={stage1_clean} "
                     f"cache_equal={cached == recomputed}")
    assert branch_keys and untouched
    assert start_equal and stage1_clean
    assert cached == recomputed


# training invariant ------------------------------------------------------------

@pytest.mark.slow
def test_total_loss_decreases_full_batch(overfit_cfg, overfit_data, overfit_run):
    """Over the first 50 full-batch stage-2 steps L_tot rises at most 5 times."""
    _, samples = overfit_data
    cfg = apply_overrides(overfit_cfg, {"data.batch_size": len(samples), "stage2.epochs": 50})
    ckpt = train_stage2(cfg, samples, overfit_run["stage1"])
    losses = [h["L_tot"] for h in ckpt.history]
    assert len(losses) == 50
    assert sum(b >= a for a, b in zip(losses, losses[1:])) <= 5
