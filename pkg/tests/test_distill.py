import math

import numpy as np
import pytest
import torch
from oracles import central_difference, max_relative_error

from trustdd.augment import AugDraw
from trustdd.data import UnlabeledImageSet, make_blobs
from trustdd.distill import (
    DistillConfig,
    dsa_match_loss,
    gradient_distance,
    integrated_loss,
    mtt_match_loss,
    run_trustdd,
    single_set_distill,
    uniformity_loss,
)
from trustdd.errors import ConfigError, DegenerateTrajectoryError, ValidationError
from trustdd.networks import (
    NetworkSpec,
    ParameterVector,
    TrajectoryBuffer,
    build_network,
    forward_logits,
    make_layout,
)

D = torch.float64


def micro_problem(spec, seed=0):
    rng = np.random.default_rng(seed)
    return {
        "theta": build_network(spec, seed, dtype=np.float64).tensor(D),
        "syn_in": rng.uniform(0.2, 0.8, (4, 1, 4, 4)),
        "syn_labels": torch.tensor([0, 0, 1, 1]),
        "syn_out": rng.uniform(0.2, 0.8, (2, 1, 4, 4)),
        "real_in": torch.tensor(rng.uniform(0, 1, (6, 1, 4, 4))),
        "real_labels": torch.tensor([0, 1, 0, 1, 0, 1]),
        "real_out": torch.tensor(rng.uniform(0, 1, (3, 1, 4, 4))),
    }


# ---------------------------------------------------------------------------
# uniformity / integrated loss

def test_uniformity_zero_logits():
    assert float(uniformity_loss(torch.zeros(3, 10, dtype=D))) == pytest.approx(math.log(10), abs=1e-12)


def test_uniformity_peaked_exceeds_log_c():
    logits = torch.zeros(1, 10, dtype=D)
    logits[0, 0] = 10.0
    assert float(uniformity_loss(logits)) > math.log(10)


def test_uniformity_bound_sweep(rng):
    logits = torch.tensor(rng.normal(scale=3, size=(10_000, 10)))
    per_row = -torch.log_softmax(logits, 1).mean(1)
    assert float(per_row.min()) >= math.log(10) - 1e-9


def test_integrated_loss_degenerate_cases(micro_spec):
    p = micro_problem(micro_spec)
    x, y = p["real_in"], p["real_labels"]
    ce = torch.nn.functional.cross_entropy(forward_logits(p["theta"], x, micro_spec), y)
    assert float(integrated_loss(p["theta"], x, y, p["real_out"], 0.0, micro_spec)) == float(ce)
    assert float(integrated_loss(p["theta"], x, y, x[:0], 0.5, micro_spec)) == float(ce)


def test_integrated_loss_closed_form_zero_head():
    spec = NetworkSpec(10, (1, 8, 8), depth=2, width=4)
    theta = build_network(spec, 0, dtype=np.float64, zero_head=True).tensor(D)
    x = torch.rand(5, 1, 8, 8, dtype=D)
    y = torch.tensor([0, 3, 9, 2, 2])
    total = integrated_loss(theta, x, y, torch.rand(4, 1, 8, 8, dtype=D), 0.5, spec)
    assert float(total) == pytest.approx(1.5 * math.log(10), abs=1e-12)


def test_integrated_loss_label_validation(micro_spec):
    p = micro_problem(micro_spec)
    with pytest.raises(ValidationError):
        integrated_loss(p["theta"], p["real_in"], torch.tensor([0, 1, 2, 0, 1, 0]), None, 0.0, micro_spec)


# ---------------------------------------------------------------------------
# gradient matching

def test_gradient_distance_identical_is_zero(micro_spec, rng):
    layout = make_layout(micro_spec)
    g = torch.tensor(rng.normal(size=micro_spec.num_parameters()))
    assert float(gradient_distance(g, g.clone(), layout)) == 0.0
    assert float(gradient_distance(g, -g, layout)) > 0


def test_dsa_loss_zero_on_identical_batches(micro_spec):
    p = micro_problem(micro_spec)
    draw = AugDraw("brightness", {"delta": 0.1})
    loss = dsa_match_loss(p["theta"], p["real_in"], p["real_labels"], p["real_out"],
                          p["real_in"], p["real_labels"], p["real_out"], 0.5, draw, micro_spec)
    assert loss.item() == 0.0


def test_dsa_loss_matches_manual_assembly(micro_spec):
    p = micro_problem(micro_spec)
    theta = p["theta"].clone().requires_grad_(True)
    syn_in = torch.tensor(p["syn_in"])
    syn_out = torch.tensor(p["syn_out"])
    loss = dsa_match_loss(theta, syn_in, p["syn_labels"], syn_out, p["real_in"], p["real_labels"],
                          p["real_out"], 0.5, AugDraw(), micro_spec)

    # rebuild both gradients layer by layer with an nn.Module twin
    def module_grads(x_in, y_in, x_out):
        net = torch.nn.Sequential(
            torch.nn.Conv2d(1, 2, 3, padding=1).double(), torch.nn.InstanceNorm2d(2, eps=1e-5),
            torch.nn.ReLU(), torch.nn.AvgPool2d(2), torch.nn.Flatten(), torch.nn.Linear(8, 2).double())
        views = ParameterVector(p["theta"].numpy(), make_layout(micro_spec)).unflatten()
        with torch.no_grad():
            net[0].weight.copy_(torch.tensor(views["conv0.weight"]))
            net[0].bias.copy_(torch.tensor(views["conv0.bias"]))
            net[5].weight.copy_(torch.tensor(views["fc.weight"]))
            net[5].bias.copy_(torch.tensor(views["fc.bias"]))
        logits_in, logits_out = net(x_in), net(x_out)
        l = torch.nn.functional.cross_entropy(logits_in, y_in)
        l = l - 0.5 * torch.log_softmax(logits_out, 1).mean()
        l.backward()
        return [net[0].weight.grad.reshape(2, -1).numpy(), net[5].weight.grad.numpy()]

    gs = module_grads(syn_in, p["syn_labels"], syn_out)
    gr = module_grads(p["real_in"], p["real_labels"], p["real_out"])
    manual = 0.0
    for a, b in zip(gs, gr):
        for ra, rb in zip(a, b):
            manual += 1 - ra @ rb / max(np.linalg.norm(ra) * np.linalg.norm(rb), 1e-8)
    assert loss.item() == pytest.approx(manual, abs=1e-10)


def _fd_check(loss_fn, x0, indices=None):
    x = torch.tensor(x0, requires_grad=True)
    loss_fn(x).backward()
    analytic = x.grad.numpy()
    numeric = central_difference(lambda v: loss_fn(torch.tensor(v)).item(), x0, 1e-4, indices)
    if indices is not None:
        analytic, numeric = analytic.reshape(-1)[list(indices)], numeric.reshape(-1)[list(indices)]
    return max_relative_error(analytic, numeric)


def test_integrated_loss_pixel_gradient(micro_spec):
    p = micro_problem(micro_spec)
    f = lambda x: integrated_loss(p["theta"], x, p["syn_labels"], torch.tensor(p["syn_out"]), 0.5, micro_spec)
    assert _fd_check(f, p["syn_in"]) < 1e-3


def test_dsa_loss_pixel_gradient(micro_spec):
    p = micro_problem(micro_spec)
    f = lambda x: dsa_match_loss(p["theta"], x, p["syn_labels"], torch.tensor(p["syn_out"]), p["real_in"],
                                 p["real_labels"], p["real_out"], 0.5, AugDraw(), micro_spec)
    assert _fd_check(f, p["syn_in"]) < 1e-3


# ---------------------------------------------------------------------------
# trajectory matching

def hand_buffer(spec, seed=0, steps=(0, 1, 2, 3)):
    rng = np.random.default_rng(seed)
    start = build_network(spec, seed, dtype=np.float64)
    snaps, flat = [start], start.flat.copy()
    for _ in steps[1:]:
        flat = flat + rng.normal(scale=0.05, size=flat.shape)
        snaps.append(ParameterVector(flat.copy(), start.layout))
    return TrajectoryBuffer(snaps, list(steps), spec)


def test_mtt_zero_updates_is_one(micro_spec):
    buf = hand_buffer(micro_spec)
    p = micro_problem(micro_spec)
    loss = mtt_match_loss(torch.tensor(p["syn_in"]), p["syn_labels"], None, buf, 0, 0, 3, 0.1, 0.5)
    assert loss.item() == 1.0


def test_mtt_perfect_match_is_zero(micro_spec, rng):
    start = build_network(micro_spec, 0, dtype=np.float64)
    x = torch.tensor(rng.uniform(0, 1, (4, 1, 4, 4)))
    y = torch.tensor([0, 0, 1, 1])
    theta = start.tensor(D).requires_grad_(True)
    (g,) = torch.autograd.grad(integrated_loss(theta, x, y, None, 0.0, micro_spec), theta)
    target = ParameterVector((theta - 0.1 * g).detach().numpy(), start.layout)
    buf = TrajectoryBuffer([start, target], [0, 2], micro_spec)
    assert mtt_match_loss(x, y, None, buf, 0, 1, 2, 0.1, 0.0).item() < 1e-28


def test_mtt_degenerate_trajectory(micro_spec):
    start = build_network(micro_spec, 0, dtype=np.float64)
    buf = TrajectoryBuffer([start, start], [0, 1], micro_spec)
    with pytest.raises(DegenerateTrajectoryError):
        mtt_match_loss(torch.zeros(2, 1, 4, 4, dtype=D), torch.tensor([0, 1]), None, buf, 0, 0, 1, 0.1, 0.0)


def test_mtt_pixel_gradient(micro_spec):
    buf = hand_buffer(micro_spec)
    p = micro_problem(micro_spec)
    out = torch.tensor(p["syn_out"])
    f = lambda x: mtt_match_loss(x, p["syn_labels"], out, buf, 0, 2, 3, 0.5, 0.5)
    assert _fd_check(f, p["syn_in"]) < 1e-3


# ---------------------------------------------------------------------------
# full loop

def tiny_cfg(**kw):
    base = dict(iterations=6, ipc=2, batch_real=16, restart_every=3, lr_img=0.01, rng_seed=3)
    base.update(kw)
    return DistillConfig(**base)


@pytest.fixture(scope="module")
def tiny():
    from trustdd.corruptions import CorruptionConfig, synthesize_outliers

    t = make_blobs(2, 40, 8, seed=1)
    spec = NetworkSpec(2, (1, 8, 8), depth=2, width=8)
    t_out = synthesize_outliers(t, CorruptionConfig(rng_seed=5), 24)
    return t, t_out, spec


def test_run_trustdd_labels_fixed_and_metadata(tiny):
    t, t_out, spec = tiny
    s = run_trustdd(t, t_out, tiny_cfg(outlier_count=4), spec)
    assert list(s.s_in_labels) == [0, 0, 1, 1]
    assert s.outlier_mode == "poe" and len(s.s_out_images) == 4
    assert sorted(s.corruption_assignment) == ["invert", "jigsaw", "mosaic", "speckle"]
    assert s.s_in_images.min() >= 0 and s.s_in_images.max() <= 1
    assert len(s.telemetry.rows) == 6


def test_baseline_bit_identical_to_disabled_machinery(tiny):
    t, t_out, spec = tiny
    a = run_trustdd(t, t_out, tiny_cfg(lam=0.0, outlier_count=0), spec)
    b = run_trustdd(t, None, tiny_cfg(lam=0.0), spec)
    assert a.s_in_images.tobytes() == b.s_in_images.tobytes()
    assert len(a.s_out_images) == 0 and a.outlier_mode == "none"


def test_single_set_lambda_zero_equals_baseline(tiny):
    t, t_out, spec = tiny
    a = single_set_distill(t, t_out, tiny_cfg(method="single-set-dsa", lam=0.0), spec)
    b = run_trustdd(t, None, tiny_cfg(lam=0.0), spec)
    assert a.s_in_images.tobytes() == b.s_in_images.tobytes()
    c = single_set_distill(t, t_out, tiny_cfg(method="single-set-dsa", lam=1.0), spec)
    assert c.method == "single-set-dsa" and c.outlier_mode == "none" and len(c.s_out_images) == 0


def test_run_trustdd_writes_telemetry(tiny, tmp_path):
    t, _, spec = tiny
    path = tmp_path / "telemetry.csv"
    run_trustdd(t, None, tiny_cfg(iterations=3), spec, telemetry_path=path, telemetry_header="config_sha256=abc")
    lines = path.read_text().splitlines()
    assert lines[0] == "# config_sha256=abc"
    assert lines[1] == "iteration,distill_loss,ce_component,uniformity_component,wall_ms"
    assert len(lines) == 5


def test_run_trustdd_mtt(tiny):
    from trustdd.networks import expert_trajectories

    t, t_out, spec = tiny
    buf = expert_trajectories(t, t_out, spec, {"epochs": 4, "batch": 20}, rng_seed=0)
    cfg = tiny_cfg(method="mtt", net_steps=2, expert_segment=4, outlier_count=2, lr_img=1.0)
    s = run_trustdd(t, t_out, cfg, spec, buffer=buf)
    assert s.method == "mtt" and len(s.s_out_images) == 2


def test_config_validation():
    with pytest.raises(ConfigError):
        DistillConfig(lam=-1)
    with pytest.raises(ConfigError):
        DistillConfig(method="mtt", net_steps=3, expert_segment=3)
    with pytest.raises(ConfigError):
        DistillConfig(augmentation_policy=("jpeg",))


def test_distill_loss_decreases_on_tiny_blobs():
    t = make_blobs(2, 200, 8, seed=0)
    spec = NetworkSpec(2, (1, 8, 8), depth=2, width=16)
    s = run_trustdd(t, None, DistillConfig(iterations=100, ipc=5, lr_img=1e-3, batch_real=64, rng_seed=0), spec)
    losses = s.telemetry.losses()
    tenth = len(losses) // 10
    assert np.median(losses[-tenth:]) < np.median(losses[:tenth])


def test_mtt_start_window_defaults_to_first_half(tiny, monkeypatch):
    import trustdd.distill as distill
    from trustdd.networks import expert_trajectories

    t, _, spec = tiny
    buf = expert_trajectories(t, None, spec, {"epochs": 8, "batch": 20, "use_integrated_loss": False}, rng_seed=0)
    assert buf.steps[-1] == 16
    starts = []
    real = distill.mtt_match_loss

    def spy(*args, **kwargs):
        starts.append(args[4])
        return real(*args, **kwargs)

    monkeypatch.setattr(distill, "mtt_match_loss", spy)
    run_trustdd(t, None, tiny_cfg(method="mtt", iterations=40, lam=0.0), spec, buffer=buf)
    assert max(starts) == 8 and min(starts) == 0
    starts.clear()
    run_trustdd(t, None, tiny_cfg(method="mtt", iterations=10, lam=0.0, max_start_step=2), spec, buffer=buf)
    assert set(starts) <= {0, 2}
