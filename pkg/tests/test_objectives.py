"""Loss functions: next-token cross-entropy, rectified flow, joint batches."""

import math

import numpy as np
import pytest

from tinyumm import tensor as T
from tinyumm.model import TinyUMM, encode_text
from tinyumm.objectives import (
    flow_loss,
    joint_step,
    make_flow_sample,
    ntp_loss,
    sample_loss,
)
from tinyumm.optim import AdamW
from tinyumm.tensor import Tensor

from test_model import rand_image, tiny_config


@pytest.fixture()
def model():
    return TinyUMM(tiny_config(), seed=0)


# ------------------------------------------------------------ cross-entropy

def test_uniform_logits_give_log_vocab():
    logits = Tensor(np.zeros((5, 256)))
    loss = ntp_loss(logits, np.arange(5), np.ones(5, dtype=bool))
    assert loss.item() == pytest.approx(math.log(256))


def test_confident_correct_logits_near_zero():
    logits = np.zeros((3, 256))
    targets = np.array([7, 8, 9])
    logits[np.arange(3), targets] = 50.0
    assert ntp_loss(Tensor(logits), targets, np.ones(3, dtype=bool)).item() < 1e-8


def test_cross_entropy_hand_value():
    # two classes with logits (0, ln 3): p(correct=1) = 3/4
    logits = Tensor(np.array([[0.0, math.log(3.0)]]))
    loss = ntp_loss(logits, np.array([1]), np.ones(1, dtype=bool))
    assert loss.item() == pytest.approx(-math.log(0.75))


def test_mask_drops_positions():
    logits = np.zeros((2, 4))
    logits[0, 0] = 50.0   # correct and confident
    logits[1, 3] = -50.0  # wrong and confident, but masked out
    mask = np.array([True, False])
    loss = ntp_loss(Tensor(logits), np.array([0, 3]), mask)
    assert loss.item() < 1e-8


# ---------------------------------------------------------------- flow math

def test_flow_sample_interpolation_identity():
    rng = np.random.default_rng(0)
    x1 = rng.normal(size=(6, 4))
    fs = make_flow_sample(x1, rng)
    assert 0.0 <= fs.t < 1.0
    assert np.allclose(fs.xt, (1 - fs.t) * fs.x0 + fs.t * fs.x1)
    assert np.array_equal(fs.v_target, fs.x1 - fs.x0)


def test_flow_sample_forced_time():
    rng = np.random.default_rng(1)
    x1 = rng.normal(size=(3, 2))
    fs = make_flow_sample(x1, rng, t=0.0)
    assert np.array_equal(fs.xt, fs.x0)
    fs = make_flow_sample(x1, np.random.default_rng(1), t=1.0)
    assert np.allclose(fs.xt, x1)


def test_flow_sample_rejects_nonfinite():
    with pytest.raises(ValueError, match="finite"):
        make_flow_sample(np.array([1.0, np.inf]), np.random.default_rng(0))


def test_true_velocity_achieves_zero_loss():
    """Given one data point, v is a deterministic function of (xt, t):
    v = (x1 - xt) / (1 - t). Plugging it in must zero the loss."""
    rng = np.random.default_rng(2)
    x1 = rng.normal(size=(5, 3))
    for _ in range(200):
        fs = make_flow_sample(x1, rng)
        v_star = (fs.x1 - fs.xt) / (1.0 - fs.t)
        assert flow_loss(Tensor(v_star), fs.v_target).item() < 1e-16


def test_flow_loss_values():
    a = Tensor(np.zeros((4, 4)))
    assert flow_loss(a, np.zeros((4, 4))).item() == 0.0
    assert flow_loss(a, np.ones((4, 4))).item() == pytest.approx(1.0)
    b = np.zeros((4, 4))
    b[0, 0] = 4.0
    assert flow_loss(a, b).item() == pytest.approx(1.0)  # 16 / 16 elements


# ------------------------------------------------------------- sample_loss

def test_unknown_task_rejected(model):
    with pytest.raises(ValueError, match="task"):
        sample_loss(model, "segmentation", {}, lambda p: None,
                    np.random.default_rng(0))


def test_stem_task_needs_stem_expert(model):
    rec = {"image": "x", "question": "how many?", "answer": "1"}
    with pytest.raises(ValueError, match="stem"):
        sample_loss(model, "stem_und", rec, lambda p: rand_image(0),
                    np.random.default_rng(0))
    model.moe.init_stem_expert()
    loss, bucket = sample_loss(model, "stem_und", rec, lambda p: rand_image(0),
                               np.random.default_rng(0))
    assert bucket == "ntp" and np.isfinite(loss.item())


def test_stem_loss_trains_only_stem_trunk(model_=None):
    model = TinyUMM(tiny_config(), seed=3)
    model.moe.init_stem_expert()
    rec = {"image": "x", "question": "count?", "answer": "2"}
    loss, _ = sample_loss(model, "stem_und", rec, lambda p: rand_image(1),
                          np.random.default_rng(0))
    loss.backward()
    assert model.moe.stem.proj.w.grad is not None
    assert model.moe.versatile.proj.w.grad is None


# ----------------------------------------------------- joint-step isolation

def und_batch(n, seed=0):
    return [("und", {"image": "x", "question": f"q{i}?", "answer": str(i)},
             np.random.default_rng((seed, i))) for i in range(n)]


def t2i_batch(n, seed=0):
    return [("t2i", {"image": "x", "caption": f"scene {i}"},
             np.random.default_rng((seed, i))) for i in range(n)]


def grads_of(model):
    return {n: (None if p.grad is None else p.grad.copy())
            for n, p in model.params().items()}


def test_pure_und_batch_leaves_gen_branch_untouched(model):
    joint_step(model, und_batch(2), lambda p: rand_image(0))
    g = grads_of(model)
    for name, grad in g.items():
        if name.startswith("gen_branch/") :
            assert grad is None, name
    assert g["und_branch/lm_head.w"] is not None
    assert g["shared/tok_emb.w"] is not None


def test_unconditional_gen_batch_leaves_und_weights_untouched(model):
    # cfg_drop=1 removes the caption, so no und-branch rows exist at all
    joint_step(model, t2i_batch(2), lambda p: rand_image(0), cfg_drop=1.0)
    g = grads_of(model)
    for name, grad in g.items():
        if name.startswith("und_branch/"):
            assert grad is None, name
    assert g["gen_branch/v_head.w"] is not None


def test_conditional_gen_batch_reaches_both_branches(model):
    joint_step(model, t2i_batch(2), lambda p: rand_image(0), cfg_drop=0.0)
    g = grads_of(model)
    assert g["gen_branch/v_head.w"] is not None
    assert g["shared/tok_emb.w"] is not None          # caption embeddings
    assert g["und_branch/core.d0.wv.w"] is not None   # text rows, deep layer
    assert g["und_branch/lm_head.w"] is None          # no next-token targets


def test_gradient_additivity_over_batch():
    image_of = lambda p: rand_image(7)

    def run(make_batch):
        m = TinyUMM(tiny_config(), seed=11)
        joint_step(m, make_batch(), image_of, lam=0.7, cfg_drop=0.0)
        return grads_of(m)

    # fresh generator instances per run: the batches must be identical
    # streams, not shared stateful objects
    g_both = run(lambda: und_batch(1, seed=1) + t2i_batch(1, seed=2))
    g_a = run(lambda: und_batch(1, seed=1))
    g_b = run(lambda: t2i_batch(1, seed=2))
    for name in g_both:
        parts = [g for g in (g_a[name], g_b[name]) if g is not None]
        if not parts:
            assert g_both[name] is None
            continue
        want = sum(parts)
        assert np.allclose(g_both[name], want, atol=1e-10), name


def test_joint_step_reports_per_bucket_means(model):
    batch = und_batch(2) + t2i_batch(1)
    rep = joint_step(model, batch, lambda p: rand_image(0))
    assert rep.ntp_tokens == 2 and rep.flow_tokens == 1
    assert rep.ntp_loss > 0 and rep.flow_loss > 0 and rep.router_loss == 0.0
    with pytest.raises(ValueError, match="empty"):
        joint_step(model, [], lambda p: rand_image(0))


# -------------------------------------------- answer alignment end to end

def test_overfit_single_qa_pair_decodes_answer():
    """Sixty steps on one QA pair must teach the model to emit the answer,
    which breaks if the prediction rows are misaligned by even one token."""
    from tinyumm.inference import decode_text

    model = TinyUMM(tiny_config(), seed=4)
    img = rand_image(13)
    rec = {"image": "x", "question": "how many shapes?", "answer": "2"}
    params = {n: p for n, p in model.params().items()
              if not n.startswith("gen_branch/ae")}
    opt = AdamW(params, lr=3e-3)
    for step in range(140):
        opt.zero_grad()
        loss, _ = sample_loss(model, "und", rec, lambda p: img,
                              np.random.default_rng(step))
        loss.backward()
        opt.step()
    assert loss.item() < 0.05
    assert decode_text(model, "how many shapes?", img, max_tokens=4) == "2"
