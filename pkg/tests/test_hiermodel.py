import numpy as np
import pytest

from taxengine import (
    CategoryPath,
    TrainConfig,
    apply_dynamic_mask,
    build,
    build_model,
    gen_synthetic,
    parse_path,
    stratified_split,
)
from taxengine.errors import DepthTooShallow, LabelOutsideTaxonomy, MultipleRoots
from taxengine.fusion import EARLY, FusionConfig, LATE
from taxengine.hiermodel import HierModel, evaluate, train
from taxengine.kernels import INFER_MODE, Parameter, TRAIN_MODE, grad_check, zero_grads


def _early_cfg(dims):
    return FusionConfig(EARLY, tuple(dims), dims=dims)


def _tiny_model(tax, dims, seed=0, masking="ON", dropout=0.0, trunk=8, head=8):
    return build_model(tax, _early_cfg(dims), seed=seed, masking=masking,
                       trunk_width=trunk, head_width=head, dropout=dropout)


# -- build_model ----------------------------------------------------------------

def test_build_model_shapes(apparel_tax):
    dims = {"title": 12, "image": 8}
    model = _tiny_model(apparel_tax, dims, trunk=32, head=16)
    assert model.trunk.dense.in_dim == 20
    assert model.trunk.dense.out_dim == 32
    assert model.heads[2].block.dense.in_dim == 32
    assert model.heads[3].block.dense.in_dim == 32 + apparel_tax.level_size(2)
    assert model.heads[2].classify.out_dim == apparel_tax.level_size(2)


def test_build_model_seed_determinism(apparel_tax):
    dims = {"title": 4}
    m1 = _tiny_model(apparel_tax, dims, seed=7)
    m2 = _tiny_model(apparel_tax, dims, seed=7)
    for p1, p2 in zip(m1.params, m2.params):
        assert np.array_equal(p1.value, p2.value)
    m3 = _tiny_model(apparel_tax, dims, seed=8)
    assert any(
        not np.array_equal(p1.value, p3.value) for p1, p3 in zip(m1.params, m3.params)
    )


def test_build_model_depth_too_shallow():
    tax = build([parse_path("A")])
    with pytest.raises(DepthTooShallow):
        _tiny_model(tax, {"title": 4})


def test_build_model_multiple_roots(two_branch_tax):
    with pytest.raises(MultipleRoots):
        _tiny_model(two_branch_tax, {"title": 4})


# -- apply_dynamic_mask -------------------------------------------------------------

def test_mask_hand_example(two_branch_tax):
    tax = two_branch_tax
    a = tax.resolve(parse_path("A"))
    logits = np.array([2.0, 5.0, 9.0, 0.0])   # over [B, C, E, STOP]
    p = apply_dynamic_mask(logits, a, tax)
    assert p[2] == 0.0 and p[3] == 0.0
    assert p[0] + p[1] == pytest.approx(1.0)
    assert p[1] / p[0] == pytest.approx(np.exp(3.0))


def test_mask_single_child_certainty(two_branch_tax):
    tax = two_branch_tax
    d = tax.resolve(parse_path("D"))   # one child E, not a recorded terminal
    p = apply_dynamic_mask(np.array([1.0, 2.0, -3.0, 5.0]), d, tax)
    assert p[2] == pytest.approx(1.0)
    assert p[[0, 1, 3]].max() == 0.0


def test_mask_off_is_plain_softmax(two_branch_tax):
    from taxengine.kernels import softmax

    logits = np.array([2.0, 5.0, 9.0, 0.0])
    assert np.allclose(softmax(logits), np.exp(logits) / np.exp(logits).sum())


# -- forward ------------------------------------------------------------------------

def test_forward_simplex_every_level(apparel_tax):
    dims = {"title": 6, "image": 4}
    model = _tiny_model(apparel_tax, dims, dropout=0.0)
    rng = np.random.default_rng(0)
    ins = {m: rng.standard_normal((17, d)) for m, d in dims.items()}
    probs = model.forward(ins, mode=INFER_MODE)
    for lvl, p in probs.items():
        assert p.shape == (17, apparel_tax.level_size(lvl))
        assert np.abs(p.sum(axis=1) - 1.0).max() < 1e-6


def test_forward_masked_paths_always_valid(apparel_tax):
    dims = {"title": 5}
    model = _tiny_model(apparel_tax, dims, seed=3)
    rng = np.random.default_rng(1)
    preds = model.predict_batch({"title": rng.standard_normal((200, 5))})
    for pp in preds:
        assert apparel_tax.validate_path(pp.path), pp.path.join()


def test_forward_unmasked_produces_invalid_paths(apparel_tax):
    dims = {"title": 5}
    model = _tiny_model(apparel_tax, dims, seed=3, masking="OFF")
    rng = np.random.default_rng(2)
    preds = model.predict_batch({"title": rng.standard_normal((1000, 5))})
    invalid = sum(1 for pp in preds if not apparel_tax.validate_path(pp.path))
    assert invalid >= 10


def test_teacher_forced_loss_finite(apparel_tax):
    dims = {"title": 5}
    model = _tiny_model(apparel_tax, dims, seed=4)
    bundle = gen_synthetic(apparel_tax, per_leaf=4, dims=dims, noise=0.3, seed=5)
    targets, parents = model.encode_labels(bundle.labels)
    ins = {"title": bundle.modality("title")}
    probs = model.forward(ins, mode=INFER_MODE, teacher_parents=parents, train_stats=False)
    loss, grads = model.loss_and_ce_grads(probs, targets)
    assert np.isfinite(loss)
    for g in grads.values():
        assert np.isfinite(g).all()


def test_label_outside_taxonomy(apparel_tax):
    model = _tiny_model(apparel_tax, {"title": 4})
    with pytest.raises(LabelOutsideTaxonomy):
        model.encode_labels([parse_path("Apparel > Spaceships")])


# -- end-to-end gradient check ----------------------------------------------------------

@pytest.mark.parametrize("fusion_kind", [EARLY, LATE])
def test_end_to_end_grad_check(fusion_kind, apparel_tax):
    rng = np.random.default_rng(6)
    dims = {"title": 3, "image": 4}
    if fusion_kind == EARLY:
        fcfg = FusionConfig(EARLY, tuple(dims), dims=dims)
    else:
        fcfg = FusionConfig(LATE, tuple(dims), dims=dims,
                            late_widths={"title": 4, "image": 4}, joint_width=6)
    model = build_model(apparel_tax, fcfg, seed=6, trunk_width=8, head_width=6,
                        dropout=0.0)
    bundle = gen_synthetic(apparel_tax, per_leaf=1, dims=dims, noise=0.2, seed=7)
    targets, parents = model.encode_labels(bundle.labels)
    ins = {m: bundle.modality(m) for m in dims}

    def loss():
        probs = model.forward(ins, mode=TRAIN_MODE, teacher_parents=parents)
        val, _ = model.loss_and_ce_grads(probs, targets)
        return val

    probs = model.forward(ins, mode=TRAIN_MODE, teacher_parents=parents)
    _, ce_grads = model.loss_and_ce_grads(probs, targets)
    zero_grads(model.params)
    model.backward(ce_grads)
    report = grad_check(loss, model.params, h=1e-5)
    assert report["max_rel_err"] < 1e-3, report


def test_input_gradients_flow_to_every_modality(apparel_tax):
    rng = np.random.default_rng(8)
    dims = {"title": 3, "image": 4}
    model = _tiny_model(apparel_tax, dims, seed=9)
    bundle = gen_synthetic(apparel_tax, per_leaf=1, dims=dims, noise=0.2, seed=10)
    targets, parents = model.encode_labels(bundle.labels)
    ins = {m: Parameter(m, bundle.modality(m)) for m in dims}

    def loss():
        probs = model.forward({m: p.value for m, p in ins.items()}, mode=TRAIN_MODE,
                              teacher_parents=parents)
        val, _ = model.loss_and_ce_grads(probs, targets)
        return val

    probs = model.forward({m: p.value for m, p in ins.items()}, mode=TRAIN_MODE,
                          teacher_parents=parents)
    _, ce_grads = model.loss_and_ce_grads(probs, targets)
    zero_grads(model.params + list(ins.values()))
    d_in = model.backward(ce_grads)
    for m, p in ins.items():
        p.grad += d_in[m]
    assert grad_check(loss, list(ins.values()))["max_rel_err"] < 1e-3


# -- training -----------------------------------------------------------------------

def _train_setup(apparel_tax, noise=0.05, per_leaf=12, seed=11):
    dims = {"title": 8, "image": 6}
    bundle = gen_synthetic(apparel_tax, per_leaf=per_leaf, dims=dims, noise=noise, seed=seed)
    split = stratified_split(bundle, seed=seed)
    return bundle, split, dims


def test_training_learns_separable_data(apparel_tax):
    bundle, split, dims = _train_setup(apparel_tax)
    model = _tiny_model(apparel_tax, dims, seed=12, trunk=32, head=16)
    cfg = TrainConfig(batch_size=16, max_epochs=40, patience=5, seed=12)
    history = train(model, bundle, split, cfg)
    assert history[0].val_loss > min(h.val_loss for h in history)
    report = evaluate(model, bundle, split.indices("TRAIN"))
    assert report.hierarchical.hf > 0.95


def test_training_sigma_zero_exact(apparel_tax):
    dims = {"title": 8}
    bundle = gen_synthetic(apparel_tax, per_leaf=8, dims=dims, noise=0.0, seed=13)
    split = stratified_split(bundle, seed=13)
    model = _tiny_model(apparel_tax, dims, seed=13, trunk=32, head=16)
    history = train(model, bundle, split, TrainConfig(batch_size=8, max_epochs=60,
                                                      patience=10, seed=13))
    preds = model.predict_bundle(bundle)
    train_rows = set(split.indices("TRAIN").tolist())
    hits = sum(
        1
        for i, pp in enumerate(preds)
        if i in train_rows and pp.path.segments == bundle.labels[i].segments
    )
    assert hits == len(train_rows)


def test_training_respects_max_epochs(apparel_tax):
    bundle, split, dims = _train_setup(apparel_tax, per_leaf=6)
    model = _tiny_model(apparel_tax, dims, seed=14, trunk=16, head=8)
    history = train(model, bundle, split, TrainConfig(batch_size=8, max_epochs=4,
                                                      patience=100, seed=14))
    assert len(history) == 4


def test_training_default_config_matches_recipe():
    cfg = TrainConfig()
    assert cfg.learning_rate == 1e-3
    assert cfg.batch_size == 128
    assert cfg.max_epochs == 60
    assert cfg.patience == 5


def test_early_stopping_halts_after_patience(apparel_tax):
    # a huge learning rate diverges immediately, so validation loss never
    # improves after its best epoch and the stopper must fire
    bundle, split, dims = _train_setup(apparel_tax, per_leaf=6)
    model = _tiny_model(apparel_tax, dims, seed=15, trunk=16, head=8)
    cfg = TrainConfig(learning_rate=10.0, batch_size=8, max_epochs=60, patience=3, seed=15)
    history = train(model, bundle, split, cfg)
    best_epoch = min(range(len(history)), key=lambda i: history[i].val_loss) + 1
    assert len(history) <= best_epoch + cfg.patience
    assert len(history) < cfg.max_epochs


def test_early_stopping_restores_best(apparel_tax):
    bundle, split, dims = _train_setup(apparel_tax, per_leaf=6)
    model = _tiny_model(apparel_tax, dims, seed=16, trunk=16, head=8)
    cfg = TrainConfig(learning_rate=10.0, batch_size=8, max_epochs=20, patience=3, seed=16)
    history = train(model, bundle, split, cfg)
    best_val = min(h.val_loss for h in history)
    # re-evaluating with the restored parameters reproduces the best loss
    targets, parents = model.encode_labels(bundle.labels)
    val_idx = split.indices("VAL")
    ins = {m: bundle.modality(m)[val_idx] for m in dims}
    t = {lvl: targets[lvl][val_idx] for lvl in model.levels}
    par = {lvl: parents[lvl][val_idx] for lvl in model.levels}
    probs = model.forward(ins, mode=INFER_MODE, teacher_parents=par, train_stats=False)
    loss, _ = model.loss_and_ce_grads(probs, t)
    assert loss == pytest.approx(best_val, rel=1e-9)


def test_training_deterministic(apparel_tax):
    bundle, split, dims = _train_setup(apparel_tax, per_leaf=6)

    def run():
        model = _tiny_model(apparel_tax, dims, seed=17, trunk=16, head=8, dropout=0.3)
        history = train(model, bundle, split, TrainConfig(batch_size=8, max_epochs=6,
                                                          patience=5, seed=17))
        return history, [p.value.copy() for p in model.params]

    h1, p1 = run()
    h2, p2 = run()
    assert [(e.train_loss, e.val_loss) for e in h1] == [(e.train_loss, e.val_loss) for e in h2]
    for a, b in zip(p1, p2):
        assert np.array_equal(a, b)


# -- prediction ------------------------------------------------------------------------

def test_predict_stop_truncation():
    tax = build([parse_path(p) for p in
                 ("R > A", "R > B > C", "R > B > D")])
    dims = {"title": 6}
    bundle = gen_synthetic(tax, per_leaf=10, dims=dims, noise=0.02, seed=18)
    split = stratified_split(bundle, seed=18)
    model = _tiny_model(tax, dims, seed=18, trunk=16, head=8)
    train(model, bundle, split, TrainConfig(batch_size=8, max_epochs=30, patience=5, seed=18))
    preds = model.predict_bundle(bundle)
    by_label = {}
    for pp, lab in zip(preds, bundle.labels):
        by_label.setdefault(lab.join(), []).append(pp)
    short = by_label["R > A"][0]
    assert len(short.path) == 2
    assert 3 not in [lvl for lvl in model.levels if lvl in short.decoded_levels
                     and short.level_choices[lvl] != tax.stop_position(lvl)]


def test_prediction_confidence_bounds(apparel_tax):
    dims = {"title": 4}
    model = _tiny_model(apparel_tax, dims, seed=19)
    rng = np.random.default_rng(20)
    preds = model.predict_batch({"title": rng.standard_normal((50, 4))})
    for pp in preds:
        confs = [pp.level_confidences[lvl] for lvl in pp.decoded_levels]
        assert all(0.0 < c <= 1.0 for c in confs)
        assert pp.path_confidence <= min(confs) + 1e-12


# -- persistence ---------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path, apparel_tax):
    bundle, split, dims = _train_setup(apparel_tax, per_leaf=6)
    model = _tiny_model(apparel_tax, dims, seed=21, trunk=16, head=8)
    train(model, bundle, split, TrainConfig(batch_size=8, max_epochs=5, patience=5, seed=21))
    model.save(tmp_path / "ckpt")
    loaded = HierModel.load(tmp_path / "ckpt")
    ins = {m: bundle.modality(m)[:10] for m in dims}
    p1 = model.forward(ins, mode=INFER_MODE)
    p2 = loaded.forward(ins, mode=INFER_MODE)
    for lvl in model.levels:
        assert np.array_equal(p1[lvl], p2[lvl])
    assert loaded.taxonomy.content_hash() == apparel_tax.content_hash()


def test_checkpoint_preserves_grafted_order(tmp_path):
    tax = build([parse_path("R > Shoes"), parse_path("R > Zebra > Sub")])
    shoes = tax.resolve(parse_path("R > Shoes"))
    grafted = tax.graft(shoes, [CategoryPath(("Boots",)), CategoryPath(("Aaa",))])
    dims = {"title": 4}
    model = _tiny_model(grafted, dims, seed=22)
    model.save(tmp_path / "ckpt")
    loaded = HierModel.load(tmp_path / "ckpt")
    for lvl in range(1, grafted.max_depth + 1):
        assert loaded.taxonomy.level_index(lvl) == grafted.level_index(lvl)
