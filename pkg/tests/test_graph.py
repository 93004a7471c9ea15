import copy

import numpy as np
import pytest

from modconn import tensor as T
from modconn.errors import ConfigError, ShapeError
from modconn.gradcheck import graph_suite
from modconn.graph import (
    ArchSpec,
    build_graph,
    build_resnet_masked,
    build_resnext_masked,
    graph_backward,
    graph_forward,
    load_checkpoint,
    save_checkpoint,
)

from oracles import chain_resnet, full_resnext


@pytest.mark.parametrize("result", graph_suite(), ids=lambda r: r.name)
def test_graph_gradients_match_finite_differences(result):
    assert result.passed, str(result)


def test_depth_relations():
    assert ArchSpec(family="resnet", num_modules=18, num_classes=10).depth == 38
    assert ArchSpec(family="resnet", num_modules=18, num_classes=10, block_kind="bottleneck").depth == 56
    assert ArchSpec(family="resnext", num_modules=6, num_classes=10).depth == 20
    assert ArchSpec.from_depth("resnext", 20, num_classes=10).num_modules == 6
    with pytest.raises(ConfigError):
        ArchSpec.from_depth("resnext", 21, num_classes=10)


@pytest.mark.parametrize("kw", [
    dict(family="mlp"),
    dict(family="resnet", num_modules=4, fan_in=4),
    dict(family="resnext", cardinality=4, fan_in=5),
    dict(family="resnext", fan_in=0),
    dict(family="resnext", connectivity="dense"),
    dict(family="resnext", num_modules=3, module_stages=(0, 2, 2)),
])
def test_invalid_arch_specs(kw):
    with pytest.raises(ConfigError):
        ArchSpec(**kw)


def test_resnet_candidates_cover_all_earlier_blocks():
    g = build_resnet_masked(ArchSpec(family="resnet", num_modules=18, fan_in=1, num_classes=10))
    assert len(g.nodes["in18"].producers) == 17
    assert g.nodes["in18"].producers[0] == "b1"
    assert [b for b in g.all_block_ids()] == [f"b{j}" for j in range(1, 19)]


def test_resnext_structure(tiny_resnext):
    g = build_resnext_masked(tiny_resnext)
    assert len(g.blocks) == 9
    assert all(g.nodes[f"m1.in{j}"].identity == ["stem"] for j in (1, 2, 3))
    assert g.nodes["m2.in2"].producers == ["m1.b1", "m1.b2", "m1.b3"]
    # module 1 keeps its input shape; module 2 halves the resolution and widens
    assert g.nodes["m2.in2"].projection is None
    assert g.nodes["m3.in1"].projection == "m2.proj"
    assert g.nodes["out"].projection is None


def test_stage_widths_follow_feature_map_sizes():
    g = build_resnext_masked(ArchSpec(family="resnext", num_modules=3, cardinality=2, bottleneck_width=2, num_classes=10))
    assert [g.nodes[f"m{i}.in1"].shape for i in (1, 2, 3)] == [(16, 32, 32), (64, 32, 32), (128, 16, 16)]
    assert g.nodes["out"].shape == (256, 8, 8)
    assert [g.blocks[f"m{i}.b1"].spec.width for i in (1, 2, 3)] == [2, 4, 8]


def test_parameter_count_is_independent_of_fan_in_and_mode(tiny_resnet, tiny_resnext):
    for base, ks in ((tiny_resnet, (1, 2, 3)), (tiny_resnext, (1, 2, 3))):
        counts = set()
        for k in ks:
            for mode in ("learned", "fixed_prev", "fixed_random", "fixed_full"):
                arch = ArchSpec.from_dict(dict(base.to_dict(), fan_in=k, connectivity=mode))
                counts.add(build_graph(arch, seed=3).num_parameters())
        assert len(counts) == 1


def test_fixed_prev_resnet_equals_plain_chain(rng):
    arch = ArchSpec(family="resnet", num_modules=4, fan_in=1, num_classes=3, stage_channels=(4, 8), image_size=8, stem_channels=4, connectivity="fixed_prev")
    g = build_graph(arch, seed=1)
    x = rng.standard_normal((5, 3, 8, 8)).astype(np.float32)
    got = graph_forward(g, x, mode="eval").logits.data
    np.testing.assert_allclose(got, chain_resnet(g, x).data, atol=1e-6, rtol=0)


def test_fixed_prev_resnet_gradients_equal_plain_chain(rng):
    arch = ArchSpec(family="resnet", num_modules=3, fan_in=1, num_classes=3, stage_channels=(4,), image_size=4, stem_channels=4, connectivity="fixed_prev")
    g = build_graph(arch, seed=2)
    ref = copy.deepcopy(g)
    x = rng.standard_normal((4, 3, 4, 4)).astype(np.float32)
    y = np.array([0, 1, 2, 1])
    graph_backward(g, graph_forward(g, x, y, mode="train"))
    T.softmax_xent(chain_resnet(ref, x, training=True), y).backward()
    for (name, a), (_, b) in zip(g.named_parameters(), ref.named_parameters()):
        np.testing.assert_allclose(a.grad, b.grad, atol=1e-6, err_msg=name)


def test_fixed_full_resnext_equals_multibranch_recursion_bitwise(tiny_resnext, rng):
    arch = ArchSpec.from_dict(dict(tiny_resnext.to_dict(), connectivity="fixed_full"))
    g = build_graph(arch, seed=4)
    x = rng.standard_normal((3, 3, 8, 8)).astype(np.float32)
    for mode in ("eval", "train"):
        ref = copy.deepcopy(g)
        got = graph_forward(g, x, mode=mode).logits.data
        assert np.array_equal(got, full_resnext(ref, x, training=mode == "train").data)


def test_learned_with_full_fan_in_equals_fixed_full(tiny_resnext, rng):
    full = build_graph(ArchSpec.from_dict(dict(tiny_resnext.to_dict(), connectivity="fixed_full")), seed=5)
    learned = build_graph(ArchSpec.from_dict(dict(tiny_resnext.to_dict(), fan_in=3)), seed=5)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    a = graph_forward(full, x, mode="train").logits.data
    b = graph_forward(learned, x, mode="train", rng=np.random.default_rng(0)).logits.data
    assert np.array_equal(a, b)


def test_fixed_random_is_seeded_and_frozen(tiny_resnet):
    arch = ArchSpec.from_dict(dict(tiny_resnet.to_dict(), connectivity="fixed_random", connectivity_seed=9))
    a, b = build_graph(arch, seed=0), build_graph(arch, seed=1)
    for name in a.masks:
        assert a.masks[name].frozen
        assert a.masks[name].binary.sum() == min(2, a.masks[name].size)
        np.testing.assert_array_equal(a.masks[name].binary, b.masks[name].binary)


def test_train_mode_samples_masks_and_needs_rng(tiny_resnet, rng):
    g = build_graph(tiny_resnet)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    with pytest.raises(ValueError):
        graph_forward(g, x, mode="train")
    res = graph_forward(g, x, mode="train", rng=np.random.default_rng(0))
    assert all(b.sum() == g.masks[n].fan_in for n, b in res.binaries.items())


def test_eval_uses_top_k_of_trainable_masks(tiny_resnet):
    g = build_graph(tiny_resnet)
    g.masks["in4"].real = np.array([0.9, 0.1, 0.8])
    np.testing.assert_array_equal(g.effective_binary(g.masks["in4"]), [1, 0, 1])


def test_fan_out_producer_gradient_is_sum_of_paths(rng):
    # b1 feeds in2 (-> b2 -> in3) and in3 directly; its gradient must be the sum of both consumers' gradients
    arch = ArchSpec(family="resnet", num_modules=3, fan_in=2, num_classes=3, stage_channels=(4,), image_size=4, stem_channels=4)
    g = build_graph(arch, seed=0).astype(np.float64)
    x = rng.standard_normal((3, 3, 4, 4))
    y = np.array([0, 1, 2])
    res = graph_forward(g, x, y, mode="train", sample=False)
    for t in (res.values["b1"], res.presums["in2"], res.presums["in3"]):
        t.retain_grad()
    res.loss.backward()
    np.testing.assert_allclose(res.values["b1"].grad, res.presums["in2"].grad + res.presums["in3"].grad, rtol=1e-12, atol=1e-15)

    # same statement through the mask gradients: <dL/db1, b1> = dL/dm[in2, b1] + dL/dm[in3, b1]
    res = graph_forward(g, x, y, mode="train", sample=False)
    b1 = res.values["b1"].retain_grad()
    masks = graph_backward(g, res).masks
    assert np.vdot(b1.grad, b1.data) == pytest.approx(masks["in2"][0] + masks["in3"][0], rel=1e-10)


def test_bad_batch_shape(tiny_resnet):
    with pytest.raises(ShapeError):
        graph_forward(build_graph(tiny_resnet), np.zeros((2, 3, 4, 4), dtype=np.float32), mode="eval")


def test_execution_is_deterministic(tiny_resnext, rng):
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    outs = [graph_forward(build_graph(tiny_resnext, seed=7), x, mode="train", rng=np.random.default_rng(1)).logits.data for _ in range(2)]
    assert np.array_equal(*outs)


def test_checkpoint_round_trip(tmp_path, tiny_resnext, rng):
    g = build_graph(tiny_resnext, seed=3)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    graph_forward(g, x, mode="train", rng=np.random.default_rng(0))  # move BN statistics and masks
    g.masks["m2.in1"].real = np.array([0.1, 0.7, 0.3])
    path = save_checkpoint(g, tmp_path / "ck.npz", rng_state={"seed": 5})
    h, meta = load_checkpoint(path)
    assert meta["rng_state"] == {"seed": 5}
    assert [m.to_dict() for m in h.masks.values()] == [m.to_dict() for m in g.masks.values()]
    assert np.array_equal(graph_forward(h, x, mode="eval").logits.data, graph_forward(g, x, mode="eval").logits.data)
