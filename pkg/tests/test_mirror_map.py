import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mirrormeta import autodiff as ad
from mirrormeta import mirror_map as mm
from mirrormeta import model
from oracles import central_jacobian, rel_err


def part_for(sizes):
    return model.partition_by_layer(model.MlpSpec(sizes))


P13 = part_for((1, 4, 1))


def test_identity_examples():
    assert mm.evaluate(mm.Identity(), None, [1.0, -2.0, 3.0]).tolist() == [1.0, -2.0, 3.0]
    assert mm.monotonicity_witness(mm.Identity(), None, [1.0], [0.0]) == 1.0


def test_diagonal_examples():
    p = mm.DiagonalLinear([2.0, 4.0])
    assert mm.map_inverse(p, None, [2.0, 4.0]).tolist() == [1.0, 1.0]
    assert mm.monotonicity_witness(mm.DiagonalLinear([2.0]), None, [1.0], [-1.0]) == 8.0
    with pytest.raises(ValueError):
        mm.DiagonalLinear([1.0, 0.0])


def test_spd_forward_and_inverse():
    rng = np.random.default_rng(0)
    B = rng.normal(size=(6, 6))
    P = B @ B.T + 6 * np.eye(6)
    kind = mm.SpdLinear(P)
    z = rng.normal(size=6)
    assert np.max(np.abs(mm.evaluate(kind, None, z) - P @ z)) <= 1e-12
    assert np.max(np.abs(mm.map_inverse(kind, None, P @ z) - z)) <= 1e-12
    with pytest.raises(ValueError):
        mm.SpdLinear(B)
    with pytest.raises(ValueError):
        mm.SpdLinear(-np.eye(3))


def test_zero_decoder_halves():
    kind = mm.BlockIaf.zero_decoder(P13)
    z = np.random.default_rng(1).normal(size=13)
    assert np.array_equal(mm.evaluate(kind, P13, z), 0.5 * z)
    assert np.array_equal(mm.diag_scale(kind, P13, z), np.full(13, 0.5))
    assert np.array_equal(mm.map_inverse(kind, P13, np.ones(13)), np.full(13, 2.0))


def test_training_init_starts_at_half_scaling():
    part = part_for((1, 40, 40, 1))
    kind = mm.BlockIaf.init(part, 0)
    z = np.random.default_rng(2).normal(size=part.d)
    assert np.array_equal(mm.evaluate(kind, part, z), 0.5 * z)


def test_halving_rule_clamps_at_one():
    assert mm.halved((40, 41), 1) == (20, 20)
    assert mm.halved((40, 41), 3) == (5, 5)
    assert mm.halved((1, 5), 3) == (1, 1)


def test_decoder_output_and_encoder_shapes():
    part = part_for((1, 40, 40, 1))
    shapes = mm.BlockIaf.param_shapes(part)
    assert shapes["enc0.1.F0"] == (20, 40)
    assert shapes["enc0.3.b"] == (5, 1)
    for i, (rows, cols) in enumerate(part.shapes):
        assert shapes[f"dec{i}.3.b"] == (2 * rows, cols)
        assert shapes[f"dec{i}.in.W"][0] == int(np.prod(mm.halved((rows, cols), 3)))
    assert shapes["dec0.in.W"][1] == mm.SEED_DIM
    # the last block has no encoder
    assert not any(k.startswith("enc2.") for k in shapes)


@pytest.mark.parametrize("sizes", [(1, 4, 1), (1, 2, 1, 3), (2, 3, 2, 2)])
def test_graph_and_array_paths_agree_bitwise(sizes):
    part = part_for(sizes)
    kind = mm.BlockIaf.random(part, 3)
    z = np.random.default_rng(4).normal(size=part.d)
    assert np.array_equal(mm.map_forward(kind, part, z).value, mm.evaluate(kind, part, z))


@pytest.mark.parametrize("seed", range(5))
def test_jacobian_is_block_lower_triangular_with_sigma_diagonal(seed):
    part = part_for((1, 2, 1, 3))
    kind = mm.BlockIaf.random(part, seed)
    z = np.random.default_rng(100 + seed).normal(size=part.d)
    J = central_jacobian(lambda v: mm.evaluate(kind, part, v), z, h=1e-5)
    for i, bi in enumerate(part.blocks):
        for j, bj in enumerate(part.blocks):
            if j > i:
                assert np.max(np.abs(J[np.ix_(bi, bj)])) <= 1e-7
    diag = mm.diag_scale(kind, part, z)
    assert rel_err(np.diag(J), diag) <= 1e-6
    assert np.all((diag > 0) & (diag < 1))


def test_jacobian_of_map_matches_autodiff():
    part = part_for((1, 3, 2))
    kind = mm.BlockIaf.random(part, 8)
    z = np.random.default_rng(8).normal(size=part.d)
    g = ad.Graph()
    zv = g.constant(z)
    phi = mm.map_forward(kind, part, zv)
    rows = []
    for k in range(part.d):
        e = np.zeros(part.d)
        e[k] = 1.0
        (r,) = g.grad(ad.sum_(ad.mul(phi, g.constant(e))), [zv])
        rows.append(r.value)
    J = central_jacobian(lambda v: mm.evaluate(kind, part, v), z)
    assert rel_err(np.array(rows), J) <= 1e-6


def test_zeroed_final_factor_still_learns():
    part = part_for((1, 40, 40, 1))
    kind = mm.BlockIaf.init(part, 1)
    g = ad.Graph()
    bound = {k: g.constant(v) for k, v in kind.params.items()}
    z = np.random.default_rng(1).normal(size=part.d)
    phi = mm.map_forward(kind, part, z, graph=g, bound=bound)
    names = sorted(bound)
    grads = dict(zip(names, g.grad(ad.sum_(ad.square(phi)), [bound[n] for n in names])))
    for i in range(len(part)):
        assert np.any(grads[f"dec{i}.3.F0"].value != 0)


@pytest.mark.parametrize("sizes", [(1, 4, 1), (1, 5, 9), (1, 1, 3, 2, 16), (3, 12, 16)])
def test_round_trip_both_directions(sizes):
    part = part_for(sizes)
    rng = np.random.default_rng(5)
    kind = mm.BlockIaf.random(part, rng)
    for _ in range(5):
        z = rng.normal(size=part.d) * 3
        assert np.max(np.abs(mm.map_inverse(kind, part, mm.evaluate(kind, part, z)) - z)) <= 1e-9
        assert np.max(np.abs(mm.evaluate(kind, part, mm.map_inverse(kind, part, z)) - z)) <= 1e-9


def test_non_contiguous_partition():
    blocks = (np.array([4, 0, 2, 5]), np.array([1, 3]))
    part = model.Partition(blocks, ((2, 2), (1, 2)))
    kind = mm.BlockIaf.random(part, 0)
    z = np.random.default_rng(0).normal(size=6)
    phi = mm.evaluate(kind, part, z)
    assert np.array_equal(phi, mm.map_forward(kind, part, z).value)
    assert np.max(np.abs(mm.map_inverse(kind, part, phi) - z)) <= 1e-12
    J = central_jacobian(lambda v: mm.evaluate(kind, part, v), z)
    assert np.max(np.abs(J[np.ix_(blocks[0], blocks[1])])) <= 1e-8


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), shift=st.floats(1e-3, 10.0))
def test_monotone_for_moderate_coupling(seed, shift):
    # near-identity factors and small biases keep cross-block coupling weak
    rng = np.random.default_rng(seed)
    kind = mm.BlockIaf.random(P13, rng, scale=0.1)
    z = rng.normal(size=13)
    z2 = z + shift * rng.normal(size=13)
    assert mm.monotonicity_witness(kind, P13, z, z2) > 0


def test_strong_coupling_can_break_monotonicity():
    # A block-triangular Jacobian with a positive diagonal need not have a
    # positive definite symmetric part, so strict monotonicity is not
    # guaranteed for every parameter setting.
    rng = np.random.default_rng(90)
    kind = mm.BlockIaf.random(P13, rng, scale=1.0)
    z, z2 = rng.normal(size=13), rng.normal(size=13)
    assert mm.monotonicity_witness(kind, P13, z, z2) < 0
    # still exactly invertible
    assert np.max(np.abs(mm.map_inverse(kind, P13, mm.evaluate(kind, P13, z)) - z)) <= 1e-9


def test_inverse_jacobian_diagonal_at_least_one():
    part = part_for((1, 2, 1, 3))
    kind = mm.BlockIaf.random(part, 6)
    phi = np.random.default_rng(6).normal(size=part.d)
    J = central_jacobian(lambda v: mm.map_inverse(kind, part, v), phi)
    assert np.all(np.diag(J) >= 1 - 1e-6)


def test_errors():
    kind = mm.BlockIaf.random(P13, 0)
    with pytest.raises(mm.IdenticalPointsError):
        mm.monotonicity_witness(kind, P13, np.ones(13), np.ones(13))
    with pytest.raises(ad.ShapeError):
        mm.map_forward(kind, P13, np.ones(12))
    with pytest.raises(ad.ShapeError):
        mm.map_inverse(kind, P13, np.ones(14))
    with pytest.raises(TypeError):
        mm.diag_scale(mm.Identity(), P13, np.ones(13))
    with pytest.raises(ValueError):
        mm.BlockIaf(P13, {"seed": np.zeros(8)})


def test_from_name_round_trip():
    kind = mm.BlockIaf.random(P13, 0)
    again = mm.from_name(kind.name, P13, kind.params)
    z = np.arange(13.0)
    assert np.array_equal(mm.evaluate(kind, P13, z), mm.evaluate(again, P13, z))
    assert isinstance(mm.from_name("identity", P13, {}), mm.Identity)
