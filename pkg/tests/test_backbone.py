import numpy as np
import pytest

from unicad.backbone import (BackboneConfig, BlockWeights, LoraDeltaSet, attention_masked, backbone_forward,
                             block_forward, deserialize_backbone, init_random_backbone, load_backbone,
                             save_backbone, serialize_backbone)
from unicad.errors import CodecError, ContractError, InputError
from unicad.experts import pad_to_rank
from unicad.uel import embed_2d, embed_3d, standardize_batch

from conftest import TOY_SPEC2D, TOY_SPEC3D, random_expert, random_input, toy_backbone
from oracles import attention_single, backbone_single, block_single


def _zero_deltas(n, r, d):
    return LoraDeltaSet(np.zeros((n, r, d), np.float32), np.zeros((n, d, r), np.float32),
                        np.zeros((n, r, d), np.float32), np.zeros((n, d, r), np.float32))


def _seq(bb, rng, mod="2d"):
    x = random_input(rng, mod)
    return (embed_2d if mod == "2d" else embed_3d)(x, TOY_SPEC2D if mod == "2d" else TOY_SPEC3D, bb.embedding)


def test_config_validation():
    with pytest.raises(InputError):
        BackboneConfig(10, 1, 3, 4)
    with pytest.raises(InputError):
        BackboneConfig(8, 0, 2, 4)


def test_zero_deltas_equal_plain_attention_exactly(toy_bb, rng):
    batch = standardize_batch([_seq(toy_bb, rng), _seq(toy_bb, rng, "3d")])
    y = batch.tokens
    blk = toy_bb.blocks[0]
    plain = attention_masked(y, batch.mask, blk, None, 4)
    zero = attention_masked(y, batch.mask, blk, _zero_deltas(2, 3, 64), 4)
    assert np.array_equal(plain, zero)


def test_single_token_attention_weight_is_one(toy_bb):
    cache = {}
    x = np.random.default_rng(0).standard_normal((1, 1, 64)).astype(np.float32)
    attention_masked(x, np.ones((1, 1)), toy_bb.blocks[0], None, 4, cache)
    assert np.all(cache["probs"] == 1.0)


def test_attention_matches_scalar_oracle(toy_bb, rng):
    bb = toy_backbone(seed=5)
    e = random_expert(bb, "t", 3, scale=0.2)
    x = rng.standard_normal((2, 64)).astype(np.float32)
    ds = LoraDeltaSet.stack([pad_to_rank(e, 3)[0].arrays()])
    got = attention_masked(x[None], np.ones((1, 2)), bb.blocks[0], ds, 4)[0]
    want = attention_single(x, bb.blocks[0], 4, e.lora[0].arrays())
    assert np.allclose(got, want, rtol=1e-5, atol=1e-6)


def test_block_zero_mlp_is_identity_residual(toy_bb, rng):
    blk = toy_bb.blocks[0]
    z = BlockWeights(**{**{k: getattr(blk, k) for k in BlockWeights.shapes(64, 128)},
                        "mlp_out": np.zeros((128, 64), np.float32)})
    x = rng.standard_normal((1, 5, 64)).astype(np.float32)
    mask = np.ones((1, 5))
    full = block_forward(x, mask, z, None, 4, 1e-6)
    assert np.array_equal(full, x + attention_masked(
        __import__("unicad.numerics", fromlist=["layer_norm"]).layer_norm(x, blk.ln1_g, blk.ln1_b, 1e-6),
        mask, z, None, 4))


def test_block_matches_composition_oracle(rng):
    bb = toy_backbone(seed=2)
    x = rng.standard_normal((6, 64)).astype(np.float32)
    got = block_forward(x[None], np.ones((1, 6)), bb.blocks[1], None, 4, bb.config.eps)[0]
    assert np.allclose(got, block_single(x, bb.blocks[1], 4, bb.config.eps), rtol=1e-5, atol=1e-5)


def test_padding_has_no_influence_on_valid_outputs(toy_bb, rng):
    seq = _seq(toy_bb, rng)
    short = block_forward(standardize_batch([seq]).tokens, np.ones((1, seq.valid_len)), toy_bb.blocks[0],
                          None, 4, 1e-6)
    padded = standardize_batch([seq], seq.valid_len + 7)
    padded.tokens[0, seq.valid_len:] = 123.0  # garbage in masked slots must not leak
    long = block_forward(padded.tokens, padded.mask, toy_bb.blocks[0], None, 4, 1e-6)
    assert np.allclose(long[0, :seq.valid_len], short[0], rtol=1e-6, atol=1e-6)


def test_identical_rows_identical_cls(toy_bb, rng):
    seq = _seq(toy_bb, rng)
    out = backbone_forward(toy_bb, standardize_batch([seq, seq]))
    assert out[0].tobytes() == out[1].tobytes()


def test_heterogeneous_batch_equals_sequential(toy_bb, rng):
    seqs = [_seq(toy_bb, rng, m) for m in ("2d", "3d", "2d", "3d")]
    batch = backbone_forward(toy_bb, standardize_batch(seqs))
    for i, s in enumerate(seqs):
        single = backbone_forward(toy_bb, standardize_batch([s]))[0]
        assert np.allclose(batch[i], single, rtol=1e-5, atol=1e-6)


def test_backbone_matches_float64_oracle(rng):
    bb = toy_backbone(seed=9)
    e = random_expert(bb, "t", 2, scale=0.2)
    seq = _seq(bb, rng, "3d")
    deltas = [LoraDeltaSet.stack([blk.arrays()]) for blk in e.lora]
    got = backbone_forward(bb, standardize_batch([seq]), deltas)[0]
    assert np.allclose(got, backbone_single(bb, seq.tokens, e), rtol=1e-4, atol=1e-4)


def test_hand_computed_identity_block():
    # One block whose attention and MLP outputs are zero: CLS = final_norm(cls + pos[0]).
    d = 4
    s2 = TOY_SPEC2D
    bb = init_random_backbone(BackboneConfig(d, 1, 2, 4), s2, TOY_SPEC3D)
    blk = bb.blocks[0]
    zeroed = BlockWeights(**{**{k: np.array(getattr(blk, k)) for k in BlockWeights.shapes(d, 4)},
                             "w_o": np.zeros((d, d), np.float32), "mlp_out": np.zeros((4, d), np.float32)})
    from unicad.backbone import Backbone
    bb0 = Backbone(bb.config, s2, TOY_SPEC3D, bb.embedding, (zeroed,), bb.final_g, bb.final_b)
    seq = embed_2d(np.zeros((4, 4, 1), np.float32), s2, bb.embedding)
    got = backbone_forward(bb0, standardize_batch([seq]))[0].astype(np.float64)
    x = (bb.embedding.cls + bb.embedding.pos2d[0]).astype(np.float64)
    want = (x - x.mean()) / np.sqrt(x.var() + bb.config.eps)
    assert np.allclose(got, want, atol=1e-5)


def test_rank_mismatch_is_contract_error(toy_bb):
    with pytest.raises(ContractError):
        LoraDeltaSet.stack([(np.zeros((2, 64)),) * 4, (np.zeros((3, 64)),) * 4])
    with pytest.raises(ContractError):
        backbone_forward(toy_bb, standardize_batch([_seq(toy_bb, np.random.default_rng(0))]), [None])


def test_init_deterministic_and_seed_sensitive():
    a, b, c = toy_backbone(seed=1), toy_backbone(seed=1), toy_backbone(seed=2)
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != c.fingerprint()
    w = np.concatenate([blk.w_q.ravel() for blk in a.blocks])
    assert abs(w.std() - 0.02) < 2e-3
    assert np.all(a.blocks[0].ln1_g == 1) and np.all(a.blocks[0].b_q == 0)


def test_weights_are_read_only(toy_bb):
    with pytest.raises(ValueError):
        toy_bb.blocks[0].w_q[0, 0] = 1.0


def test_serialization_round_trip(tmp_path, rng):
    bb = toy_backbone(seed=4)
    save_backbone(bb, tmp_path / "b.ucbb")
    back = load_backbone(tmp_path / "b.ucbb")
    assert back.config == bb.config and back.spec2d == bb.spec2d
    assert all(x.tobytes() == y.tobytes() for x, y in zip(bb.iter_arrays(), back.iter_arrays()))
    seqs = [_seq(bb, rng), _seq(bb, rng, "3d")]
    assert np.array_equal(backbone_forward(bb, standardize_batch(seqs)),
                          backbone_forward(back, standardize_batch(seqs)))
    raw = (tmp_path / "b.ucbb").read_bytes()
    assert raw[:4] == b"UCBB"


def test_corrupt_backbone_rejected():
    raw = bytearray(serialize_backbone(toy_backbone(d=8, heads=2, mlp=8)))
    bad = raw.copy()
    bad[100] ^= 0x10
    for data in (bytes(bad), bytes(raw[:-9]), b"UCBX" + bytes(raw[4:])):
        with pytest.raises(CodecError):
            deserialize_backbone(data)
