import json

import numpy as np
import pytest

from hypercloning import cloning as C
from hypercloning import model as M
from hypercloning import verify as V
from hypercloning.errors import ContractError
from hypercloning.tensor import Rng


@pytest.fixture(scope="module")
def batches():
    return V.random_batches(256, 4, 24, batch_size=2, seed=3)


def test_identity_expansion_is_exact(micro, batches):
    config, params = micro
    pd, cd, rc = C.expand_model(params, config, C.ExpansionConfig(1, 1, 1, 1))
    rep = V.verify_preservation(params, config, pd, cd, rc, batches)
    assert rep.passed
    assert rep.logit_max_abs_diff == 0.0
    assert all(v == 0.0 for v in rep.snapshot_max_abs_diff.values())
    assert rep.argmax_agreement == 1.0


def test_symmetric_tiny_passes():
    config = M.get_preset("tiny")
    params = M.init_random(config, Rng(0))
    pd, cd, rc = C.expand_model(params, config, C.ExpansionConfig(2, 2, 2, 1))
    rep = V.verify_preservation(params, config, pd, cd, rc, V.random_batches(11, 32, 5, seed=1))
    assert rep.passed and rep.logit_max_abs_diff <= 1e-10
    assert rep.metadata["strategy"] == "symmetric" and rep.metadata["batches"] == 32


@pytest.mark.parametrize("block,tensor", [(0, "attn.w_v"), (1, "ffn.w_up"), (1, "ffn.w_down")])
def test_fault_injection_names_block(micro, micro_clone, batches, block, tensor):
    config, params = micro
    pd, cd, rc = micro_clone
    bad = dict(pd)
    name = f"blocks.{block}.{tensor}"
    w = bad[name].copy()
    w[0, 0] += 1.0
    bad[name] = w
    rep = V.verify_preservation(params, config, bad, cd, rc, batches)
    assert not rep.passed
    # the first snapshot after the corrupted weight fails
    stage = "attn" if tensor.startswith("attn") else "ffn"
    assert rep.first_failure == f"blocks.{block}.{stage}"
    assert rep.worst_tensor == name
    assert rep.worst_tensor_residual == pytest.approx(1.0)


def test_report_invariant_and_json(micro, micro_clone, batches):
    config, params = micro
    pd, cd, rc = micro_clone
    rep = V.verify_preservation(params, config, pd, cd, rc, batches, tolerance=1e-10)
    d = json.loads(rep.to_json())
    assert d["pass"] is True
    assert d["precision"] == "float64"
    assert set(f"snapshot.{n}.max_abs_diff" for n in M.snapshot_names(config)) <= set(d)
    assert "meta.strategy" in d
    strict = V.verify_preservation(params, config, pd, cd, rc, batches, tolerance=0.0)
    assert strict.passed == (strict.logit_max_abs_diff == 0 and max(strict.snapshot_max_abs_diff.values()) == 0)


def test_receipt_mismatch_is_contract_error(micro, micro_clone, batches):
    config, params = micro
    pd, cd, rc = micro_clone
    other = C.expand_model(params, config, C.ExpansionConfig(2, 1, 2, 1))
    with pytest.raises(ContractError):
        V.verify_preservation(params, config, pd, cd, other[2], batches)


def test_verification_runs_in_64_bit_by_default(micro, micro_clone, batches):
    config, params = micro
    pd, cd, rc = micro_clone
    p32 = M.cast_params(pd, np.float32)
    rep = V.verify_preservation(params, config, p32, cd, rc, batches)
    assert rep.precision == "float64"
    # float32 storage rounding remains, but far inside the 32-bit tolerance
    assert rep.logit_max_abs_diff <= 1e-4


def test_batch_order_does_not_matter(micro, micro_clone, batches):
    config, params = micro
    pd, cd, rc = micro_clone
    a = V.verify_preservation(params, config, pd, cd, rc, batches).to_dict()
    b = V.verify_preservation(params, config, pd, cd, rc, batches[::-1]).to_dict()
    assert a == b


def test_argmax_stability(micro, micro_clone):
    config, params = micro
    pd, cd, _ = micro_clone
    toks = V.random_batches(256, 4, 64, batch_size=16, seed=5)  # 4096 positions
    assert V.verify_argmax_stability(params, config, params, config, toks) == 1.0
    assert V.verify_argmax_stability(params, config, pd, cd, toks, precision=np.float32) >= 0.999
    other = M.init_random(config, Rng(99))
    assert V.verify_argmax_stability(params, config, other, config, toks) < 3 / 256


def test_argmax_ties_go_low():
    assert V.argmax_lowest(np.array([[1.0, 3.0, 3.0]])).tolist() == [1]
