import numpy as np
import pytest
import torch

from morphbc import encoder as enc
from morphbc import netcore as nc
from morphbc.config import DESK_MODEL, PAPER_MODEL
from morphbc.model import (AdaptiveBudgetExceeded, CorrespondenceMismatch,
                           MetaModel, UnknownDonor, parameter_census)
from conftest import synth_frame, tiny_model


def test_parameter_census_partition():
    model = tiny_model(seed=1)
    model.init_adaptive("e1", "t1", 3, 2, check_budget=False)
    model.init_adaptive("e2", "t1", 2, 0, check_budget=False)
    census = parameter_census(model)
    assert census["shared"] + census["policy"] + census["adaptive"] == census["total"]
    named = set(model.named_shared_tensors()) | set(model.named_adaptive_tensors())
    assert len(named) == sum(1 for _ in model.parameters())


@pytest.mark.parametrize("cfg", [DESK_MODEL, PAPER_MODEL], ids=["desk", "paper"])
def test_adaptive_budget_under_ten_percent(cfg):
    model = MetaModel(cfg, seed=0)
    model.init_adaptive("chain-9", "reach", 10, 3)   # budget check is on
    assert model.adaptive_fraction("chain-9", "reach") < 0.10


def test_adaptive_budget_rejects_tiny_models():
    model = tiny_model(width=16, layers=2, rank=8)
    with pytest.raises(AdaptiveBudgetExceeded):
        model.init_adaptive("e", "t", 3, 0, check_budget=True)


def test_same_embodiment_donor_copies_rows_bit_identical():
    model = tiny_model(seed=2)
    a = model.init_adaptive("e1", "t1", 4, 3, check_budget=False)
    with torch.no_grad():
        a.emb_params.p_s.normal_(0, 0.5)
    b = model.init_adaptive("e1-clone", "t1", 4, 3, donor="e1", check_budget=False)
    assert torch.equal(b.emb_params.p_s, a.emb_params.p_s)
    for pa, pb in zip(a.emb_params.s_peft, b.emb_params.s_peft):
        assert torch.equal(pa.down_q, pb.down_q)


def test_donor_three_to_four_links():
    model = tiny_model(seed=3)
    a = model.init_adaptive("c3", "t", 4, 3, check_budget=False)  # 3 joints + extra
    with torch.no_grad():
        a.emb_params.p_s.normal_(0, 0.5)
    b = model.init_adaptive("c4", "t", 5, 3, donor="c3", check_budget=False)
    for j in range(3):
        assert torch.equal(b.emb_params.p_s[j], a.emb_params.p_s[j])
    assert not torch.allclose(b.emb_params.p_s[3], a.emb_params.p_s[3])  # fresh row
    assert torch.equal(b.emb_params.p_s[4], a.emb_params.p_s[3])         # extra row


def test_donor_fresh_init_is_neutral():
    model = tiny_model(seed=4)
    a = model.init_adaptive("e", "t", 3, 0, check_budget=False)
    for peft in list(a.emb_params.s_peft) + list(a.task_params.m_peft):
        for t in nc.PEFT_TARGETS:
            assert torch.all(getattr(peft, f"bias_{t}") == 0)
            assert torch.all(getattr(peft, f"up_{t}") == 0)
        assert torch.all(peft.ls_attn == 1)
        assert torch.all(peft.ls_mlp == 1)


def test_unknown_donor():
    model = tiny_model(seed=5)
    with pytest.raises(UnknownDonor):
        model.init_adaptive("e", "t", 3, 0, donor="ghost", check_budget=False)


def test_donor_larger_than_target_requires_correspondence():
    model = tiny_model(seed=6)
    model.init_adaptive("c4", "t", 4, 0, check_budget=False)
    with pytest.raises(CorrespondenceMismatch):
        model.init_adaptive("c2", "t", 2, 0, donor="c4", check_budget=False)
    b = model.init_adaptive("c2b", "t", 2, 0, donor="c4",
                            correspondence=[(0, 0), (3, 1)], check_budget=False)
    a = model.emb_adaptive["c4"]
    assert torch.equal(b.emb_params.p_s[1], a.p_s[3])


def test_donor_rank_transfer_preserves_delta():
    # Donor delta survives a rank-up exactly and a rank-down by SVD truncation.
    model16 = tiny_model(seed=7, rank=4)
    a = model16.init_adaptive("e", "t", 3, 0, check_budget=False)
    with torch.no_grad():
        a.emb_params.s_peft[0].up_q.normal_(0, 0.1)
    delta = (a.emb_params.s_peft[0].up_q @ a.emb_params.s_peft[0].down_q).detach()

    model_up = tiny_model(seed=8, rank=8)
    model_up.emb_adaptive["e"] = model16.emb_adaptive["e"]
    b = model_up.init_adaptive("e2", "t", 3, 0, donor="e", check_budget=False)
    # Note the donor slot keeps rank 4 while the new slot has rank 8.
    delta_up = (b.emb_params.s_peft[0].up_q @ b.emb_params.s_peft[0].down_q).detach()
    assert torch.allclose(delta_up, delta, atol=1e-6)

    model_dn = tiny_model(seed=9, rank=2)
    model_dn.emb_adaptive["e"] = model16.emb_adaptive["e"]
    c = model_dn.init_adaptive("e3", "t", 3, 0, donor="e", check_budget=False)
    delta_dn = (c.emb_params.s_peft[0].up_q @ c.emb_params.s_peft[0].down_q).detach()
    # Best rank-2 approximation cannot be exact but must capture the top modes.
    u, s, vh = torch.linalg.svd(delta.double())
    best = (u[:, :2] * s[:2]) @ vh[:2]
    assert torch.allclose(delta_dn.double(), best, atol=1e-5)


def test_checkpoint_roundtrip_full_model(tmp_path, rng):
    model = tiny_model(seed=10)
    model.init_adaptive("chain-2", "reach", 3, 3, check_budget=False)
    model.init_adaptive("cart-chain-1", "balance", 2, 0, check_budget=False)
    path = tmp_path / "m.mck"
    model.save(path)
    loaded = MetaModel.load(path)
    assert loaded.cfg == model.cfg
    assert loaded.shared_checksum() == model.shared_checksum()
    for name, p in model.named_adaptive_tensors().items():
        q = dict(loaded.named_adaptive_tensors())[name]
        assert torch.equal(p.detach(), q.detach()), name
    # Behavioral equivalence on a random frame.
    frame = synth_frame(2, 0, rng)
    a = model.adaptive("cart-chain-1", "balance")
    b = loaded.adaptive("cart-chain-1", "balance")
    ma = enc.encode_states([frame], a, model.shared)
    mb = enc.encode_states([frame], b, loaded.shared)
    assert torch.allclose(ma, mb, atol=1e-7)


def test_checkpoint_shared_invariance_under_adaptive_change(tmp_path):
    model = tiny_model(seed=11)
    model.init_adaptive("e", "t", 3, 0, check_budget=False)
    before = model.shared_checksum()
    with torch.no_grad():
        model.emb_adaptive["e"].p_s.add_(1.0)
    assert model.shared_checksum() == before
