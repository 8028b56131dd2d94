"""Container tying shared encoder, policy and per-(embodiment, task) adaptive
parameter sets together, with checkpoint (de)serialization."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .config import ModelConfig
from . import netcore as nc
from .encoder import AdaptiveParamSet, EmbodimentAdaptive, SharedEncoderParams, TaskAdaptive
from .policy import PolicyParams


class UnknownDonor(KeyError):
    pass


class CorrespondenceMismatch(ValueError):
    pass


class AdaptiveBudgetExceeded(RuntimeError):
    pass


class MetaModel(nn.Module):
    """Shared + policy weights plus registered adaptive sets.

    `param_version` is bumped after every optimizer step so demonstration
    feature caches can detect staleness.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        self.dtype = dtype
        gen = torch.Generator()
        gen.manual_seed(seed)
        self._gen = gen
        self.shared = SharedEncoderParams(cfg, gen, dtype=dtype)
        self.policy = PolicyParams(cfg, gen, dtype=dtype)
        self.emb_adaptive = nn.ModuleDict()
        self.task_adaptive = nn.ModuleDict()   # nested: embodiment -> task
        self.param_version = 0

    # -- adaptive registry -------------------------------------------------

    def has_adaptive(self, emb_name: str, task_name: str) -> bool:
        return emb_name in self.emb_adaptive and emb_name in self.task_adaptive \
            and task_name in self.task_adaptive[emb_name]

    def adaptive(self, emb_name: str, task_name: str) -> AdaptiveParamSet:
        try:
            return AdaptiveParamSet(self.emb_adaptive[emb_name],
                                    self.task_adaptive[emb_name][task_name])
        except KeyError:
            raise KeyError(f"no adaptive parameters for ({emb_name}, {task_name})") from None

    def init_adaptive(self, emb_name: str, task_name: str, n_tokens: int,
                      extrasensory_dim: int, donor: str | None = None,
                      correspondence=None, check_budget: bool = True) -> AdaptiveParamSet:
        """Create (or extend) the adaptive set for a new (embodiment, task).

        With a donor embodiment: positional rows are copied by joint
        correspondence (identity by index unless given; the extrasensory row
        maps to the extrasensory row; unmatched rows stay fresh) and the
        structure-encoder PEFT slots are transferred. The task part is always
        fresh-neutral.
        """
        if donor is not None and donor not in self.emb_adaptive:
            raise UnknownDonor(f"donor embodiment {donor!r} not in the model")
        if emb_name not in self.emb_adaptive:
            emb_ad = EmbodimentAdaptive(self.cfg, n_tokens, extrasensory_dim,
                                        self._gen, dtype=self.dtype)
            if donor is not None:
                self._transfer_from_donor(emb_ad, self.emb_adaptive[donor],
                                          extrasensory_dim, correspondence)
            self.emb_adaptive[emb_name] = emb_ad
        if emb_name not in self.task_adaptive:
            self.task_adaptive[emb_name] = nn.ModuleDict()
        if task_name not in self.task_adaptive[emb_name]:
            self.task_adaptive[emb_name][task_name] = TaskAdaptive(
                self.cfg, self._gen, dtype=self.dtype
            )
        out = self.adaptive(emb_name, task_name)
        if check_budget:
            frac = self.adaptive_fraction(emb_name, task_name)
            if frac >= 0.10:
                raise AdaptiveBudgetExceeded(
                    f"adaptive set for ({emb_name}, {task_name}) holds "
                    f"{frac:.1%} of all parameters (>= 10%)"
                )
        return out

    def _transfer_from_donor(self, new: EmbodimentAdaptive, donor: EmbodimentAdaptive,
                             extrasensory_dim: int, correspondence) -> None:
        new_joints = new.n_tokens - (1 if extrasensory_dim > 0 else 0)
        donor_joints = donor.n_tokens - (1 if donor.extra_proj is not None else 0)
        if correspondence is None:
            if donor_joints > new_joints:
                raise CorrespondenceMismatch(
                    f"donor has {donor_joints} joints > target {new_joints}; "
                    "supply an explicit joint correspondence"
                )
            correspondence = [(j, j) for j in range(donor_joints)]
        with torch.no_grad():
            for src, dst in correspondence:
                if not (0 <= src < donor_joints and 0 <= dst < new_joints):
                    raise CorrespondenceMismatch(f"pair ({src}, {dst}) out of range")
                new.p_s[dst] = donor.p_s[src]
            if donor.extra_proj is not None and extrasensory_dim > 0:
                new.p_s[-1] = donor.p_s[-1]
                if donor.extra_proj.shape == new.extra_proj.shape:
                    new.extra_proj.copy_(donor.extra_proj)
            for new_peft, donor_peft in zip(new.s_peft, donor.s_peft):
                _transfer_peft(new_peft, donor_peft)

    # -- bookkeeping ---------------------------------------------------------

    def shared_parameters(self):
        yield from self.shared.parameters()
        yield from self.policy.parameters()

    def adaptive_parameters(self, emb_name: str, task_name: str):
        yield from self.adaptive(emb_name, task_name).parameters()

    def adaptive_fraction(self, emb_name: str, task_name: str) -> float:
        a = self.adaptive(emb_name, task_name).scalar_count()
        total = sum(p.numel() for p in self.shared_parameters()) + a
        return a / total

    def shared_checksum(self) -> bytes:
        import hashlib
        h = hashlib.sha256()
        for name, p in sorted(self.named_shared_tensors().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().to(torch.float32).numpy().tobytes())
        return h.digest()

    def named_shared_tensors(self) -> dict:
        out = {}
        for name, p in self.shared.named_parameters():
            out["shared/" + name.replace(".", "/")] = p
        for name, p in self.policy.named_parameters():
            out["policy/" + name.replace(".", "/")] = p
        return out

    def named_adaptive_tensors(self) -> dict:
        out = {}
        for emb_name, mod in self.emb_adaptive.items():
            for name, p in mod.named_parameters():
                out[f"adaptive/{emb_name}/" + name.replace(".", "/")] = p
        for emb_name, tasks in self.task_adaptive.items():
            for task_name, mod in tasks.items():
                for name, p in mod.named_parameters():
                    out[f"adaptive/{emb_name}/{task_name}/" + name.replace(".", "/")] = p
        return out

    # -- checkpointing -------------------------------------------------------

    def save(self, path) -> None:
        named = dict(self.named_shared_tensors())
        named.update(self.named_adaptive_tensors())
        named["meta/width"] = torch.tensor(float(self.cfg.width))
        named["meta/layers"] = torch.tensor(float(self.cfg.layers))
        named["meta/heads"] = torch.tensor(float(self.cfg.heads))
        named["meta/window"] = torch.tensor(float(self.cfg.window))
        named["meta/history"] = torch.tensor(float(self.cfg.history))
        named["meta/rank"] = torch.tensor(float(self.cfg.rank))
        named["meta/d_raw"] = torch.tensor(float(self.cfg.d_raw))
        named["meta/match_mode"] = torch.tensor(
            0.0 if self.cfg.match_mode == "cross_attention" else 1.0
        )
        named["meta/cosine_tau"] = torch.tensor(float(self.cfg.cosine_tau))
        nc.save_checkpoint(path, named)

    @classmethod
    def load(cls, path, dtype=torch.float32) -> "MetaModel":
        records = nc.load_checkpoint(path)
        cfg = ModelConfig(
            width=int(records["meta/width"].item()),
            layers=int(records["meta/layers"].item()),
            heads=int(records["meta/heads"].item()),
            window=int(records["meta/window"].item()),
            history=int(records["meta/history"].item()),
            rank=int(records["meta/rank"].item()),
            d_raw=int(records["meta/d_raw"].item()),
            match_mode="cross_attention" if records["meta/match_mode"].item() == 0.0
            else "cosine_softmax",
            cosine_tau=float(records["meta/cosine_tau"].item()),
        )
        model = cls(cfg, seed=0, dtype=dtype)
        # Register adaptive sets found in the file.
        pairs, embs = set(), {}
        for name in records:
            parts = name.split("/")
            if parts[0] != "adaptive":
                continue
            emb_name = parts[1]
            if parts[2] == "p_s":
                embs[emb_name] = records[name].shape[0]
            if parts[2] == "extra_proj":
                embs.setdefault(emb_name, None)
            if len(parts) > 3 and parts[2] not in ("p_s", "s_peft", "extra_proj"):
                pairs.add((emb_name, parts[2]))
        for emb_name, n_tokens in embs.items():
            e_dim_rec = records.get(f"adaptive/{emb_name}/extra_proj")
            e_dim = 0 if e_dim_rec is None else e_dim_rec.shape[1]
            tasks = [t for (e, t) in pairs if e == emb_name] or []
            if not tasks:
                model.init_adaptive(emb_name, "_none", n_tokens, e_dim, check_budget=False)
                del model.task_adaptive[emb_name]["_none"]
            for task_name in tasks:
                model.init_adaptive(emb_name, task_name, n_tokens, e_dim,
                                    check_budget=False)
        model.load_records(records)
        return model

    def load_records(self, records: dict) -> None:
        named = dict(self.named_shared_tensors())
        named.update(self.named_adaptive_tensors())
        with torch.no_grad():
            for name, p in named.items():
                if name not in records:
                    raise nc.CheckpointError(f"checkpoint is missing record {name}")
                if tuple(records[name].shape) != tuple(p.shape):
                    raise nc.CheckpointError(
                        f"record {name} has shape {tuple(records[name].shape)}, "
                        f"expected {tuple(p.shape)}"
                    )
                p.copy_(records[name].to(p.dtype))


def save_adaptive(model: MetaModel, emb_name: str, task_name: str, path) -> None:
    """Write one (E, T) adaptive set as a standalone checkpoint-format file."""
    adaptive = model.adaptive(emb_name, task_name)
    named = {}
    for name, p in adaptive.emb_params.named_parameters():
        named[f"adaptive/{emb_name}/" + name.replace(".", "/")] = p
    for name, p in adaptive.task_params.named_parameters():
        named[f"adaptive/{emb_name}/{task_name}/" + name.replace(".", "/")] = p
    nc.save_checkpoint(path, named)


def load_adaptive(model: MetaModel, path) -> tuple:
    """Register and fill the adaptive set stored at path; returns its
    (embodiment, task) key. LoRA rank is inferred from the records."""
    import dataclasses
    records = nc.load_checkpoint(path)
    emb_name = task_name = None
    n_tokens = extra_dim = 0
    rank = model.cfg.rank
    for name, t in records.items():
        parts = name.split("/")
        emb_name = parts[1]
        if parts[2] == "p_s":
            n_tokens = t.shape[0]
        elif parts[2] == "extra_proj":
            extra_dim = t.shape[1]
        elif parts[2] == "s_peft" and parts[-1].startswith("down_"):
            rank = t.shape[0]
        elif parts[2] not in ("p_s", "extra_proj", "s_peft"):
            task_name = parts[2]
    if emb_name is None or task_name is None:
        raise nc.CheckpointError(f"{path} does not hold an adaptive parameter set")
    cfg = dataclasses.replace(model.cfg, rank=rank)
    gen = torch.Generator()
    gen.manual_seed(0)
    from .encoder import EmbodimentAdaptive, TaskAdaptive
    model.emb_adaptive[emb_name] = EmbodimentAdaptive(
        cfg, n_tokens, extra_dim, gen, dtype=model.dtype
    )
    if emb_name not in model.task_adaptive:
        model.task_adaptive[emb_name] = nn.ModuleDict()
    model.task_adaptive[emb_name][task_name] = TaskAdaptive(cfg, gen, dtype=model.dtype)
    with torch.no_grad():
        named = {}
        adaptive = model.adaptive(emb_name, task_name)
        for name, p in adaptive.emb_params.named_parameters():
            named[f"adaptive/{emb_name}/" + name.replace(".", "/")] = p
        for name, p in adaptive.task_params.named_parameters():
            named[f"adaptive/{emb_name}/{task_name}/" + name.replace(".", "/")] = p
        for name, p in named.items():
            if name not in records:
                raise nc.CheckpointError(f"adaptive file is missing record {name}")
            p.copy_(records[name].to(p.dtype))
    return emb_name, task_name


def _transfer_peft(new: nc.PeftParams, donor: nc.PeftParams) -> None:
    """Copy PEFT slots across possibly different ranks: exact at equal rank,
    zero-padded when the target rank is larger, SVD-truncated when smaller."""
    with torch.no_grad():
        for t in nc.PEFT_TARGETS:
            getattr(new, f"bias_{t}").copy_(getattr(donor, f"bias_{t}"))
            d_down, d_up = getattr(donor, f"down_{t}"), getattr(donor, f"up_{t}")
            n_down, n_up = getattr(new, f"down_{t}"), getattr(new, f"up_{t}")
            r_new, r_old = n_down.shape[0], d_down.shape[0]
            if r_new == r_old:
                n_down.copy_(d_down)
                n_up.copy_(d_up)
            elif r_new > r_old:
                n_down[:r_old].copy_(d_down)   # remaining rows keep fresh init
                n_up.zero_()
                n_up[:, :r_old].copy_(d_up)
            else:
                delta = (d_up.double() @ d_down.double())
                u, s, vh = torch.linalg.svd(delta, full_matrices=False)
                k = r_new
                n_up.copy_((u[:, :k] * s[:k]).to(n_up.dtype))
                n_down.copy_(vh[:k].to(n_down.dtype))
        new.ls_attn.copy_(donor.ls_attn)
        new.ls_mlp.copy_(donor.ls_mlp)


def parameter_census(model: MetaModel) -> dict:
    """Ownership census: every parameter belongs to exactly one bucket and the
    buckets add up to the model total."""
    shared = sum(p.numel() for p in model.shared.parameters())
    policy = sum(p.numel() for p in model.policy.parameters())
    adaptive = sum(p.numel() for p in model.emb_adaptive.parameters()) + \
        sum(p.numel() for p in model.task_adaptive.parameters())
    total = sum(p.numel() for p in model.parameters())
    return {"shared": shared, "policy": policy, "adaptive": adaptive, "total": total}
