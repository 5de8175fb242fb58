"""Adam over named parameter groups with row-wise surgery for densification."""
from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .errors import UsageError
from .scene import GaussianScene

GAUSSIAN_GROUPS = GaussianScene.PARAM_NAMES
BETAS = (0.9, 0.999)
EPS = 1e-15


def exponential_lr(step, lr_init, lr_final, max_steps):
    """Log-linear interpolation from ``lr_init`` to ``lr_final`` over ``max_steps``."""
    if max_steps <= 0 or lr_init == lr_final:
        return lr_init
    if lr_init <= 0 or lr_final <= 0:
        return lr_init if step < max_steps else lr_final
    frac = min(max(step / max_steps, 0.0), 1.0)
    return float(np.exp(np.log(lr_init) * (1 - frac) + np.log(lr_final) * frac))


class SceneOptimizer:
    """One ``torch.optim.Adam`` with a group per Gaussian attribute plus ``field`` and ``head``.

    Gaussian groups hold a single tensor whose rows are Gaussians, so densify/prune
    can reindex both the parameter and its moments.
    """

    def __init__(self, scene: GaussianScene, modules: dict[str, nn.Module], lrs: dict[str, float]):
        self.scene = scene
        groups = []
        for name in GAUSSIAN_GROUPS:
            groups.append({"params": [getattr(scene, name)], "lr": float(lrs[name]), "name": name})
        self.module_params = {}
        for name, module in modules.items():
            if module is None:
                continue
            params = list(module.parameters())
            self.module_params[name] = params
            groups.append({"params": params, "lr": float(lrs[name]), "name": name})
        self.opt = torch.optim.Adam(groups, betas=BETAS, eps=EPS)

    def group(self, name) -> dict:
        for g in self.opt.param_groups:
            if g["name"] == name:
                return g
        raise KeyError(name)

    def set_lr(self, name, lr):
        self.group(name)["lr"] = float(lr)

    def zero_grad(self):
        self.opt.zero_grad(set_to_none=True)

    def step(self):
        self.opt.step()

    def _swap(self, name, new_tensor, moments):
        g = self.group(name)
        old = g["params"][0]
        state = self.opt.state.pop(old, None)
        param = nn.Parameter(new_tensor.contiguous())
        g["params"][0] = param
        if state is not None:
            state["exp_avg"], state["exp_avg_sq"] = moments(state["exp_avg"]), moments(state["exp_avg_sq"])
            self.opt.state[param] = state
        setattr(self.scene, name, param)

    def reindex(self, keep: torch.Tensor, extra: dict[str, torch.Tensor] | None = None):
        """Keep rows ``keep`` (bool mask) of every Gaussian tensor, then append ``extra`` rows.

        Moments of kept rows are carried over; appended rows start from zero moments.
        """
        for name in GAUSSIAN_GROUPS:
            old = getattr(self.scene, name).detach()
            add = None if extra is None else extra[name].to(old.dtype)
            new = old[keep] if add is None else torch.cat([old[keep], add])

            def moments(m, add=add):
                kept = m[keep]
                return kept if add is None else torch.cat([kept, torch.zeros_like(add)])

            self._swap(name, new, moments)

    def reset_moments(self, name):
        param = self.group(name)["params"][0]
        state = self.opt.state.get(param)
        if state is not None:
            state["exp_avg"].zero_()
            state["exp_avg_sq"].zero_()

    def replace_values(self, name, values: torch.Tensor, reset=True):
        """Overwrite a Gaussian tensor in place (e.g. opacity reset), optionally zeroing its moments."""
        with torch.no_grad():
            self.group(name)["params"][0].copy_(values)
        if reset:
            self.reset_moments(name)

    def _named_params(self):
        for g in self.opt.param_groups:
            for i, p in enumerate(g["params"]):
                yield f"{g['name']}.{i}", p

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for key, p in self._named_params():
            st = self.opt.state.get(p)
            if not st:
                continue
            out[f"{key}.step"] = np.asarray(float(st["step"]), dtype=np.float64)
            out[f"{key}.exp_avg"] = st["exp_avg"].detach().numpy().astype(np.float32)
            out[f"{key}.exp_avg_sq"] = st["exp_avg_sq"].detach().numpy().astype(np.float32)
        return out

    def load_state_arrays(self, arrays: dict):
        self.opt.state.clear()
        for key, p in self._named_params():
            if f"{key}.step" not in arrays:
                continue
            m, v = arrays[f"{key}.exp_avg"], arrays[f"{key}.exp_avg_sq"]
            if tuple(m.shape) != tuple(p.shape) or tuple(v.shape) != tuple(p.shape):
                raise UsageError(f"optimizer moments for {key} do not match the parameter shape")
            self.opt.state[p] = {
                "step": torch.tensor(float(arrays[f"{key}.step"]), dtype=torch.float32),
                "exp_avg": torch.as_tensor(m, dtype=p.dtype).clone(),
                "exp_avg_sq": torch.as_tensor(v, dtype=p.dtype).clone(),
            }

    def check_consistency(self):
        for key, p in self._named_params():
            st = self.opt.state.get(p)
            if st and (st["exp_avg"].shape != p.shape or st["exp_avg_sq"].shape != p.shape):
                raise UsageError(f"optimizer state for {key} has drifted from its parameter shape")
