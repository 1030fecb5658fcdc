"""Adversaries: how the f colluding malicious clients build their
round contributions.

The harness hands each adversary an :class:`AdversaryView` whose
fields are populated strictly according to the threat model: benign
updates only under gradients-known, aggregator internals only under
AGR-tailored. Attacks that need nothing beyond their own data (data
poisoning, sign flipping) ignore the optional fields entirely.
"""

from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from scipy.stats import norm

from . import learner, params
from .aggregators import CenteredClipping, RoundInfo
from .clustering import hdbscan
from .data import TriggerSpec, class_bias, poison_shard, uniform_flip
from .gamma import (
    max_norm_bounded_gamma,
    solve_gamma_analytic,
    solve_gamma_iterative,
)
from .rng import child_seed

TARGETED_FAMILIES = ("flame_tailored", "mdam_tailored", "agnostic_targeted")
UNTARGETED_FAMILIES = ("cc_tailored", "lie", "fang", "sign_flip")
DATA_POISON_FAMILIES = ("dba", "label_flip", "class_bias")
ALL_FAMILIES = TARGETED_FAMILIES + UNTARGETED_FAMILIES + DATA_POISON_FAMILIES


@dataclass
class ThreatModel:
    """Who the adversary is and what it may see."""

    f: int
    family: str
    agr_tailored: bool = False
    gradients_known: bool = False
    atk_tau: Optional[float] = None
    gamma_init: Optional[float] = None  # default depends on family
    epsilon: float = 1e-3
    solver: str = "iterative"  # iterative | analytic
    bias_rate: float = 0.5
    bias_target: int = 7
    fang_eps: float = 0.01
    target_model: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.f < 1:
            raise ValueError("need at least one malicious client")
        if self.family not in ALL_FAMILIES:
            raise ValueError(f"unknown attack family {self.family!r}")
        if self.gamma_init is None:
            self.gamma_init = 10.0 if self.family in ("cc_tailored", "fang") else 1.0
        if self.solver not in ("iterative", "analytic"):
            raise ValueError(f"unknown solver {self.solver!r}")


@dataclass
class AdversaryView:
    """Per-round capability object; None fields were not granted."""

    w_global: np.ndarray
    n: int
    f: int
    server_lr: float
    round_index: int
    seed: int
    own_clean_updates: List[np.ndarray]
    own_poisoned_updates: Optional[List[np.ndarray]] = None
    malicious_shards: Optional[list] = None  # [(X, y)] for the f clients
    model_spec: Optional[learner.ModelSpec] = None
    train_cfg: Optional[learner.TrainConfig] = None
    trigger: Optional[TriggerSpec] = None
    benign_updates: Optional[List[np.ndarray]] = None  # gradients-known only
    agr: Optional[dict] = None  # AGR-tailored only


def build_reference(view: AdversaryView) -> np.ndarray:
    """Reference benign gradient: mean of the benign updates when they
    are visible, otherwise mean of the adversary's own clean-data
    gradients."""
    if view.benign_updates is not None:
        return np.mean(view.benign_updates, axis=0)
    return np.mean(view.own_clean_updates, axis=0)


def visible_set(view: AdversaryView) -> List[np.ndarray]:
    """Gradients the constraint bound may be measured against."""
    if view.benign_updates is not None:
        return list(view.benign_updates)
    return list(view.own_clean_updates)


def model_replacement_gradients(x: np.ndarray, w: np.ndarray, n: int, f: int,
                                eta: float) -> List[np.ndarray]:
    """The f poisoned gradients that drive an additively aggregated
    global model onto x once benign contributions cancel: each equals
    (n / (f * eta)) * (x - w)."""
    if eta <= 0 or f < 1:
        raise ValueError("need eta > 0 and f >= 1")
    g = (n / (f * eta)) * (x - w)
    return [g.copy() for _ in range(f)]


class Adversary:
    """Base adversary: hooks for data poisoning and update crafting."""

    def __init__(self, tm: ThreatModel):
        self.tm = tm
        self.last_gamma: Optional[float] = None

    def transform_shard(self, adv_index: int, X, y, seed: int):
        """Training-data manipulation for malicious client adv_index."""
        return X, y

    def poisons_training_data(self) -> bool:
        return False

    def craft(self, view: AdversaryView) -> List[np.ndarray]:
        raise NotImplementedError

    # -- shared helpers -------------------------------------------------

    def _replacement_base(self, view: AdversaryView) -> np.ndarray:
        """Model-replacement poisoned gradient in the server's
        convention.

        The server applies w <- w - eta * mean(updates), so pushing the
        aggregate onto a target x needs (n / (f*eta)) * (w - x); the
        target is the current global model trained for one epoch on the
        adversary's pooled, trigger-poisoned data.
        """
        if self.tm.target_model is not None:
            x = self.tm.target_model
        else:
            x = self._poisoned_target(view)
        scale = view.n / (self.tm.f * view.server_lr)
        return scale * (view.w_global - x)

    def _poisoned_target(self, view: AdversaryView) -> np.ndarray:
        Xs, ys = [], []
        for j, (X, y) in enumerate(view.malicious_shards):
            seed = child_seed(view.seed, f"round{view.round_index}/adv{j}/pool-poison")
            side = int(np.sqrt(X.shape[1]))
            imgs = X.reshape(-1, side, side)
            px, py, _ = poison_shard(imgs, y, view.trigger, seed)
            Xs.append(px.reshape(X.shape))
            ys.append(py)
        X_pool = np.concatenate(Xs)
        y_pool = np.concatenate(ys)
        cfg = view.train_cfg
        contribution = learner.local_train(
            view.w_global, view.model_spec, X_pool, y_pool,
            learner.TrainConfig(client_lr=cfg.client_lr, local_epochs=1,
                                batch_size=cfg.batch_size),
            seed=child_seed(view.seed, f"round{view.round_index}/target-model"),
        )
        return view.w_global - cfg.client_lr * contribution


class FlameTailoredAttack(Adversary):
    """Evade median clipping by norm projection and density filtering
    by rotating the poisoned gradients toward the benign reference.

    The feasibility oracle demands both the analytic cosine-distance
    bound (max distance to every visible gradient no larger than the
    largest visible pairwise distance) and admission by a rehearsal of
    the density filter itself over the visible gradients, which the
    AGR-tailored adversary can run verbatim.
    """

    def craft(self, view: AdversaryView) -> List[np.ndarray]:
        f = self.tm.f
        g_p = self._replacement_base(view)
        vis = visible_set(view)
        g_b = build_reference(view)
        bound = params.max_pairwise_cosine_distance(vis)

        g_p = params.clip_by_norm(g_p, max(self._pgd_radius(view, vis), 1e-12))
        norm_p = params.l2_norm(g_p)

        def crafted(gamma: float) -> Optional[np.ndarray]:
            g_u = g_p + gamma * (g_b - g_p)
            norm_u = params.l2_norm(g_u)
            if norm_u == 0.0:
                return None
            return g_u * (norm_p / norm_u)

        min_cluster = view.n // 2 + 1
        min_samples = int((view.agr or {}).get("min_samples", 1))

        def admitted(g_c: np.ndarray) -> bool:
            pts = [g_c] * f + vis
            mcs = min(min_cluster, len(pts) // 2 + 1)
            labels = hdbscan(params.pairwise_cosine_distance_matrix(pts), mcs,
                             min_samples=min(min_samples, mcs),
                             allow_single_cluster=True)
            kept = labels[labels >= 0]
            if kept.size == 0:
                return False
            majority = np.bincount(kept).argmax()
            return bool(np.all(labels[:f] == majority))

        def oracle(gamma: float) -> bool:
            g_c = crafted(gamma)
            if g_c is None or params.l2_norm(g_c) == 0.0:
                return False
            if any(params.cosine_distance(g_c, v) > bound for v in vis):
                return False
            return admitted(g_c)

        gamma = solve_gamma_iterative(oracle, self.tm.gamma_init, self.tm.epsilon,
                                      direction="minimize")
        if gamma is None:
            gamma = 1.0
        self.last_gamma = gamma
        g_c = crafted(gamma)
        if g_c is None:
            g_c = g_b * (norm_p / max(params.l2_norm(g_b), 1e-12))
        return [g_c.copy() for _ in range(f)]

    def _pgd_radius(self, view: AdversaryView, vis) -> float:
        """Largest norm that survives the clipping stage unhurt.

        Under the literal rule (distances measured from the previous
        global parameters) that is |q - ||w|||; when the defense clips
        on update norms the bound is the estimated median norm itself.
        """
        mode = (view.agr or {}).get("clip_reference", "global-distance")
        if mode == "global-distance":
            q_est = float(np.median([params.l2_norm(view.w_global - v) for v in vis]))
            return abs(q_est - params.l2_norm(view.w_global))
        return float(np.median([params.l2_norm(v) for v in vis]))


class MdamTailoredAttack(Adversary):
    """Slip identical malicious momenta inside the minimum-diameter
    selection by interpolating toward the benign momentum mean.

    The server folds submitted gradients into per-client momenta, so
    after solving for the target momentum m_c the attack submits the
    gradient whose fold lands exactly on m_c.
    """

    def __init__(self, tm: ThreatModel):
        super().__init__(tm)
        self.m_p = None
        self.m_submitted = None
        self.m_visible = None

    def craft(self, view: AdversaryView) -> List[np.ndarray]:
        beta = float(view.agr["beta"])
        g_p = self._replacement_base(view)
        vis = visible_set(view)

        if self.m_p is None:
            self.m_p = np.zeros_like(g_p)
            self.m_submitted = np.zeros_like(g_p)
            self.m_visible = [np.zeros_like(g_p) for _ in vis]
        self.m_p = beta * self.m_p + (1.0 - beta) * g_p
        self.m_visible = [beta * m + (1.0 - beta) * g
                          for m, g in zip(self.m_visible, vis)]

        m_b = np.mean(self.m_visible, axis=0)
        bound = params.max_pairwise_distance(self.m_visible)
        # the selection keeps n-f of n clients, so at least n-2f benign
        # survive: closeness to the nearest n-2f visible momenta suffices
        need = max(min(view.n - 2 * view.f, len(self.m_visible)), 1)

        gamma = self._solve(m_b, bound, need)
        self.last_gamma = gamma
        m_c = self.m_p + gamma * (m_b - self.m_p)

        if beta == 0.0:
            g_submit = m_c
        else:
            g_submit = (m_c - beta * self.m_submitted) / (1.0 - beta)
        self.m_submitted = beta * self.m_submitted + (1.0 - beta) * g_submit
        return [g_submit.copy() for _ in range(self.tm.f)]

    def _solve(self, m_b, bound, need) -> float:
        if self.tm.solver == "analytic":
            gamma = solve_gamma_analytic(self.m_p, m_b, self.m_visible, bound,
                                         required_count=need, upper=1.0)
            return 1.0 if gamma is None else gamma

        def oracle(gamma: float) -> bool:
            m_c = self.m_p + gamma * (m_b - self.m_p)
            dists = np.sort([params.l2_norm(m_c - m) for m in self.m_visible])
            return bool(dists[need - 1] <= bound)

        gamma = solve_gamma_iterative(oracle, self.tm.gamma_init, self.tm.epsilon,
                                      direction="minimize")
        return 1.0 if gamma is None else gamma


class AgnosticTargetedAttack(Adversary):
    """Pull the poisoned gradients inside the benign diameter under the
    Euclidean metric; no aggregator knowledge used."""

    def craft(self, view: AdversaryView) -> List[np.ndarray]:
        g_p = self._replacement_base(view)
        vis = visible_set(view)
        g_b = build_reference(view)
        bound = params.max_pairwise_distance(vis)

        if self.tm.solver == "analytic":
            gamma = solve_gamma_analytic(g_p, g_b, vis, bound, upper=1.0)
        else:
            def oracle(g: float) -> bool:
                g_c = g_p + g * (g_b - g_p)
                return all(params.l2_norm(g_c - v) <= bound for v in vis)

            gamma = solve_gamma_iterative(oracle, self.tm.gamma_init,
                                          self.tm.epsilon, direction="minimize")
        if gamma is None:
            gamma = 1.0
        self.last_gamma = gamma
        g_c = g_p + gamma * (g_b - g_p)
        return [g_c.copy() for _ in range(self.tm.f)]


class CCTailoredAttack(Adversary):
    """Largest norm-bounded push along the inverse sign of the benign
    reference; survives threshold clipping by construction."""

    def craft(self, view: AdversaryView) -> List[np.ndarray]:
        g_b = build_reference(view)
        if self.tm.agr_tailored:
            atk_tau = float(view.agr["tau"])
        else:
            if self.tm.atk_tau is None:
                raise ValueError("AGR-agnostic clipping attack needs atk_tau")
            atk_tau = float(self.tm.atk_tau)

        gamma = max_norm_bounded_gamma(g_b, atk_tau)
        if gamma is None or gamma < 0.0:
            gamma = 0.0
        self.last_gamma = gamma
        g_c = g_b - gamma * np.sign(g_b)
        # stay strictly inside the clip ball despite rounding
        norm = params.l2_norm(g_c)
        if norm > atk_tau:
            g_c = g_c * (atk_tau * (1.0 - 1e-12) / norm)
        return [g_c.copy() for _ in range(self.tm.f)]


class LieAttack(Adversary):
    """Mean plus a z-scaled standard deviation, with z picked from the
    benign/malicious head count."""

    def craft(self, view: AdversaryView) -> List[np.ndarray]:
        n, f = view.n, view.f
        s = int(np.floor(n / 2 + 1)) - f
        if s < 1:
            s = 1
        ratio = (n - f - s) / (n - f)
        z = float(norm.ppf(ratio))
        vis = np.asarray(visible_set(view))
        mu = vis.mean(axis=0)
        sigma = vis.std(axis=0)
        g_c = mu + z * sigma
        return [g_c.copy() for _ in range(self.tm.f)]


class FangAttack(Adversary):
    """Inverse-sign perturbation of the benign mean with a halving
    scale search; keeps the first scale whose simulated aggregate turns
    against the benign mean."""

    def craft(self, view: AdversaryView) -> List[np.ndarray]:
        vis = visible_set(view)
        mu = np.mean(vis, axis=0)
        g_p = -np.sign(mu)

        def damaging(gamma: float) -> bool:
            crafted = [mu + gamma * g_p] * self.tm.f
            agg = self._simulate(crafted + vis, view)
            return float(agg @ mu) < 0.0

        gamma = self.tm.gamma_init
        chosen = gamma
        while gamma > self.tm.fang_eps:
            if damaging(gamma):
                chosen = gamma
                break
            chosen = gamma
            gamma /= 2.0
        self.last_gamma = chosen
        g_c = mu + chosen * g_p
        return [g_c.copy() for _ in range(self.tm.f)]

    def _simulate(self, updates, view: AdversaryView) -> np.ndarray:
        if view.agr is not None and view.agr.get("kind") == "cc":
            agg, _ = CenteredClipping(float(view.agr["tau"])).aggregate(
                updates, RoundInfo(view.round_index, view.w_global, view.seed))
            return agg
        return np.mean(updates, axis=0)


class DbaAttack(Adversary):
    """Distributed backdoor: adversary j trains honestly on data
    stamped with the (j mod n_local)-th strip of the global trigger."""

    def __init__(self, tm: ThreatModel, trigger: TriggerSpec):
        super().__init__(tm)
        self.trigger = trigger

    def poisons_training_data(self) -> bool:
        return True

    def transform_shard(self, adv_index: int, X, y, seed: int):
        side = int(np.sqrt(X.shape[1]))
        imgs = X.reshape(-1, side, side)
        local_index = adv_index % self.trigger.n_local if self.trigger.n_local > 1 else None
        px, py, _ = poison_shard(imgs, y, self.trigger, seed, local_index=local_index)
        return px.reshape(X.shape), py

    def craft(self, view: AdversaryView) -> List[np.ndarray]:
        return [g.copy() for g in view.own_poisoned_updates]


class SignFlipAttack(Adversary):
    def craft(self, view: AdversaryView) -> List[np.ndarray]:
        return [-g for g in view.own_clean_updates]


class LabelFlipAttack(Adversary):
    def __init__(self, tm: ThreatModel, num_classes: int):
        super().__init__(tm)
        self.num_classes = num_classes

    def poisons_training_data(self) -> bool:
        return True

    def transform_shard(self, adv_index: int, X, y, seed: int):
        return X, uniform_flip(y, self.num_classes)

    def craft(self, view: AdversaryView) -> List[np.ndarray]:
        return [g.copy() for g in view.own_poisoned_updates]


class ClassBiasAttack(Adversary):
    def poisons_training_data(self) -> bool:
        return True

    def transform_shard(self, adv_index: int, X, y, seed: int):
        return X, class_bias(y, self.tm.bias_target, self.tm.bias_rate, seed)

    def craft(self, view: AdversaryView) -> List[np.ndarray]:
        return [g.copy() for g in view.own_poisoned_updates]


def make_adversary(tm: ThreatModel, trigger: Optional[TriggerSpec] = None,
                   num_classes: int = 10) -> Adversary:
    if tm.family == "flame_tailored":
        return FlameTailoredAttack(tm)
    if tm.family == "mdam_tailored":
        return MdamTailoredAttack(tm)
    if tm.family == "agnostic_targeted":
        return AgnosticTargetedAttack(tm)
    if tm.family == "cc_tailored":
        return CCTailoredAttack(tm)
    if tm.family == "lie":
        return LieAttack(tm)
    if tm.family == "fang":
        return FangAttack(tm)
    if tm.family == "dba":
        if trigger is None:
            raise ValueError("distributed backdoor needs a trigger spec")
        return DbaAttack(tm, trigger)
    if tm.family == "sign_flip":
        return SignFlipAttack(tm)
    if tm.family == "label_flip":
        return LabelFlipAttack(tm, num_classes)
    if tm.family == "class_bias":
        return ClassBiasAttack(tm)
    raise ValueError(f"unknown attack family {tm.family!r}")
