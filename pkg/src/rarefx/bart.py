"""Probit additive regression trees for the treatment-response surface.

A sum of ``J`` regression trees models the probit-scale response as a
function of the covariates plus the treatment label (entering as one
categorical input).  Sampling follows the classic backfitting recipe:
truncated-normal latent variables for the binary outcome, one
Metropolis-Hastings structure update per tree per sweep (grow / prune /
change proposals against a depth-decaying split prior), conjugate normal
leaf updates, then a latent refresh.  Counterfactual probabilities for
every treatment level are recorded at each retained sweep, which is what
the effect estimator and the common-support filter consume.

Tree snapshots use a plain tuple form so posteriors can be built by hand
in tests::

    ("leaf", mu)
    ("split", var, ("le", threshold), left, right)     # continuous: x <= t goes left
    ("split", var, ("in", (lvl, ...)), left, right)    # categorical: x in set goes left
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from .core import CATEGORICAL, RD, RR, CausalEstimate, Dataset, nearest_rank

_PROB_EPS = 1e-16


@dataclass(frozen=True)
class BartConfig:
    """Sampler settings.

    ``k`` scales the leaf prior ``mu ~ N(0, (3 / (k sqrt(J)))^2)``; larger
    values shrink leaves harder.  All draws after ``burn_in`` are retained
    (no thinning).
    """

    n_trees: int = 100
    k: float = 2.0
    alpha: float = 0.95
    beta_depth: float = 2.0
    n_iter: int = 5000
    burn_in: int = 3000
    p_grow: float = 0.28
    p_prune: float = 0.28
    p_change: float = 0.44
    n_cutpoints: int = 100
    seed: int = 0
    validate: bool = False

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("need at least one tree")
        if not (0.0 < self.alpha < 1.0):
            raise ValueError("alpha must lie in (0, 1)")
        if self.burn_in >= self.n_iter:
            raise ValueError(
                f"burn-in ({self.burn_in}) must be smaller than total iterations "
                f"({self.n_iter})"
            )
        if abs(self.p_grow + self.p_prune + self.p_change - 1.0) > 1e-12:
            raise ValueError("proposal probabilities must sum to 1")

    @property
    def sigma_mu(self) -> float:
        return 3.0 / (self.k * np.sqrt(self.n_trees))

    @property
    def n_retained(self) -> int:
        return self.n_iter - self.burn_in


class _Node:
    __slots__ = ("var", "rule", "left", "right", "parent", "depth", "mu")

    def __init__(self, depth, parent=None):
        self.var = None
        self.rule = None
        self.left = None
        self.right = None
        self.parent = parent
        self.depth = depth
        self.mu = 0.0

    @property
    def is_leaf(self):
        return self.var is None


def _rule_mask(rule, x):
    tag, payload = rule
    if tag == "le":
        return x <= payload
    return np.isin(x, payload)


class _Tree:
    """Mutable tree tracking the leaf assignment of the training rows."""

    def __init__(self, n_rows):
        self.root = _Node(depth=0)
        self.leaves = [self.root]
        self.leaf_of = np.zeros(n_rows, dtype=np.intp)
        self.splits_treatment = False

    def grow(self, leaf, var, rule):
        leaf.var = var
        leaf.rule = rule
        leaf.left = _Node(leaf.depth + 1, parent=leaf)
        leaf.right = _Node(leaf.depth + 1, parent=leaf)
        leaf.left.mu = leaf.mu
        leaf.right.mu = leaf.mu

    def prune(self, node):
        node.var = None
        node.rule = None
        node.left = None
        node.right = None

    def internal_nodes(self):
        out = []
        stack = [self.root]
        while stack:
            node = stack.pop()
            if not node.is_leaf:
                out.append(node)
                stack.append(node.right)
                stack.append(node.left)
        return out

    def prunable_nodes(self):
        return [
            n
            for n in self.internal_nodes()
            if n.left.is_leaf and n.right.is_leaf
        ]

    def refresh(self, design, treatment_col):
        """Recompute the leaf list and training leaf assignment."""
        leaves = []
        leaf_of = np.zeros(design.shape[0], dtype=np.intp)
        splits_treatment = False

        def descend(node, rows):
            nonlocal splits_treatment
            if node.is_leaf:
                leaf_of[rows] = len(leaves)
                leaves.append(node)
                return
            if node.var == treatment_col:
                splits_treatment = True
            mask = _rule_mask(node.rule, design[rows, node.var])
            descend(node.left, rows[mask])
            descend(node.right, rows[~mask])

        descend(self.root, np.arange(design.shape[0]))
        self.leaves = leaves
        self.leaf_of = leaf_of
        self.splits_treatment = splits_treatment

    def assign(self, design) -> np.ndarray:
        """Leaf-slot index for every row of an arbitrary design."""
        leaf_slot = {id(leaf): i for i, leaf in enumerate(self.leaves)}
        out = np.zeros(design.shape[0], dtype=np.intp)

        def descend(node, rows):
            if rows.size == 0:
                return
            if node.is_leaf:
                out[rows] = leaf_slot[id(node)]
                return
            mask = _rule_mask(node.rule, design[rows, node.var])
            descend(node.left, rows[mask])
            descend(node.right, rows[~mask])

        descend(self.root, np.arange(design.shape[0]))
        return out

    def mu_vector(self) -> np.ndarray:
        return np.array([leaf.mu for leaf in self.leaves])

    def snapshot(self):
        def pack(node):
            if node.is_leaf:
                return ("leaf", node.mu)
            return ("split", node.var, node.rule, pack(node.left), pack(node.right))

        return pack(self.root)

    def structure(self):
        """Hashable structural fingerprint (rules without leaf values)."""
        def pack(node):
            if node.is_leaf:
                return "L"
            return (node.var, node.rule, pack(node.left), pack(node.right))

        return pack(self.root)


def evaluate_snapshot(snapshot, design) -> np.ndarray:
    """Sum-of-leaf values of a snapshotted tree at every design row."""
    out = np.zeros(design.shape[0])

    def descend(node, rows):
        if rows.size == 0:
            return
        if node[0] == "leaf":
            out[rows] = node[1]
            return
        _, var, rule, left, right = node
        mask = _rule_mask(rule, design[rows, var])
        descend(left, rows[mask])
        descend(right, rows[~mask])

    descend(snapshot, np.arange(design.shape[0]))
    return out


@dataclass(frozen=True)
class BartPosterior:
    """Retained posterior draws plus cached counterfactual probabilities.

    ``train_draws[s, i, w-1]`` is the draw-``s`` outcome probability for
    unit ``i`` toggled to treatment ``w`` (training data).  ``ensembles``
    holds one tuple of tree snapshots per retained draw for prediction on
    other data.  ``sd[i, w-1]`` is the per-unit posterior SD of the
    treatment-``w`` probability.
    """

    train_draws: np.ndarray
    ensembles: tuple
    train_design: np.ndarray
    n_treatments: int
    config: BartConfig
    final_latent: np.ndarray
    accept_rate: float
    sd: np.ndarray = field(init=False)

    def __post_init__(self):
        draws = np.asarray(self.train_draws)
        if draws.min() <= 0.0 or draws.max() >= 1.0:
            raise ValueError("probability draws must lie strictly inside (0, 1)")
        if draws.shape[0] != self.config.n_retained:
            raise ValueError("retained draw count does not match the configuration")
        object.__setattr__(self, "sd", draws.std(axis=0, ddof=1))

    @property
    def n_retained(self) -> int:
        return self.train_draws.shape[0]

    @property
    def n_units(self) -> int:
        return self.train_draws.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.train_design.shape[1] - 1


def _split_prob(alpha, beta_depth, depth):
    return alpha * (1.0 + depth) ** (-beta_depth)


def _leaf_loglik(n, s, v):
    # Marginal likelihood of residuals in one leaf, N(0, v) leaf prior and
    # unit latent noise; terms independent of the partition are dropped.
    denom = 1.0 + n * v
    return -0.5 * np.log(denom) + 0.5 * v * s * s / denom


def _draw_subset(rng, levels):
    # uniform over nonempty proper subsets of the observed levels
    m = len(levels)
    while True:
        bits = rng.integers(0, 2, size=m)
        total = int(bits.sum())
        if 0 < total < m:
            return tuple(levels[bits.astype(bool)])


def _sample_truncated_latent(rng, mean, y):
    a = ndtr(-mean)
    u = rng.random(mean.shape[0])
    arg = np.where(y == 1, a + u * (1.0 - a), u * a)
    arg = np.clip(arg, _PROB_EPS, 1.0 - _PROB_EPS)
    return mean + ndtri(arg)


class _Sampler:
    def __init__(self, d: Dataset, config: BartConfig):
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.n = d.n
        self.z_levels = d.n_treatments
        self.treatment_col = d.n_covariates
        self.design = np.column_stack([d.X, d.W.astype(float)])
        self.y = d.Y

        # split-rule candidate pools
        self.grids = []
        self.cat_levels = []
        kinds = list(d.kinds) + [CATEGORICAL]
        for j, kind in enumerate(kinds):
            x = self.design[:, j]
            if kind == CATEGORICAL:
                self.grids.append(None)
                self.cat_levels.append(np.unique(x))
            else:
                qs = np.linspace(0.0, 1.0, config.n_cutpoints + 2)[1:-1]
                self.grids.append(np.unique(np.quantile(x, qs)))
                self.cat_levels.append(None)
        self.n_vars = len(kinds)

        self.v = config.sigma_mu**2
        self.trees = [_Tree(self.n) for _ in range(config.n_trees)]
        self.g = [np.zeros(self.n) for _ in range(config.n_trees)]
        self.fit_total = np.zeros(self.n)
        self.latent = np.where(self.y == 1, 0.5, -0.5).astype(float)
        self.cf_cache: list[dict[int, np.ndarray]] = [dict() for _ in self.trees]
        self.accepts = 0
        self.proposals = 0

    # -- proposal machinery -------------------------------------------------

    def _draw_rule(self, var):
        if self.cat_levels[var] is not None:
            return ("in", _draw_subset(self.rng, self.cat_levels[var]))
        grid = self.grids[var]
        if grid.size == 0:
            return None
        return ("le", float(grid[self.rng.integers(grid.size)]))

    def _update_tree(self, j, resid):
        tree = self.trees[j]
        leaves = tree.leaves
        n_leaf = np.bincount(tree.leaf_of, minlength=len(leaves)).astype(float)
        s_leaf = np.bincount(tree.leaf_of, weights=resid, minlength=len(leaves))
        u = self.rng.random()
        self.proposals += 1
        if u < self.config.p_grow:
            accepted = self._propose_grow(tree, resid, n_leaf, s_leaf)
        elif u < self.config.p_grow + self.config.p_prune:
            accepted = self._propose_prune(tree, resid, n_leaf, s_leaf)
        else:
            accepted = self._propose_change(tree, resid)
        if accepted:
            self.accepts += 1
            tree.refresh(self.design, self.treatment_col)
            self.cf_cache[j] = dict()
            n_leaf = np.bincount(tree.leaf_of, minlength=len(tree.leaves)).astype(float)
            s_leaf = np.bincount(tree.leaf_of, weights=resid, minlength=len(tree.leaves))
        # conjugate leaf refresh
        post_var = 1.0 / (n_leaf + 1.0 / self.v)
        post_mean = post_var * s_leaf
        mu = post_mean + np.sqrt(post_var) * self.rng.standard_normal(len(tree.leaves))
        for slot, leaf in enumerate(tree.leaves):
            leaf.mu = mu[slot]
        new_g = mu[tree.leaf_of]
        self.fit_total += new_g - self.g[j]
        self.g[j] = new_g

    def _propose_grow(self, tree, resid, n_leaf, s_leaf):
        cfg = self.config
        slot = int(self.rng.integers(len(tree.leaves)))
        leaf = tree.leaves[slot]
        var = int(self.rng.integers(self.n_vars))
        rule = self._draw_rule(var)
        if rule is None:
            return False
        rows = np.nonzero(tree.leaf_of == slot)[0]
        mask = _rule_mask(rule, self.design[rows, var])
        n_left = float(mask.sum())
        n_right = n_leaf[slot] - n_left
        if n_left == 0 or n_right == 0:
            return False
        s_left = float(resid[rows[mask]].sum())
        s_right = s_leaf[slot] - s_left
        loglik = (
            _leaf_loglik(n_left, s_left, self.v)
            + _leaf_loglik(n_right, s_right, self.v)
            - _leaf_loglik(n_leaf[slot], s_leaf[slot], self.v)
        )
        p_d = _split_prob(cfg.alpha, cfg.beta_depth, leaf.depth)
        p_d1 = _split_prob(cfg.alpha, cfg.beta_depth, leaf.depth + 1)
        log_prior = np.log(p_d) + 2.0 * np.log1p(-p_d1) - np.log1p(-p_d)
        n_prunable_new = len(tree.prunable_nodes()) + 1
        parent = leaf.parent
        if parent is not None and parent.left.is_leaf and parent.right.is_leaf:
            n_prunable_new -= 1
        log_trans = (
            np.log(cfg.p_prune)
            - np.log(cfg.p_grow)
            + np.log(len(tree.leaves))
            - np.log(n_prunable_new)
        )
        if np.log(self.rng.random()) < loglik + log_prior + log_trans:
            tree.grow(leaf, var, rule)
            return True
        return False

    def _propose_prune(self, tree, resid, n_leaf, s_leaf):
        cfg = self.config
        prunable = tree.prunable_nodes()
        if not prunable:
            return False
        node = prunable[int(self.rng.integers(len(prunable)))]
        slot_left = tree.leaves.index(node.left)
        slot_right = tree.leaves.index(node.right)
        n_merged = n_leaf[slot_left] + n_leaf[slot_right]
        s_merged = s_leaf[slot_left] + s_leaf[slot_right]
        loglik = (
            _leaf_loglik(n_merged, s_merged, self.v)
            - _leaf_loglik(n_leaf[slot_left], s_leaf[slot_left], self.v)
            - _leaf_loglik(n_leaf[slot_right], s_leaf[slot_right], self.v)
        )
        p_d = _split_prob(cfg.alpha, cfg.beta_depth, node.depth)
        p_d1 = _split_prob(cfg.alpha, cfg.beta_depth, node.depth + 1)
        log_prior = -(np.log(p_d) + 2.0 * np.log1p(-p_d1) - np.log1p(-p_d))
        n_leaves_new = len(tree.leaves) - 1
        log_trans = (
            np.log(cfg.p_grow)
            - np.log(cfg.p_prune)
            + np.log(len(prunable))
            - np.log(n_leaves_new)
        )
        if np.log(self.rng.random()) < loglik + log_prior + log_trans:
            tree.prune(node)
            return True
        return False

    def _propose_change(self, tree, resid):
        internal = tree.internal_nodes()
        if not internal:
            return False
        node = internal[int(self.rng.integers(len(internal)))]
        var = int(self.rng.integers(self.n_vars))
        rule = self._draw_rule(var)
        if rule is None:
            return False

        # rows currently under the chosen node
        under = []

        def collect(x):
            if x.is_leaf:
                under.append(tree.leaves.index(x))
            else:
                collect(x.left)
                collect(x.right)

        collect(node)
        table = np.zeros(len(tree.leaves), dtype=bool)
        table[under] = True
        rows = np.nonzero(table[tree.leaf_of])[0]

        old = np.bincount(tree.leaf_of[rows], weights=resid[rows], minlength=len(tree.leaves))
        old_n = np.bincount(tree.leaf_of[rows], minlength=len(tree.leaves))
        loglik_old = sum(
            _leaf_loglik(float(old_n[i]), float(old[i]), self.v) for i in under
        )

        new_counts = []
        new_sums = []
        ok = True

        def reroute(x, idx, at_root):
            nonlocal ok
            if not ok:
                return
            if x.is_leaf:
                if idx.size == 0:
                    ok = False
                    return
                new_counts.append(float(idx.size))
                new_sums.append(float(resid[idx].sum()))
                return
            use_rule = rule if at_root else x.rule
            use_var = var if at_root else x.var
            mask = _rule_mask(use_rule, self.design[idx, use_var])
            reroute(x.left, idx[mask], False)
            reroute(x.right, idx[~mask], False)

        reroute(node, rows, True)
        if not ok:
            return False
        loglik_new = sum(
            _leaf_loglik(n, s, self.v) for n, s in zip(new_counts, new_sums)
        )
        if np.log(self.rng.random()) < loglik_new - loglik_old:
            node.var = var
            node.rule = rule
            return True
        return False

    # -- counterfactual bookkeeping -----------------------------------------

    def _counterfactual_fit(self, w):
        total = np.zeros(self.n)
        column = np.full(self.n, float(w))
        for j, tree in enumerate(self.trees):
            if not tree.splits_treatment:
                total += self.g[j]
                continue
            cache = self.cf_cache[j]
            if w not in cache:
                design_w = self.design.copy()
                design_w[:, self.treatment_col] = column
                cache[w] = tree.assign(design_w)
            total += tree.mu_vector()[cache[w]]
        return total

    def run(self):
        cfg = self.config
        draws = np.empty((cfg.n_retained, self.n, self.z_levels))
        ensembles = []
        s = 0
        for it in range(cfg.n_iter):
            for j in range(cfg.n_trees):
                resid = self.latent - self.fit_total + self.g[j]
                self._update_tree(j, resid)
            # guard against float drift in the running total
            self.fit_total = np.sum(self.g, axis=0)
            self.latent = _sample_truncated_latent(self.rng, self.fit_total, self.y)
            if cfg.validate:
                assert ((self.latent > 0) == (self.y == 1)).all()
            if it >= cfg.burn_in:
                for w in range(1, self.z_levels + 1):
                    draws[s, :, w - 1] = ndtr(self._counterfactual_fit(w))
                ensembles.append(tuple(tree.snapshot() for tree in self.trees))
                s += 1
        np.clip(draws, _PROB_EPS, 1.0 - _PROB_EPS, out=draws)
        return draws, tuple(ensembles)


def fit_probit_bart(d: Dataset, config: BartConfig = BartConfig()) -> BartPosterior:
    """Run the backfitting chain and retain post-burn-in draws.

    Deterministic for a fixed ``config.seed``.  Raises on a degenerate
    (all-0 or all-1) outcome, which leaves the probit latent scale
    unidentified.
    """
    events = int(d.Y.sum())
    if events == 0 or events == d.n:
        raise ValueError("outcome is all 0s or all 1s; probit fit is degenerate")
    sampler = _Sampler(d, config)
    draws, ensembles = sampler.run()
    return BartPosterior(
        train_draws=draws,
        ensembles=ensembles,
        train_design=sampler.design,
        n_treatments=d.n_treatments,
        config=config,
        final_latent=sampler.latent,
        accept_rate=sampler.accepts / max(sampler.proposals, 1),
    )


def predict_counterfactuals(p: BartPosterior, d: Dataset, w: int) -> np.ndarray:
    """N x S probability draws with every unit toggled to treatment ``w``.

    Training-data calls return the draws cached during sampling; other
    datasets are pushed through every retained tree ensemble.
    """
    if not (1 <= w <= p.n_treatments):
        raise ValueError(f"treatment {w} outside 1..{p.n_treatments}")
    if d.n_covariates != p.n_covariates:
        raise ValueError("dataset covariate count does not match the fit")
    full_design = np.column_stack([d.X, d.W.astype(float)])
    if full_design.shape == p.train_design.shape and np.array_equal(
        full_design, p.train_design
    ):
        return p.train_draws[:, :, w - 1].T.copy()
    design = np.column_stack([d.X, np.full(d.n, float(w))])
    out = np.empty((d.n, p.n_retained))
    for s, ensemble in enumerate(p.ensembles):
        total = np.zeros(d.n)
        for snap in ensemble:
            total += evaluate_snapshot(snap, design)
        out[:, s] = ndtr(total)
    return out


def estimate_ate_bart(
    p: BartPosterior,
    k: int,
    l: int,
    estimand: str = RD,
    keep: np.ndarray | None = None,
    method: str = "bart",
) -> CausalEstimate:
    """Posterior-mean pairwise contrast with percentile interval.

    Each retained draw contributes one population contrast (difference or
    ratio of the unit-averaged counterfactual probabilities over the
    ``keep`` units); the point estimate is their posterior mean and the
    interval the 2.5/97.5 posterior percentiles.
    """
    if k == l:
        raise ValueError("pair must compare two distinct treatments")
    if keep is None:
        keep = np.arange(p.n_units)
    keep = np.asarray(keep, dtype=int)
    if keep.size == 0:
        raise ValueError("no units retained for estimation")
    mean_k = p.train_draws[:, keep, k - 1].mean(axis=1)
    mean_l = p.train_draws[:, keep, l - 1].mean(axis=1)
    if estimand == RR:
        if (mean_l == 0.0).any():
            raise ZeroDivisionError("risk ratio undefined in at least one draw")
        deltas = mean_k / mean_l
    elif estimand == RD:
        deltas = mean_k - mean_l
    else:
        raise ValueError(f"estimand must be RD or RR, got {estimand!r}")
    lower = nearest_rank(deltas, 0.025)
    upper = nearest_rank(deltas, 0.975)
    point = float(deltas.mean())
    # percentile endpoints of a finite sample always bracket its mean only
    # up to ties; nudge for the degenerate all-equal case
    lower = min(lower, point)
    upper = max(upper, point)
    return CausalEstimate(
        pair=(k, l),
        estimand=estimand,
        point=point,
        method=method,
        n_used=int(keep.size),
        interval=(lower, upper),
    )


def export_draws(p: BartPosterior, path) -> None:
    """Dump the retained probability draws for audit.

    Writes a compressed ``.npz`` with the draw array (S x N x Z), the
    per-unit posterior SDs and the chain settings needed to interpret it.
    """
    cfg = p.config
    np.savez_compressed(
        path,
        draws=p.train_draws,
        sd=p.sd,
        treatments=np.array(p.n_treatments),
        n_trees=np.array(cfg.n_trees),
        n_iter=np.array(cfg.n_iter),
        burn_in=np.array(cfg.burn_in),
        seed=np.array(cfg.seed),
    )


def discard_common_support(p: BartPosterior, d: Dataset) -> np.ndarray:
    """Indices of units inside the common-support region.

    A unit observed under treatment ``w`` is dropped when, for any other
    treatment ``w'``, the posterior SD of its counterfactual probability
    exceeds the largest factual posterior SD among the units observed
    under ``w`` (strict inequality).
    """
    if d.n != p.n_units:
        raise ValueError("dataset does not match the fitted posterior")
    z = p.n_treatments
    max_factual = np.empty(z)
    for w in range(1, z + 1):
        mask = d.W == w
        max_factual[w - 1] = p.sd[mask, w - 1].max()
    keep = np.ones(d.n, dtype=bool)
    for w in range(1, z + 1):
        mask = d.W == w
        others = [c for c in range(z) if c != w - 1]
        exceeded = (p.sd[np.ix_(mask, others)] > max_factual[w - 1]).any(axis=1)
        keep[np.nonzero(mask)[0][exceeded]] = False
    return np.nonzero(keep)[0]
