"""Conditional simulation of the joint max-stable field given forecast values.

Implements the hitting-scenario decomposition: the random partition of the
conditioning coordinates (which of them share a spectral function) is
sampled first, then one spectral function per partition block is drawn
conditionally on passing through the block's values and staying below the
remaining conditioning values, and finally an independent sub-extremal
remainder is added by running the exact max-stable sampler thinned at the
conditioning coordinates.

For small conditioning sets the partition law is computed by exact
enumeration; larger sets fall back to Gibbs sweeps over per-coordinate
block membership with a documented burn-in.  The bivariate field is
treated as a univariate one on the doubled (site, component) index set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
import numpy as np
from scipy import special

from .errors import SamplerError
from .maxstable import Model, _seedseq, anchored_mean_cov, pseudo_distance_matrix, psd_factor
from .normals import clipped_eigh, gaussian_logpdf, mvn_below
from .variogram import COMPONENT_INDEX, OBS, PRED, CrossVariogram

DEFAULT_EXACT_PARTITION_LIMIT = 6
DEFAULT_GIBBS_SWEEPS = 200
DEFAULT_REJECTION_BUDGET = 100_000


@dataclass(frozen=True)
class ConditioningSet:
    """Sites and observed values (Gumbel scale) of the forecast component."""

    sites: np.ndarray
    values: np.ndarray
    component: str = PRED

    def __post_init__(self):
        sites = np.asarray(self.sites, dtype=float).reshape(-1, 2)
        values = np.asarray(self.values, dtype=float).reshape(-1)
        object.__setattr__(self, "sites", sites)
        object.__setattr__(self, "values", values)
        if len(sites) != len(values):
            raise ValueError("sites and values must align")
        if len(sites) == 0:
            raise ValueError("conditioning set is empty")
        if not np.all(np.isfinite(values)):
            raise ValueError("conditioning values must be finite")
        d = sites[:, None, :] - sites[None, :, :]
        dist = np.sqrt(np.sum(d * d, axis=-1))
        np.fill_diagonal(dist, np.inf)
        if np.min(dist) <= 0:
            raise ValueError("conditioning sites must be pairwise distinct")
        if self.component not in COMPONENT_INDEX:
            raise ValueError(f"unknown component tag {self.component!r}")


def _set_partitions(items: list):
    """All partitions of a list into nonempty blocks."""
    if len(items) == 1:
        yield [items]
        return
    first, rest = items[0], items[1:]
    for smaller in _set_partitions(rest):
        for i, block in enumerate(smaller):
            yield smaller[:i] + [[first] + block] + smaller[i + 1 :]
        yield [[first]] + smaller


class ConditionalSampler:
    """Reusable conditional sampler for a fixed model and geometry.

    All covariance factorizations depend only on the geometry and the
    model, so one sampler instance can serve many conditioning-value
    vectors (e.g. one per period).
    """

    def __init__(
        self,
        model: Model,
        cond_sites,
        target_sites,
        cond_component: str = PRED,
        target_component: str = OBS,
        exact_partition_limit: int = DEFAULT_EXACT_PARTITION_LIMIT,
        gibbs_sweeps: int = DEFAULT_GIBBS_SWEEPS,
        rejection_budget: int = DEFAULT_REJECTION_BUDGET,
    ):
        cond_sites = np.asarray(cond_sites, dtype=float).reshape(-1, 2)
        target_sites = np.asarray(target_sites, dtype=float).reshape(-1, 2)
        if len(target_sites) == 0:
            raise ValueError("target list is empty")
        self.k = len(cond_sites)
        self.m = len(target_sites)
        self.exact_partition_limit = exact_partition_limit
        self.gibbs_sweeps = gibbs_sweeps
        self.rejection_budget = rejection_budget

        coords = np.vstack([cond_sites, target_sites])
        if isinstance(model, CrossVariogram):
            comps = np.concatenate(
                [
                    np.full(self.k, COMPONENT_INDEX[cond_component], dtype=int),
                    np.full(self.m, COMPONENT_INDEX[target_component], dtype=int),
                ]
            )
            self.dist = pseudo_distance_matrix(coords, model, comps)
        else:
            comps = np.zeros(self.k + self.m, dtype=int)
            self.dist = pseudo_distance_matrix(coords, model)

        # Targets that coincide with a conditioning coordinate reproduce the
        # conditioning value exactly.
        self._copy_pairs = []
        if cond_component == target_component or not isinstance(model, CrossVariogram):
            for j in range(self.m):
                d = np.sqrt(np.sum((cond_sites - target_sites[j]) ** 2, axis=1))
                hits = np.where(d < 1e-9)[0]
                if hits.size:
                    self._copy_pairs.append((j, int(hits[0])))

        # Remainder sampler: per-target anchored drift and covariance factor
        # over the full coordinate set.
        self._rem_means = []
        self._rem_factors = []
        for j in range(self.m):
            mean, cov = anchored_mean_cov(self.dist, self.k + j)
            self._rem_means.append(mean)
            self._rem_factors.append(psd_factor(cov))

        self._block_cache: dict[tuple, dict] = {}
        if self.k <= exact_partition_limit:
            self._partitions = [
                tuple(tuple(sorted(b)) for b in part)
                for part in _set_partitions(list(range(self.k)))
            ]
        else:
            self._partitions = None

    # -- block geometry -------------------------------------------------

    def _block(self, b: tuple) -> dict:
        """Geometry-only pieces for one candidate block of conditioning coords."""
        cached = self._block_cache.get(b)
        if cached is not None:
            return cached
        t = b[0]
        others = list(b[1:])
        rest = [c for c in range(self.k) if c not in b]
        u = rest + list(range(self.k, self.k + self.m))
        d_t = self.dist[:, t]
        sub = others + u
        cov = d_t[sub, None] + d_t[None, sub] - self.dist[np.ix_(sub, sub)]
        no = len(others)
        drift_o = -d_t[others]
        drift_u = -d_t[u]
        if no:
            s_oo = cov[:no, :no]
            s_uo = cov[no:, :no]
            w, v = clipped_eigh(s_oo)
            pos = w > 0
            pinv = (v[:, pos] / w[pos]) @ v[:, pos].T
            gain = s_uo @ pinv
            cond_cov = cov[no:, no:] - gain @ s_uo.T
        else:
            s_oo = np.zeros((0, 0))
            gain = np.zeros((len(u), 0))
            cond_cov = cov[no:, no:]
        cond_cov = 0.5 * (cond_cov + cond_cov.T)
        nr = len(rest)
        # Split the conditional law into the constrained rest-part and the
        # targets given the rest, so the "stay below" constraint can be
        # sampled directly rather than by whole-vector rejection.
        c_rr = cond_cov[:nr, :nr]
        c_tr = cond_cov[nr:, :nr]
        c_tt = cond_cov[nr:, nr:]
        if nr:
            w, v = clipped_eigh(c_rr)
            pos = w > 0
            pinv_rr = (v[:, pos] / w[pos]) @ v[:, pos].T
            gain_tr = c_tr @ pinv_rr
            cov_t_given_r = c_tt - gain_tr @ c_tr.T
        else:
            gain_tr = np.zeros((self.m, 0))
            cov_t_given_r = c_tt
        entry = {
            "t": t,
            "others": others,
            "rest": rest,
            "n_rest": nr,
            "drift_o": drift_o,
            "drift_u": drift_u,
            "s_oo": s_oo,
            "gain": gain,
            "cond_cov": cond_cov,
            "factor_rest": psd_factor(0.5 * (c_rr + c_rr.T)) if nr else None,
            "sd_rest": np.sqrt(np.clip(np.diag(c_rr), 0.0, None)) if nr else None,
            "c_rr": c_rr,
            "gain_tr": gain_tr,
            "factor_targets": psd_factor(0.5 * (cov_t_given_r + cov_t_given_r.T)),
        }
        self._block_cache[b] = entry
        return entry

    def _block_mean(self, entry: dict, z: np.ndarray) -> np.ndarray:
        base = z[entry["t"]] + entry["drift_u"]
        if entry["others"]:
            dv = z[entry["others"]] - (z[entry["t"]] + entry["drift_o"])
            base = base + entry["gain"] @ dv
        return base

    def _log_block_weight(self, b: tuple, z: np.ndarray) -> float:
        entry = self._block(b)
        logw = -z[entry["t"]]
        if entry["others"]:
            logw += gaussian_logpdf(
                z[entry["others"]], z[entry["t"]] + entry["drift_o"], entry["s_oo"]
            )
        nr = entry["n_rest"]
        if nr:
            mean = self._block_mean(entry, z)
            prob = mvn_below(z[entry["rest"]], mean[:nr], entry["cond_cov"][:nr, :nr])
            logw += math.log(prob) if prob > 0 else -np.inf
        return logw

    # -- partition sampling ----------------------------------------------

    def partition_table(self, z: np.ndarray):
        """Exact hitting-scenario distribution (partitions, probabilities)."""
        weights = {}
        logw = np.empty(len(self._partitions))
        for idx, part in enumerate(self._partitions):
            total = 0.0
            for b in part:
                if b not in weights:
                    weights[b] = self._log_block_weight(b, z)
                total += weights[b]
            logw[idx] = total
        top = np.max(logw)
        if not np.isfinite(top):
            raise SamplerError("all hitting scenarios have zero probability")
        probs = np.exp(logw - top)
        probs /= probs.sum()
        return self._partitions, probs

    def _gibbs_partitions(self, z: np.ndarray, n_out: int, rng) -> list[tuple]:
        """Partitions from Gibbs sweeps over per-coordinate block membership."""
        labels = list(range(self.k))  # start from all singletons
        weight_cache: dict[tuple, float] = {}

        def logw(b: tuple) -> float:
            if b not in weight_cache:
                weight_cache[b] = self._log_block_weight(b, z)
            return weight_cache[b]

        def as_partition(lab) -> tuple:
            groups: dict[int, list[int]] = {}
            for i, g in enumerate(lab):
                groups.setdefault(g, []).append(i)
            return tuple(tuple(sorted(v)) for v in groups.values())

        out = []
        for sweep in range(self.gibbs_sweeps + n_out):
            for i in range(self.k):
                groups: dict[int, list[int]] = {}
                for idx, g in enumerate(labels):
                    if idx != i:
                        groups.setdefault(g, []).append(idx)
                cand_labels = list(groups.keys())
                log_p = []
                for g in cand_labels:
                    block = tuple(sorted(groups[g] + [i]))
                    log_p.append(logw(block) - logw(tuple(sorted(groups[g]))))
                new_label = max(groups.keys(), default=-1) + 1
                cand_labels.append(new_label)
                log_p.append(logw((i,)))
                log_p = np.asarray(log_p)
                top = np.max(log_p)
                if not np.isfinite(top):
                    raise SamplerError("Gibbs sweep found no admissible block move")
                p = np.exp(log_p - top)
                p /= p.sum()
                labels[i] = cand_labels[int(rng.choice(len(p), p=p))]
            if sweep >= self.gibbs_sweeps:
                out.append(as_partition(labels))
        return out

    # -- conditional draws -----------------------------------------------

    def _draw_block_targets(self, b: tuple, z: np.ndarray, rng) -> np.ndarray:
        """Spectral function of one block, at the target coordinates.

        The function is constrained to stay strictly below the observed
        values at the conditioning coordinates outside the block.  A single
        constrained coordinate is sampled exactly by inverse-cdf truncation;
        several are sampled by rejection with a truncated-Gibbs fallback for
        very unlikely configurations.
        """
        entry = self._block(b)
        mean = self._block_mean(entry, z)
        nr = entry["n_rest"]
        if nr == 0:
            ft = entry["factor_targets"]
            return mean + ft @ rng.standard_normal(ft.shape[1])
        z_rest = z[entry["rest"]]
        mean_rest, mean_targets = mean[:nr], mean[nr:]
        rest = self._draw_truncated(mean_rest, z_rest, entry, rng)
        ft = entry["factor_targets"]
        return (
            mean_targets
            + entry["gain_tr"] @ (rest - mean_rest)
            + ft @ rng.standard_normal(ft.shape[1])
        )

    @staticmethod
    def _truncnorm_below(mean: float, sd: float, bound: float, u: float) -> float:
        """Inverse-cdf draw of N(mean, sd^2) conditioned strictly below bound."""
        if sd <= 0:
            return min(mean, bound)
        p = special.ndtr((bound - mean) / sd)
        if p <= 1e-300:
            return bound - 1e-8 * sd  # constraint essentially binding
        return mean + sd * special.ndtri(min(u * p, 1.0 - 1e-16))

    def _draw_truncated(self, mean_rest, z_rest, entry, rng) -> np.ndarray:
        nr = mean_rest.size
        if nr == 1:
            return np.array(
                [
                    self._truncnorm_below(
                        float(mean_rest[0]),
                        float(entry["sd_rest"][0]),
                        float(z_rest[0]),
                        float(rng.uniform()),
                    )
                ]
            )
        fr = entry["factor_rest"]
        for _ in range(min(self.rejection_budget, 2000)):
            val = mean_rest + fr @ rng.standard_normal(fr.shape[1])
            if np.all(val < z_rest):
                return val
        # Rejection is hopeless here; Gibbs over coordinatewise truncated
        # normals on the constrained Gaussian.
        c_rr = entry["c_rr"]
        val = np.minimum(mean_rest, z_rest - 0.5 * entry["sd_rest"])
        for _ in range(40):
            for i in range(nr):
                idx = [j for j in range(nr) if j != i]
                c_ii = c_rr[i, i]
                c_io = c_rr[i, idx]
                sub = c_rr[np.ix_(idx, idx)]
                w, v = clipped_eigh(sub)
                pos = w > 0
                pinv = (v[:, pos] / w[pos]) @ v[:, pos].T
                gain = c_io @ pinv
                mu = mean_rest[i] + gain @ (val[idx] - mean_rest[idx])
                var = max(c_ii - gain @ c_io, 0.0)
                val[i] = self._truncnorm_below(
                    float(mu), math.sqrt(var), float(z_rest[i]), float(rng.uniform())
                )
        return val

    def _draw_remainder(self, z: np.ndarray, rng) -> np.ndarray:
        """Sub-extremal part: exact max-stable sampler thinned at the
        conditioning coordinates."""
        k, m = self.k, self.m
        zr = np.full(m, -np.inf)
        budget = self.rejection_budget
        for j in range(m):
            acc = rng.standard_exponential()
            zp = -math.log(acc)
            while zp > zr[j]:
                budget -= 1
                if budget <= 0:
                    raise SamplerError("remainder sampler budget exhausted")
                phi = zp + self._rem_means[j] + self._rem_factors[j] @ rng.standard_normal(k + m)
                if np.all(phi[:k] < z) and (j == 0 or np.all(phi[k : k + j] < zr[:j])):
                    np.maximum(zr, phi[k:], out=zr)
                acc += rng.standard_exponential()
                zp = -math.log(acc)
        return zr

    def sample(self, values, n_draws: int, seed) -> np.ndarray:
        """``n_draws`` independent conditional fields at the targets.

        Returns an array of shape (n_draws, n_targets) on the Gumbel scale.
        With exact partition enumeration the draws are iid; in Gibbs mode
        successive chain states supply the partitions.
        """
        z = np.asarray(values, dtype=float).reshape(-1)
        if z.size != self.k:
            raise ValueError("conditioning values do not match the conditioning sites")
        if n_draws < 1:
            raise ValueError("need at least one draw")
        children = _seedseq(seed).spawn(n_draws + 1)
        if self._partitions is not None:
            parts, probs = self.partition_table(z)
            cum = np.cumsum(probs)
            chain = None
        else:
            chain_rng = np.random.Generator(np.random.PCG64(children[0]))
            chain = self._gibbs_partitions(z, n_draws, chain_rng)

        out = np.empty((n_draws, self.m))
        for d in range(n_draws):
            rng = np.random.Generator(np.random.PCG64(children[d + 1]))
            if chain is None:
                idx = int(np.searchsorted(cum, rng.uniform()))
                part = parts[min(idx, len(parts) - 1)]
            else:
                part = chain[d]
            field = self._draw_remainder(z, rng)
            for b in part:
                np.maximum(field, self._draw_block_targets(b, z, rng), out=field)
            out[d] = field
        for j, i in self._copy_pairs:
            out[:, j] = z[i]
        return out


def conditional_simulate(
    model: Model,
    cond: ConditioningSet,
    targets,
    n_draws: int,
    seed,
    target_component: str = OBS,
    exact_partition_limit: int = DEFAULT_EXACT_PARTITION_LIMIT,
    gibbs_sweeps: int = DEFAULT_GIBBS_SWEEPS,
    rejection_budget: int = DEFAULT_REJECTION_BUDGET,
) -> np.ndarray:
    """Draws of the target component given the conditioning component.

    Returns an array of shape (n_draws, n_targets) of Gumbel-scale values
    of ``target_component`` at the target sites, conditional on the field's
    ``cond.component`` equalling ``cond.values`` at ``cond.sites``.
    """
    sampler = ConditionalSampler(
        model,
        cond.sites,
        targets,
        cond_component=cond.component,
        target_component=target_component,
        exact_partition_limit=exact_partition_limit,
        gibbs_sweeps=gibbs_sweeps,
        rejection_budget=rejection_budget,
    )
    return sampler.sample(cond.values, n_draws, seed)
