"""Training objectives on complex spectrograms carried as (real, imag) tensor pairs.

Every function accepts either tensor pairs or plain complex arrays /
Spectrograms (treated as constants) and returns a scalar ``Tensor``; call
``.item()`` for the float.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .signal import Spectrogram

MAG_FLOOR = 1e-8


class LossError(ValueError):
    pass


def to_pair(x):
    """Complex array / Spectrogram / pair -> (re, im) tensor pair."""
    if isinstance(x, tuple):
        return x
    bins = x.bins if isinstance(x, Spectrogram) else np.asarray(x, dtype=np.complex128)
    return ag.Tensor(bins.real), ag.Tensor(bins.imag)


def _complex(x) -> np.ndarray:
    if isinstance(x, tuple):
        return x[0].data + 1j * x[1].data
    return x.bins if isinstance(x, Spectrogram) else np.asarray(x, dtype=np.complex128)


def mixture_norm(norm_mix) -> float:
    """L1 norm of the mixture's real part, imaginary part and magnitude."""
    X = _complex(norm_mix)
    return float(np.abs(X.real).sum() + np.abs(X.imag).sum() + np.abs(X).sum())


def signal_loss(ref, est, norm_mix) -> ag.Tensor:
    """L1 over RI and magnitude of ``ref - est``, normalised by the mixture's L1 norm."""
    rr, ri = to_pair(ref)
    er, ei = to_pair(est)
    if rr.shape != er.shape:
        raise LossError(f"shape mismatch: {rr.shape} vs {er.shape}")
    den = mixture_norm(norm_mix)
    if den <= 0:
        raise LossError("zero-norm mixture")
    num = ag.l1_distance(rr, er) + ag.l1_distance(ri, ei) + ag.l1_distance(ag.cabs(rr, ri), ag.cabs(er, ei))
    return num * (1.0 / den)


def _sum_pairs(pairs):
    re, im = pairs[0]
    for r, i in pairs[1:]:
        re, im = re + r, im + i
    return re, im


def ras_loss(mix_target, mapped, norm_mix) -> ag.Tensor:
    """Reconstruction loss of the target-channel mixture from the sum of mapped sources."""
    pairs = [to_pair(m) for m in mapped]
    return signal_loss(mix_target, _sum_pairs(pairs), norm_mix)


def frame_logmag_var(x, floor: float = MAG_FLOOR) -> ag.Tensor:
    """Per-frame variance over frequency of the floored log-magnitude. [T]"""
    re, im = to_pair(x)
    return ag.var(ag.log(ag.cabs(re, im, floor)), axis=1)


def isms_loss(mapped, mix_at_m, mag_floor: float = MAG_FLOOR) -> ag.Tensor:
    """Mean-over-sources log-magnitude scatter of ``mapped`` relative to the mixture's."""
    if len(mapped) < 1:
        raise LossError("need at least one source")
    X = _complex(mix_at_m)
    den = float(np.var(np.log(np.maximum(np.abs(X), mag_floor)), axis=1).sum())
    if den <= 0:
        raise LossError("degenerate ISMS denominator")
    num = ag.tsum(frame_logmag_var(mapped[0], mag_floor))
    for m in mapped[1:]:
        num = num + ag.tsum(frame_logmag_var(m, mag_floor))
    return num * (1.0 / (len(mapped) * den))


def icc_loss(self_mapped, cross_mapped, norm_mix):
    """Consistency between self-channel and cross-channel mappings, best of both orderings.

    ``self_mapped`` is always treated as a constant pseudo-target.
    Returns ``(loss, permutation)`` where ``cross[permutation[n]]`` pairs with ``self[n]``.
    """
    if len(self_mapped) != 2 or len(cross_mapped) != 2:
        raise LossError("ICC permutation search is implemented for N = 2")
    targets = [tuple(t.detach() for t in to_pair(s)) for s in self_mapped]
    cross = [to_pair(c) for c in cross_mapped]
    best = None
    for perm in ((0, 1), (1, 0)):
        terms = [signal_loss(targets[n], cross[perm[n]], norm_mix) for n in range(2)]
        value = (terms[0] + terms[1]) * 0.5
        if best is None or value.item() < best[0].item():
            best = (value, perm)
    return best


# --------------------------------------------------------------------------
# combined objective


@dataclass(frozen=True)
class LossWeights:
    """Loss weights. ``alpha_ref`` weights the same-channel RAS term (0 disables it);
    cross-channel RAS terms always have weight 1."""

    beta: float = 0.3
    gamma: float = 0.0
    alpha_ref: float = 0.0

    def __post_init__(self):
        if self.beta < 0 or self.gamma < 0 or self.alpha_ref < 0:
            raise LossError("loss weights must be non-negative")
        if self.alpha_ref >= 1:
            raise LossError("alpha_ref must be < 1 (the same-channel term has a trivial solution)")

    def alpha(self, ref: int, n_mics: int) -> np.ndarray:
        """Per-microphone weights for reference channel ``ref``."""
        a = np.ones(n_mics)
        a[ref] = self.alpha_ref
        return a


@dataclass
class DirectedTerm:
    """All signals needed for one direction ``ref -> target``."""

    ref: int
    target: int
    mix_target: object  # complex [T, F] at the target channel (also the normaliser)
    mapped: list  # N pairs, ref -> target (differentiable)
    self_mapped: list | None = None  # N pairs, target -> target (stop-gradient), for ICC
    mix_ref: object = None  # complex [T, F] at the reference channel, for the same-channel term
    same_mapped: list | None = None  # N pairs, ref -> ref (differentiable), for alpha_ref

    @property
    def name(self) -> str:
        return f"{self.ref}->{self.target}"


@dataclass
class LossReport:
    total: float
    components: dict
    permutations: dict = field(default_factory=dict)
    weights: LossWeights = field(default_factory=LossWeights)
    tensor: ag.Tensor | None = field(default=None, repr=False)
    fcp_calls: int = 0

    def weighted_sum(self) -> float:
        """Recompute the total from the logged components."""
        w = self.weights
        total = 0.0
        for key, v in self.components.items():
            kind = key.split("[")[0]
            total += {"ras": 1.0, "isms": w.beta, "icc": w.gamma, "ras_same": w.alpha_ref}[kind] * v
        return total

    def directions(self) -> list:
        return sorted({k.split("[")[1].rstrip("]") for k in self.components if k.startswith("ras[")})

    def csv_rows(self, step: int) -> list:
        rows = []
        for d in self.directions():
            c = self.components
            rows.append({
                "step": step,
                "direction": d,
                "ras": c.get(f"ras[{d}]", 0.0),
                "isms": c.get(f"isms[{d}]", 0.0),
                "icc": c.get(f"icc[{d}]", 0.0),
                "total": self.total,
            })
        return rows


CSV_FIELDS = ("step", "direction", "ras", "isms", "icc", "total")


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for step, rep in reports:
        writer.writerows(rep.csv_rows(step))
    return buf.getvalue()


def eras_loss(terms, weights: LossWeights = LossWeights()) -> LossReport:
    """Sum over directions of RAS + beta ISMS + gamma ICC (+ alpha_ref same-channel RAS).

    Components whose weight is zero are not computed.
    """
    total = None
    comps, perms = {}, {}

    def acc(key, value, weight):
        nonlocal total
        comps[key] = value.item()
        term = value if weight == 1.0 else value * weight
        total = term if total is None else total + term

    for term in terms:
        d = term.name
        acc(f"ras[{d}]", ras_loss(term.mix_target, term.mapped, term.mix_target), 1.0)
        if weights.beta > 0:
            acc(f"isms[{d}]", isms_loss(term.mapped, term.mix_target), weights.beta)
        if weights.gamma > 0:
            if term.self_mapped is None:
                raise LossError(f"direction {d}: gamma > 0 needs self-mapped signals")
            value, perm = icc_loss(term.self_mapped, term.mapped, term.mix_target)
            perms[d] = perm
            acc(f"icc[{d}]", value, weights.gamma)
        if weights.alpha_ref > 0:
            if term.same_mapped is None or term.mix_ref is None:
                raise LossError(f"direction {d}: alpha_ref > 0 needs same-channel mappings")
            acc(f"ras_same[{d}]", ras_loss(term.mix_ref, term.same_mapped, term.mix_ref), weights.alpha_ref)
    if total is None:
        raise LossError("no directed terms")
    return LossReport(total.item(), comps, perms, weights, total)
