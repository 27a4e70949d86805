"""Plain-text serialization of synthesized filters and their certificates.

The format mirrors the config grammar (sections, 'key = value', matrices as
';'-separated rows) with floats printed at 17 significant digits, which
round-trips doubles exactly: re-reading a file and re-evaluating the
constraint margins reproduces them bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import _matrix, _parse_sections
from .errors import ConfigError
from .matrices import orthogonal_complement
from .lmi import apply_strict_substitution, build_synthesis_lmis, evaluate_at
from .synthesis import SynthesisCertificate
from .system import DescriptorPlant, FilterRealization, FilterStructure


def _fmt_matrix(M: np.ndarray) -> str:
    M = np.atleast_2d(M)
    return "; ".join(", ".join(f"{v:.17g}" for v in row) for row in M)


def _fmt_opt(v) -> str:
    return "none" if v is None else f"{v:.17g}"


def write_filter(path, realization: FilterRealization, cert: SynthesisCertificate, solution_values: dict):
    lines = ["# synthesized energy-to-peak filter", "[filter]"]
    lines.append(f"af = {_fmt_matrix(realization.AF)}")
    lines.append(f"bf = {_fmt_matrix(realization.BF)}")
    lines.append(f"cf = {_fmt_matrix(realization.CF)}")
    lines.append(f"e3 = {_fmt_matrix(realization.E3)}")
    lines.append(f"mu_star = {realization.mu_star:.17g}")
    lines.append("")
    lines.append("[certificate]")
    lines.append(f"mode = {cert.mode}")
    lines.append(f"peak_mode = {cert.peak_mode}")
    lines.append(f"coupling = {cert.coupling}")
    lines.append(f"dissipation_form = {cert.dissipation_form}")
    lines.append(f"estimator_pin = {'true' if cert.estimator_pin else 'false'}")
    lines.append(f"tracking_cap = {_fmt_opt(cert.tracking_cap)}")
    lines.append(f"lambda = {cert.lam:.17g}")
    lines.append(f"zeta = {cert.zeta:.17g}")
    lines.append(f"zeta_floor = {_fmt_opt(cert.zeta_floor)}")
    lines.append(f"epsilon = {_fmt_opt(cert.epsilon)}")
    lines.append(f"alpha = {_fmt_opt(cert.alpha)}")
    lines.append("")
    lines.append("[solution]")
    for name in sorted(solution_values):
        lines.append(f"{name} = {_fmt_matrix(np.atleast_2d(solution_values[name]))}")
    lines.append("")
    lines.append("[margins]")
    for entry in cert.margins.entries:
        lines.append(f"{entry.name} = {entry.extreme:.17g}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


@dataclass
class StoredFilter:
    realization: FilterRealization
    mode: str
    peak_mode: str
    coupling: str
    dissipation_form: str
    estimator_pin: bool
    tracking_cap: float | None
    lam: float
    zeta: float
    zeta_floor: float | None
    epsilon: float | None
    alpha: float | None
    solution: dict
    stored_margins: dict

    @property
    def mu_star(self) -> float:
        return float(np.sqrt(max(self.zeta, 0.0)))


def read_filter(path) -> StoredFilter:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(str(exc), path)
    sections, lines_of = _parse_sections(text, path)
    for sec in ("filter", "certificate", "solution"):
        if sec not in sections:
            raise ConfigError(f"filter file is missing [{sec}]", path)
    f = sections["filter"]
    c = sections["certificate"]

    def opt_float(key):
        v = c.get(key, "none")
        return None if v == "none" else float(v)

    realization = FilterRealization(
        AF=_matrix(f["af"], path, 0),
        BF=_matrix(f["bf"], path, 0),
        CF=_matrix(f["cf"], path, 0),
        E3=_matrix(f["e3"], path, 0),
        mu_star=float(f["mu_star"]),
    )
    solution = {
        name: _matrix(text_val, path, 0) for name, text_val in sections["solution"].items()
    }
    stored_margins = {
        name: float(v) for name, v in sections.get("margins", {}).items()
    }
    return StoredFilter(
        realization=realization,
        mode=c.get("mode", "strict"),
        peak_mode=c.get("peak_mode", "off"),
        coupling=c.get("coupling", "direct"),
        dissipation_form=c.get("dissipation_form", "full"),
        estimator_pin=c.get("estimator_pin", "false") == "true",
        tracking_cap=opt_float("tracking_cap"),
        lam=float(c.get("lambda", "0")),
        zeta=float(c["zeta"]),
        zeta_floor=opt_float("zeta_floor"),
        epsilon=opt_float("epsilon"),
        alpha=opt_float("alpha"),
        solution=solution,
        stored_margins=stored_margins,
    )


def rebuild_problem(plant: DescriptorPlant, structure: FilterStructure, stored: StoredFilter):
    """Reconstruct the exact constraint system a stored certificate refers to."""
    problem = build_synthesis_lmis(
        plant,
        structure,
        peak_mode=stored.peak_mode,
        dissipation_form=stored.dissipation_form,
        lam=stored.lam,
        coupling=stored.coupling,
        estimator_pin=stored.estimator_pin,
        tracking_cap=stored.tracking_cap,
    )
    if stored.mode == "strict":
        problem = apply_strict_substitution(problem, plant.E, orthogonal_complement(plant.E))
    return problem


def recertify(plant: DescriptorPlant, structure: FilterStructure, stored: StoredFilter):
    """Re-evaluate all margins at the stored solution; returns (margins, drift).

    ``drift`` is the largest |recomputed - stored| over the margin extremes
    (zero up to roundoff when the file is untampered).
    """
    problem = rebuild_problem(plant, structure, stored)
    x = problem.pool.pack(stored.solution)
    margins = evaluate_at(problem, x)
    drift = 0.0
    for entry in margins.entries:
        if entry.name in stored.stored_margins:
            drift = max(drift, abs(entry.extreme - stored.stored_margins[entry.name]))
    return margins, drift
