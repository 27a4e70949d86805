"""Sectioned key-value config files describing plant, filter and simulation.

Format::

    # comments start with '#'
    [dims]
    n = 2
    p = 1
    ...
    [matrices]
    E = 2, 3; 4, 6          # rows separated by ';', entries by ','
    ...
    [nonlinearity]
    phi = 0.5*sin(x2); 0.5*sin(x1)
    gamma1 = 0.5
    [filter]
    preset = dynamic
    [simulation]
    w = 30*exp(-t/3)*cos(7*t)
    x0_guess = -14.7020, 3.0014
    xF0_guess = match
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .expressions import estimate_lipschitz, parse, zero_expr
from .simulate import SimConfig, parse_time_signal
from .synthesis import SynthesisOptions
from .system import DescriptorPlant, FilterStructure

REQUIRED_SECTIONS = ("dims", "matrices")


def _parse_sections(text: str, path="<config>"):
    sections: dict[str, dict] = {}
    lines_of: dict[str, dict] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip().lower()
            sections.setdefault(current, {})
            lines_of.setdefault(current, {})
            continue
        if current is None:
            raise ConfigError("key outside of any [section]", path, lineno)
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got '{line}'", path, lineno)
        key, value = line.split("=", 1)
        key = key.strip().lower()
        if key in sections[current]:
            raise ConfigError(f"duplicate key '{key}'", path, lineno)
        sections[current][key] = value.strip()
        lines_of[current][key] = lineno
    return sections, lines_of


def _matrix(text: str, path, lineno, rows=None, cols=None) -> np.ndarray:
    try:
        data = [
            [float(entry) for entry in row.split(",") if entry.strip() != ""]
            for row in text.split(";")
            if row.strip() != ""
        ]
        M = np.array(data, dtype=float)
    except ValueError as exc:
        raise ConfigError(f"malformed matrix literal: {exc}", path, lineno)
    if M.ndim != 2 or (len({len(r) for r in data}) > 1):
        raise ConfigError("matrix rows have unequal lengths", path, lineno)
    if rows is not None and cols is not None and M.shape != (rows, cols):
        raise ConfigError(f"expected a {rows}x{cols} matrix, got {M.shape[0]}x{M.shape[1]}", path, lineno)
    return M


def _vector(text: str, path, lineno, length=None) -> np.ndarray:
    try:
        v = np.array([float(e) for e in text.split(",") if e.strip() != ""])
    except ValueError as exc:
        raise ConfigError(f"malformed vector literal: {exc}", path, lineno)
    if length is not None and v.size != length:
        raise ConfigError(f"expected {length} entries, got {v.size}", path, lineno)
    return v


@dataclass
class LoadedConfig:
    plant: DescriptorPlant
    structure: FilterStructure
    synthesis: SynthesisOptions
    sim: SimConfig
    x0_guess: np.ndarray
    x0_hold: tuple
    xF0_guess: np.ndarray | None  # None means output-matching initialization
    lipschitz_box: tuple
    path: str
    gamma_estimated: bool = False


def load_config(path) -> LoadedConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(str(exc), path)
    sections, lines_of = _parse_sections(text, path)
    for name in REQUIRED_SECTIONS:
        if name not in sections:
            raise ConfigError(f"missing required section [{name}]", path)

    dims = sections["dims"]

    def dim(key, default=None):
        if key not in dims:
            if default is None:
                raise ConfigError(f"[dims] is missing '{key}'", path)
            return default
        try:
            return int(dims[key])
        except ValueError:
            raise ConfigError(f"[dims] {key} must be an integer", path, lines_of["dims"][key])

    n = dim("n")
    m = dim("m", 0)
    p = dim("p")
    qw = dim("qw")
    q = dim("q", n)

    mats = sections["matrices"]
    got = {}
    for key in ("e", "a", "b", "c", "d", "m1", "m2", "n", "h"):
        if key in mats:
            got[key] = _matrix(mats[key], path, lines_of["matrices"][key])
    for key in ("e", "a", "b", "c"):
        if key not in got:
            raise ConfigError(f"[matrices] is missing '{key.upper()}'", path)

    nl = sections.get("nonlinearity", {})
    nl_lines = lines_of.get("nonlinearity", {})

    def expr_of(key, dim_needed):
        if key not in nl:
            return zero_expr(dim_needed, n, m)
        try:
            e = parse(nl[key], n=n, m=m)
        except Exception as exc:
            raise ConfigError(f"bad expression for {key}: {exc}", path, nl_lines[key])
        if e.dim != dim_needed:
            raise ConfigError(
                f"{key} must have {dim_needed} components, got {e.dim}", path, nl_lines[key]
            )
        return e

    phi = expr_of("phi", n)
    psi = expr_of("psi", p)

    box_txt = nl.get("lipschitz_box", "-10, 10")
    lo_hi = _vector(box_txt, path, nl_lines.get("lipschitz_box", 0), 2)
    box = tuple((float(lo_hi[0]), float(lo_hi[1])) for _ in range(n))
    grid = int(nl.get("lipschitz_grid", "41"))

    gamma_estimated = False

    def gamma_of(key, ast):
        nonlocal gamma_estimated
        if key in nl:
            return float(nl[key])
        if ast is None or all(c == ("const", 0.0) for c in ast.components):
            return 0.0
        gamma_estimated = True
        # grid sampling yields a lower bound; inflate before trusting it
        return 1.01 * estimate_lipschitz(ast, box, grid).gamma_hat

    gamma1 = gamma_of("gamma1", phi)
    gamma2 = gamma_of("gamma2", psi)

    try:
        plant = DescriptorPlant.build(
            E=got["e"],
            A=got["a"],
            B=got["b"],
            C=got["c"],
            D=got.get("d"),
            M1=got.get("m1"),
            M2=got.get("m2"),
            N=got.get("n"),
            H=got.get("h"),
            phi=phi,
            psi=psi,
            gamma1=gamma1,
            gamma2=gamma2,
            m=m,
        )
    except Exception as exc:
        raise ConfigError(f"inconsistent plant data: {exc}", path)
    if plant.n != n or plant.p != p or plant.qw != qw or plant.q != q:
        raise ConfigError(
            f"[dims] disagree with matrix shapes: n={plant.n} p={plant.p} qw={plant.qw} q={plant.q}",
            path,
        )

    filt = sections.get("filter", {})
    filt_lines = lines_of.get("filter", {})
    preset = filt.get("preset", "dynamic")
    e3_decision = filt.get("e3_mode", "fixed").lower() == "decision"
    if preset == "dynamic":
        structure = FilterStructure.dynamic(n, p, q)
        if e3_decision:
            structure = FilterStructure(
                preset="dynamic", e1=np.eye(n), e2=np.zeros((n, p)), e3=None, e3_decision=True
            )
    elif preset == "static-gain":
        structure = FilterStructure.static_gain(n, p)
    elif preset == "custom":
        e1 = _matrix(filt["e1"], path, filt_lines.get("e1", 0), n, n) if "e1" in filt else np.eye(n)
        e2 = _matrix(filt["e2"], path, filt_lines.get("e2", 0), n, p) if "e2" in filt else np.zeros((n, p))
        e3 = _matrix(filt["e3"], path, filt_lines.get("e3", 0), q, p) if "e3" in filt else np.zeros((q, p))
        structure = FilterStructure.custom(e1, e2, None if e3_decision else e3, e3_decision)
    else:
        raise ConfigError(f"unknown preset '{preset}'", path, filt_lines.get("preset", 0))

    synth = SynthesisOptions(
        mode=filt.get("mode", "strict"),
        peak_mode=filt.get("peak_mode", "auto"),
        dissipation_form=filt.get("dissipation_form", "full"),
        coupling=filt.get("coupling", "direct"),
        tracking_slack=float(filt.get("tracking_slack", "2.0")),
        lam=float(filt.get("lambda", "0")),
    )

    sim_sec = sections.get("simulation", {})
    sim_lines = lines_of.get("simulation", {})

    def sig_of(key, dim_needed):
        if key not in sim_sec:
            return None
        try:
            return parse_time_signal(sim_sec[key], dim_needed)
        except Exception as exc:
            raise ConfigError(f"bad signal for {key}: {exc}", path, sim_lines[key])

    sim = SimConfig(
        t_end=float(sim_sec.get("t_end", "30")),
        dt=float(sim_sec.get("dt", "1e-3")),
        newton_tol=float(sim_sec.get("newton_tol", "1e-10")),
        newton_maxit=int(sim_sec.get("newton_maxit", "50")),
        w=sig_of("w", qw),
        u=sig_of("u", m),
        F=sig_of("f", plant.k * plant.l),
    )

    x0_guess = (
        _vector(sim_sec["x0_guess"], path, sim_lines.get("x0_guess", 0), n)
        if "x0_guess" in sim_sec
        else np.zeros(n)
    )
    hold_txt = sim_sec.get("x0_hold", "")
    x0_hold = tuple(
        int(v) - 1 for v in hold_txt.split(",") if v.strip() != ""
    )  # config uses 1-based state indices
    if any(i < 0 or i >= n for i in x0_hold):
        raise ConfigError("x0_hold indices out of range", path, sim_lines.get("x0_hold", 0))

    xf_txt = sim_sec.get("xf0_guess", "match")
    xF0_guess = (
        None
        if xf_txt.strip().lower() == "match"
        else _vector(xf_txt, path, sim_lines.get("xf0_guess", 0), n)
    )

    return LoadedConfig(
        plant=plant,
        structure=structure,
        synthesis=synth,
        sim=sim,
        x0_guess=x0_guess,
        x0_hold=x0_hold,
        xF0_guess=xF0_guess,
        lipschitz_box=box,
        path=str(path),
        gamma_estimated=gamma_estimated,
    )
