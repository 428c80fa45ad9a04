"""Experiment orchestration: the bench grid, report joins and lossless checks."""
from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import json
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .config import CorpusConfig, env_seed, from_section, read_ini, to_section
from .data import SyntheticCorpus, ingest_corpus
from .engine import DecodeMode, SpeculativeDecoder
from .errors import ConfigError, FormatError
from .lossless import LosslessReport, verify_exhaustive, verify_monte_carlo
from .target import TargetConfig
from .training import Models, build_models, models_from_checkpoint

BENCH_MODES = ("baseline", "confu", "confu-no-moe", "confu-no-moe-no-repl")
ABLATION = ("confu", "confu-no-moe", "confu-no-moe-no-repl")
CSV_FIELDS = (
    "mode",
    "temperature",
    "nodes",
    "tau",
    "tokens",
    "rounds",
    "tokens_per_round",
    "draft_rows",
    "contemplate_rows",
    "prefill_rows",
    "sr_proxy",
)
HELD_OUT_OFFSET = 1_000_000  # synthetic prompts come from sequence ids disjoint from training


@dataclass(frozen=True)
class ExperimentSpec:
    modes: tuple[str, ...] = ("baseline", "confu")
    temperatures: tuple[float, ...] = (0.0,)
    budgets: tuple[int, ...] = (30,)
    seeds: tuple[int, ...] = (0,)
    prompts: int = 16
    prompt_len: int = 16
    max_tokens: int = 48
    branch: int = 4
    max_depth: int = 0  # 0 leaves depth bounded only by the node budget
    rule: str = "lossless"
    output: str = "bench"
    corpus: CorpusConfig = CorpusConfig()
    checkpoints: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "checkpoints", tuple(sorted(tuple(p) for p in self.checkpoints)))
        if not self.modes:
            raise ConfigError("experiment needs at least one mode")
        bad = [m for m in self.modes if m not in BENCH_MODES]
        if bad:
            raise ConfigError(f"unknown modes {bad}; expected a subset of {BENCH_MODES}")
        if not self.budgets or min(self.budgets) < 1:
            raise ConfigError("node budgets must be >= 1")
        if not self.temperatures or min(self.temperatures) < 0:
            raise ConfigError("temperatures must be >= 0")
        if self.max_depth < 0:
            raise ConfigError("max_depth must be >= 0 (0 means nodes - 1)")
        if not self.seeds or self.prompts < 1 or self.max_tokens < 1 or self.prompt_len < 1:
            raise ConfigError("need seeds, prompts >= 1, prompt_len >= 1 and max_tokens >= 1")

    def checkpoint_for(self, mode: str) -> str:
        table = dict(self.checkpoints)
        if mode not in table:
            raise ConfigError(f"no checkpoint configured for mode {mode!r}")
        return table[mode]

    def with_seeds(self, seeds: Sequence[int]) -> "ExperimentSpec":
        return dataclasses.replace(self, seeds=tuple(seeds))


_SCALAR_FIELDS = [
    f.name for f in dataclasses.fields(ExperimentSpec) if f.name not in ("corpus", "checkpoints")
]


def render_spec(spec: ExperimentSpec) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    full = to_section(spec)
    parser["experiment"] = {k: full[k] for k in _SCALAR_FIELDS}
    parser["corpus"] = to_section(spec.corpus)
    parser["checkpoints"] = dict(spec.checkpoints)
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def parse_spec(text: str) -> ExperimentSpec:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed experiment config: {exc}") from None
    return _spec_from_parser(parser)


def _spec_from_parser(parser: configparser.ConfigParser) -> ExperimentSpec:
    if not parser.has_section("experiment"):
        raise ConfigError("experiment config needs an [experiment] section")
    base = from_section(_scalar_view(), dict(parser["experiment"]))
    kwargs = dataclasses.asdict(base)
    if parser.has_section("corpus"):
        kwargs["corpus"] = from_section(CorpusConfig, dict(parser["corpus"]))
    if parser.has_section("checkpoints"):
        kwargs["checkpoints"] = tuple(sorted(parser["checkpoints"].items()))
    return ExperimentSpec(**kwargs)


def _scalar_view():
    """A dataclass with only the scalar experiment fields (for section parsing)."""
    fields = [
        (f.name, f.type, field(default=f.default))
        for f in dataclasses.fields(ExperimentSpec)
        if f.name in _SCALAR_FIELDS
    ]
    cls = dataclasses.make_dataclass("experiment", fields, frozen=True)
    cls.__module__ = __name__
    return cls


def load_spec(path: str | os.PathLike) -> ExperimentSpec:
    """Parse an experiment file and apply the CONFU_SEED override."""
    spec = _spec_from_parser(read_ini(path))
    seed = env_seed(-1)
    return spec.with_seeds((seed,)) if seed >= 0 else spec


# ---------------------------------------------------------------------------
# reports


@dataclass
class BenchReport:
    rows: list[dict] = field(default_factory=list)
    spec: ExperimentSpec | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: _fmt(row[k]) for k in CSV_FIELDS})
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "schema": "confu-bench/1",
            "spec": None if self.spec is None else render_spec(self.spec),
            "rows": self.rows,
        }

    def write(self, out: str | os.PathLike) -> tuple[str, str]:
        base = os.fspath(out)
        csv_path, json_path = base + ".csv", base + ".json"
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
            fh.write("\n")
        return csv_path, json_path


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def prompts_for(spec: ExperimentSpec, seed: int) -> list[list[int]]:
    c = spec.corpus
    if c.path:
        seqs = ingest_corpus(c.path, spec.prompt_len)
    else:
        seqs, _ = SyntheticCorpus(c.synthetic()).sequences(
            spec.prompt_len, spec.prompts, offset=HELD_OUT_OFFSET + seed * spec.prompts
        )
    if len(seqs) < spec.prompts:
        raise ConfigError(f"corpus yields {len(seqs)} prompts, need {spec.prompts}")
    return [list(map(int, s)) for s in seqs[: spec.prompts]]


def _load_models(spec: ExperimentSpec, mode: str, cache: dict) -> Models:
    path = spec.checkpoint_for(mode)
    if path not in cache:
        if not os.path.exists(path):
            raise ConfigError(f"checkpoint for mode {mode!r} not found: {path}")
        ck = ckpt_io.load(path)
        wanted = "draft-baseline" if mode == "baseline" else "confu"
        if ck.stage != wanted:
            raise ConfigError(f"mode {mode!r} needs a {wanted!r} checkpoint, {path} is {ck.stage!r}")
        cache[path] = models_from_checkpoint(ck)
    return cache[path]


def decoder_for(models: Models, mode: str, temperature: float, nodes: int, spec: ExperimentSpec):
    engine_mode = "baseline" if mode == "baseline" else "confu"
    depth = spec.max_depth or max(nodes - 1, 0)
    dm = DecodeMode(engine_mode, temperature, spec.rule, nodes, spec.branch, depth)
    contemplate = models.contemplate if engine_mode == "confu" else None
    return SpeculativeDecoder(models.target, models.draft, dm, contemplate)


def run_cell(decoder: SpeculativeDecoder, prompts: Sequence[Sequence[int]], max_tokens: int, seed: int):
    totals = {"tokens": 0, "rounds": 0, "accepted": 0, "draft_rows": 0, "contemplate_rows": 0,
              "prefill_rows": 0, "wall_ns": 0, "prompts": 0}
    con_hist = f_hist = None
    for i, prompt in enumerate(prompts):
        _, m = decoder.generate(prompt, max_tokens, seed=seed * 1_000_003 + i)
        totals["tokens"] += m.tokens
        totals["rounds"] += m.rounds
        totals["accepted"] += int(sum(m.accepted_per_round))
        totals["draft_rows"] += m.draft_rows
        totals["contemplate_rows"] += m.contemplate_rows
        totals["prefill_rows"] += m.prefill_rows
        totals["wall_ns"] += m.wall_ns
        totals["prompts"] += 1
        if m.con_experts:
            con_hist = np.add(con_hist if con_hist is not None else 0, m.con_experts)
            f_hist = np.add(f_hist if f_hist is not None else 0, m.f_experts)
    hists = {}
    if con_hist is not None:
        hists = {"con_experts": con_hist.tolist(), "f_experts": f_hist.tolist()}
    return totals, hists


def cmd_bench(spec: ExperimentSpec, out: str | os.PathLike | None = None) -> BenchReport:
    """Every (mode, temperature, budget) cell over shared prompts and seeds."""
    for mode in spec.modes:
        spec.checkpoint_for(mode)
    cache: dict = {}
    report = BenchReport(spec=spec)
    with torch.no_grad():
        for mode in spec.modes:
            models = _load_models(spec, mode, cache)
            for temperature in spec.temperatures:
                for nodes in spec.budgets:
                    decoder = decoder_for(models, mode, temperature, nodes, spec)
                    agg: dict = {}
                    hists: dict = {}
                    for seed in spec.seeds:
                        totals, h = run_cell(decoder, prompts_for(spec, seed), spec.max_tokens, seed)
                        for k, v in totals.items():
                            agg[k] = agg.get(k, 0) + v
                        for k, v in h.items():
                            hists[k] = np.add(hists.get(k, 0), v).tolist()
                    report.rows.append(_row(mode, temperature, nodes, agg, hists))
    if out is not None:
        report.write(out)
    return report


def _row(mode, temperature, nodes, agg, hists) -> dict:
    rounds = agg["rounds"]
    forwards = rounds + agg["prompts"]  # one prefill per prompt plus one pass per round
    return {
        "mode": mode,
        "temperature": float(temperature),
        "nodes": int(nodes),
        "tau": agg["accepted"] / rounds if rounds else 0.0,
        "tokens": agg["tokens"],
        "rounds": rounds,
        "tokens_per_round": agg["tokens"] / rounds if rounds else 0.0,
        "draft_rows": agg["draft_rows"],
        "contemplate_rows": agg["contemplate_rows"],
        "prefill_rows": agg["prefill_rows"],
        "sr_proxy": agg["tokens"] / forwards if forwards else 0.0,
        "wall_ms": agg["wall_ns"] / 1e6,
        **hists,
    }


# ---------------------------------------------------------------------------
# report joins

_REQUIRED = ("mode", "temperature", "nodes", "tau", "sr_proxy")


def read_report(path: str | os.PathLike) -> list[dict]:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not a JSON report ({exc})") from None
    if not isinstance(data, dict) or data.get("schema") != "confu-bench/1":
        raise FormatError(f"{path}: unknown report schema")
    rows = data.get("rows")
    if not isinstance(rows, list):
        raise FormatError(f"{path}: missing rows")
    for row in rows:
        missing = [k for k in _REQUIRED if k not in row]
        if missing:
            raise FormatError(f"{path}: row lacks fields {missing}")
    return rows


@dataclass
class ComparisonTable:
    columns: list[str]
    rows: list[list]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(self.columns)
        for row in self.rows:
            writer.writerow([_fmt(v) for v in row])
        return buf.getvalue()

    def to_text(self) -> str:
        cells = [self.columns] + [[_fmt(v) if not isinstance(v, float) else f"{v:.3f}" for v in r] for r in self.rows]
        widths = [max(len(str(r[i])) for r in cells) for i in range(len(self.columns))]
        lines = ["  ".join(str(c).rjust(w) for c, w in zip(r, widths)) for r in cells]
        return "\n".join(lines) + "\n"


def cmd_report(paths: Sequence[str | os.PathLike]) -> ComparisonTable:
    """Modes side by side per (temperature, budget), plus ratio and delta columns."""
    if not paths:
        raise ConfigError("report needs at least one bench report")
    cells: dict[tuple[float, int], dict[str, dict]] = {}
    modes: list[str] = []
    for path in paths:
        for row in read_report(path):
            key = (float(row["temperature"]), int(row["nodes"]))
            if row["mode"] in cells.setdefault(key, {}):
                raise FormatError(f"duplicate cell {row['mode']} {key} across reports")
            cells[key][row["mode"]] = row
            if row["mode"] not in modes:
                modes.append(row["mode"])
    modes = [m for m in BENCH_MODES if m in modes]
    columns = ["temperature", "nodes"]
    for m in modes:
        columns += [f"tau[{m}]", f"sr_proxy[{m}]"]
    ratio = "baseline" in modes and "confu" in modes
    if ratio:
        columns += ["tau_ratio[confu/baseline]", "sr_ratio[confu/baseline]"]
    ablation = all(m in modes for m in ABLATION)
    if ablation:
        columns += ["dtau[moe]", "dtau[replication]"]
    rows = []
    for key in sorted(cells):
        cell = cells[key]
        row: list = [key[0], key[1]]
        for m in modes:
            row += [cell[m]["tau"], cell[m]["sr_proxy"]] if m in cell else ["", ""]
        if ratio:
            row += _ratios(cell)
        if ablation:
            row += _deltas(cell)
        rows.append(row)
    return ComparisonTable(columns, rows)


def _ratios(cell) -> list:
    if "baseline" not in cell or "confu" not in cell:
        return ["", ""]
    b, c = cell["baseline"], cell["confu"]
    return [c["tau"] / b["tau"] if b["tau"] else "", c["sr_proxy"] / b["sr_proxy"] if b["sr_proxy"] else ""]


def _deltas(cell) -> list:
    if not all(m in cell for m in ABLATION):
        return ["", ""]
    full, no_moe, bare = (cell[m]["tau"] for m in ABLATION)
    return [full - no_moe, no_moe - bare]


# ---------------------------------------------------------------------------
# losslessness


def tiny_models(seed: int = 0, mode: str = "confu", logit_scale: float = 1.0) -> Models:
    """Random vocab-8 models small enough for exhaustive enumeration."""
    from .draft import DraftConfig
    from .training import FutureConfig

    tc = TargetConfig(vocab_size=8, d_model=16, n_heads=2, n_layers=2, max_seq_len=16)
    dc = DraftConfig(d_model=16, n_heads=2, vocab_size=8)
    fc = FutureConfig(soft_prompts=4, n_expert=4, k_expert=2) if mode == "confu" else None
    models = build_models(tc, dc, fc, seed=seed)
    if logit_scale != 1.0:
        with torch.no_grad():
            models.target.w("lm_head").mul_(logit_scale)
            models.draft.w("lm_head").mul_(logit_scale * 0.5)
    models.target.freeze()
    return models


def cmd_verify_lossless(
    models: Models | str | os.PathLike,
    mode: str = "confu",
    exhaustive: bool = True,
    trials: int = 2000,
    temperature: float = 1.0,
    rule: str = "lossless",
    nodes: int = 4,
    branch: int = 2,
    prompt: Sequence[int] = (1, 2),
    max_tokens: int = 4,
    seed: int = 0,
) -> LosslessReport:
    if not isinstance(models, Models):
        models = models_from_checkpoint(ckpt_io.load(models))
    engine_mode = "baseline" if mode == "baseline" else "confu"
    dm = DecodeMode(engine_mode, temperature, rule, nodes, branch, max(nodes, 1))
    decoder = SpeculativeDecoder(
        models.target, models.draft, dm, models.contemplate if engine_mode == "confu" else None
    )
    if exhaustive:
        report = verify_exhaustive(decoder, prompt, max_tokens)
    else:
        report = verify_monte_carlo(decoder, prompt, max_tokens, trials, seed=seed)
    report.detail.update({"mode": mode, "rule": rule, "nodes": nodes, "temperature": temperature})
    return report
