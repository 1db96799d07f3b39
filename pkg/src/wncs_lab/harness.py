"""End-to-end experiments: corpus generation, model training, Monte Carlo
closed-loop evaluation and result persistence.

Seeding convention: every random stream is derived from the experiment's
base seed. Run ``r`` of a study uses ``base ^ r`` (bitwise XOR), combined
with a purpose tag through :class:`numpy.random.SeedSequence`, so corpus
traces, held-out traces and evaluation runs never share a stream. Within
one run index all controller variants see the same fading and packet
streams, which makes their comparison paired.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import cart
from . import channel_physics as phys
from . import fading_sim
from . import fsmc_baseline as fsmc
from . import markov_learner as ml
from . import plant_sarx as ps
from .smpc import CONTROLLERS, MpcConfig, StochasticMpc, make_forecaster

log = logging.getLogger(__name__)

# purpose tags for derived seed streams
CORPUS, EXCITATION, MOMENTS, EVALUATION, HELD_OUT = 1, 2, 3, 4, 5
REFERENCE_RUNS = 500


class ConfigError(ValueError):
    pass


def stream_seed(base: int, index: int, purpose: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(base) ^ int(index), purpose])


@dataclass
class CorpusPlan:
    n_traces: int = 100
    n_steps: int = 6000
    excitation_traces: int = 20
    excitation_amplitude: float = 3.0
    excitation_dither: float = 3.0
    start_spread_m: float = 0.5
    dither_std: float = 1.0


@dataclass
class SarxPlan:
    delta_y: int = 0
    delta_u: int = 0
    max_leaves: int = 4
    min_leaf_size: int = 200
    max_samples: int | None = 60000


@dataclass
class FsmcPlan:
    n_states: int = 9
    n_mc: int = 1_000_000
    n_chains: int = 10_000  # fading decorrelates over seconds, so many short chains beat few long ones
    reference_position: float = 5.0


@dataclass
class RunPlan:
    n_runs: int = 20
    n_steps: int = 6000
    initial_state: list = field(default_factory=lambda: [2.0, 0.0, math.pi, 0.0])
    controllers: list = field(default_factory=lambda: ["learned", "fsmc", "deterministic"])
    settle_window_s: float = 1.0
    position_tol: float = 0.1
    angle_tol: float = 0.1
    per_window: int = 500
    plot_stride: int = 10


@dataclass
class ExperimentConfig:
    channel: phys.ChannelParams = field(default_factory=phys.ChannelParams)
    plant: ps.PendulumParams = field(default_factory=ps.PendulumParams)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    learner: ml.LearnerConfig = field(default_factory=lambda: ml.LearnerConfig(loss_model="bit"))
    sarx: SarxPlan = field(default_factory=SarxPlan)
    fsmc: FsmcPlan = field(default_factory=FsmcPlan)
    corpus: CorpusPlan = field(default_factory=CorpusPlan)
    run: RunPlan = field(default_factory=RunPlan)
    loss_model: str = "bit"
    ar_order: int = 50
    seed: int = 2024

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.run.n_runs < 1 or self.run.n_steps < 1:
            raise ConfigError("n_runs and n_steps must be >= 1")
        if self.corpus.n_traces < 1 or self.corpus.n_steps < 2:
            raise ConfigError("corpus needs at least one trace of two steps")
        if self.fsmc.n_chains < 2 or self.fsmc.n_mc < 2 * self.fsmc.n_chains:
            raise ConfigError("fsmc needs n_chains >= 2 and at least two samples per chain")
        if self.loss_model not in phys.LOSS_MODELS:
            raise ConfigError(f"loss_model must be one of {phys.LOSS_MODELS}")
        if self.learner.loss_model != self.loss_model:
            raise ConfigError("learner loss_model must match the experiment loss_model")
        for c in self.run.controllers:
            if c not in CONTROLLERS:
                raise ConfigError(f"unknown controller {c!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        if len(self.run.initial_state) != 4 or len(self.mpc.target) != 4:
            raise ConfigError("initial state and target must have four components")

    def to_dict(self) -> dict:
        return {"channel": self.channel.to_dict(), "plant": asdict(self.plant),
                "mpc": self.mpc.to_dict(), "learner": self.learner.to_dict(),
                "sarx": asdict(self.sarx), "fsmc": asdict(self.fsmc),
                "corpus": asdict(self.corpus), "run": asdict(self.run),
                "loss_model": self.loss_model, "ar_order": self.ar_order, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            known = {"channel", "plant", "mpc", "learner", "sarx", "fsmc", "corpus", "run",
                     "loss_model", "ar_order", "seed"}
            extra = set(d) - known
            if extra:
                raise ConfigError(f"unknown config keys: {sorted(extra)}")
            loss = d.get("loss_model", "bit")
            learner = dict(ml.LearnerConfig(loss_model=loss).to_dict(), **d.get("learner", {}))
            return cls(
                channel=phys.ChannelParams.from_dict(d.get("channel", {})),
                plant=ps.PendulumParams(**d.get("plant", {})),
                mpc=MpcConfig.from_dict(d.get("mpc", {})),
                learner=ml.LearnerConfig.from_dict(learner),
                sarx=SarxPlan(**d.get("sarx", {})),
                fsmc=FsmcPlan(**d.get("fsmc", {})),
                corpus=CorpusPlan(**d.get("corpus", {})),
                run=RunPlan(**d.get("run", {})),
                loss_model=loss,
                ar_order=int(d.get("ar_order", 50)),
                seed=d.get("seed", 2024),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(d)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


# closed-loop simulation -----------------------------------------------------

@dataclass
class RunResult:
    controller: str
    run: int
    seed: int
    states: np.ndarray        # (K+1, 4)
    commanded: np.ndarray     # (K,)
    applied: np.ndarray       # (K,)
    gamma_db: np.ndarray      # (K,)
    delivered: np.ndarray     # (K,) bool
    stage_cost: np.ndarray    # (K,)
    fallbacks: int = 0
    status: str = "ok"
    message: str = ""

    @property
    def cumulative_cost(self) -> np.ndarray:
        return np.cumsum(self.stage_cost)

    def per_cumulative(self) -> np.ndarray:
        n = np.arange(1, len(self.delivered) + 1)
        return 1.0 - np.cumsum(self.delivered) / n

    def per_windowed(self, window: int) -> np.ndarray:
        lost = 1.0 - self.delivered.astype(float)
        c = np.concatenate([[0.0], np.cumsum(lost)])
        k = np.arange(1, len(lost) + 1)
        lo = np.maximum(k - window, 0)
        return (c[k] - c[lo]) / (k - lo)


def simulate_run(sarx: ps.SarxModel, forecaster, config: ExperimentConfig, *, kind: str,
                 seed: np.random.SeedSequence, n_steps: int, initial_state, fading_models,
                 dither_std: float = 0.0, run_index: int = 0, run_seed: int = 0) -> RunResult:
    """One closed-loop simulation.

    Per step: the controller sees ``(y(k), Gamma(k-1))``; the packet carrying
    ``u(k)`` is then delivered according to ``gamma(k)``, evaluated at the
    cart position ``y1(k)``; finally the plant advances with the applied input.
    ``kind == "lossless"`` delivers every packet.
    """
    params = config.channel
    fade_seed, packet_seed, dither_seed = seed.spawn(3)
    gen = fading_sim.SinrGenerator(params, config.plant.sample_period_s, fade_seed,
                                   order=config.ar_order, models=fading_models)
    f0, f1 = gen.fading_block(n_steps + 1)
    alpha1 = float(phys.path_gain(params.d1_m))
    prng = np.random.default_rng(packet_seed)
    draws = prng.random(n_steps)
    drng = np.random.default_rng(dither_seed)
    dither = drng.standard_normal(n_steps) * dither_std if dither_std > 0 else np.zeros(n_steps)
    ctl = StochasticMpc(sarx, config.mpc, forecaster)
    lo, hi = config.mpc.input_bounds
    target = np.asarray(config.mpc.target, dtype=float)
    Q = config.mpc.Q(4)
    R = float(np.atleast_2d(config.mpc.R(1))[0, 0])

    def gamma_at(pos, i):
        a0 = float(phys.path_gain(phys.link_distance(pos, params.d0_offset_m)))
        return float(phys.sinr_from_components(params, a0, alpha1, f0[i], f1[i]))

    y = np.asarray(initial_state, dtype=float).copy()
    states = np.full((n_steps + 1, 4), np.nan)
    states[0] = y
    cmd = np.zeros(n_steps)
    app = np.zeros(n_steps)
    gdb = np.zeros(n_steps)
    dlv = np.zeros(n_steps, dtype=bool)
    cost = np.zeros(n_steps)
    gamma_prev_db = float(phys.sinr_db(gamma_at(y[0], 0)))
    status, message = "ok", ""
    k_done = n_steps
    for k in range(n_steps):
        try:
            info = ctl.control_step(y, gamma_prev_db)
            u = float(np.clip(info.u[0] + dither[k], lo, hi))
            g = gamma_at(y[0], k + 1)
            if kind == "lossless":
                delivered = True
            else:
                delivered = bool(draws[k] >= phys.error_rate(g, params.frame_bits, config.loss_model))
            ua = u if delivered else 0.0
            e = y - target
            cost[k] = float(e @ Q @ e) + R * ua * ua
            y = ps.step(y, ua, config.plant)
            if not np.all(np.isfinite(y)):
                raise FloatingPointError("plant state diverged")
        except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
            status, message, k_done = "failed", f"step {k}: {exc}", k
            log.error("run %d (%s) failed at step %d: %s", run_index, kind, k, exc)
            break
        cmd[k], app[k], dlv[k] = u, ua, delivered
        gdb[k] = float(phys.sinr_db(g))
        states[k + 1] = y
        gamma_prev_db = gdb[k]
    if k_done < n_steps:
        cost[k_done:] = np.nan
    return RunResult(kind, run_index, run_seed, states, cmd, app, gdb, dlv, cost, ctl.n_fallbacks, status, message)


# corpus --------------------------------------------------------------------

def excitation_trace(config: ExperimentConfig, seed: np.random.SeedSequence, n_steps: int):
    """Open-loop excitation around the hanging equilibrium.

    Piecewise-constant random forces with white dither and a weak position
    and velocity feedback that keeps the cart in the working range.
    """
    rng = np.random.default_rng(seed)
    cp = config.corpus
    lo, hi = config.mpc.input_bounds
    centre = 0.5 * (config.run.initial_state[0] + config.mpc.target[0])
    y = np.array([centre + rng.uniform(-2.0, 2.0), 0.0, math.pi, 0.0])
    Y = np.empty((n_steps, 4))
    U = np.empty(n_steps)
    hold, base = 0, 0.0
    for k in range(n_steps):
        if hold <= 0:
            base = rng.uniform(-cp.excitation_amplitude, cp.excitation_amplitude)
            hold = int(rng.integers(20, 400))
        hold -= 1
        u = base - 2.0 * (y[0] - centre) - 2.0 * y[1] + cp.excitation_dither * rng.standard_normal()
        u = float(np.clip(u, lo, hi))
        Y[k], U[k] = y, u
        y = ps.step(y, u, config.plant)
    return Y, U


def identify_plant(config: ExperimentConfig, corpus) -> ps.SarxModel:
    sp = config.sarx
    return ps.sarx_identify(corpus, sp.delta_y, sp.delta_u, config.mpc.horizon,
                            cart.FitConfig(sp.max_leaves, sp.min_leaf_size, 0.0),
                            max_samples=sp.max_samples, seed=config.seed)


def bootstrap_sarx(config: ExperimentConfig):
    """SARX model from open-loop excitation only (used to drive the corpus runs)."""
    corpus = [excitation_trace(config, stream_seed(config.seed, i, EXCITATION), config.corpus.n_steps)
              for i in range(config.corpus.excitation_traces)]
    return identify_plant(config, corpus), corpus


def generate_corpus(config: ExperimentConfig, out_dir=None, bootstrap=None, purpose: int = CORPUS,
                    n_traces: int | None = None):
    """Loss-free closed-loop runs of the always-delivered controller.

    Starts are spread around the nominal initial position and a small dither
    is added to the input so the identification data is persistently
    exciting. Returns ``(traces, excitation_corpus)`` where each trace is a
    dict in the CSV schema; files are written to ``out_dir/traces`` if given.
    """
    sarx0, excitation = bootstrap if bootstrap is not None else bootstrap_sarx(config)
    models = fading_sim.fit_fading_models(config.channel, config.plant.sample_period_s, config.ar_order)
    cp = config.corpus
    n_traces = cp.n_traces if n_traces is None else n_traces
    traces = []
    tdir = None
    if out_dir is not None:
        tdir = Path(out_dir) / "traces"
        tdir.mkdir(parents=True, exist_ok=True)
    for i in range(n_traces):
        ss = stream_seed(config.seed, i, purpose)
        start_rng = np.random.default_rng(ss.spawn(1)[0])
        y0 = np.asarray(config.run.initial_state, dtype=float).copy()
        y0[0] += start_rng.uniform(-cp.start_spread_m, cp.start_spread_m)
        res = simulate_run(sarx0, make_forecaster("lossless"), config, kind="lossless", seed=ss,
                           n_steps=cp.n_steps, initial_state=y0, fading_models=models,
                           dither_std=cp.dither_std, run_index=i, run_seed=int(config.seed) ^ i)
        if res.status != "ok":
            raise RuntimeError(f"corpus trace {i} failed: {res.message}")
        tr = {"k": np.arange(cp.n_steps), "gamma_db": res.gamma_db, "y": res.states[:-1],
              "u": res.applied, "delivered": res.delivered.astype(int)}
        traces.append(tr)
        if tdir is not None:
            fading_sim.write_trace_csv(tdir / f"trace_{i:04d}.csv", tr["gamma_db"], tr["y"], tr["u"],
                                       tr["delivered"])
    return traces, excitation


def load_traces(trace_dir):
    files = sorted(Path(trace_dir).glob("trace_*.csv"))
    if not files:
        raise FileNotFoundError(f"no traces in {trace_dir}")
    out = []
    for f in files:
        d = fading_sim.read_trace_csv(f)
        out.append({"k": d["k"], "gamma_db": d["gamma_db"],
                    "y": np.column_stack([d["y1"], d["y2"], d["y3"], d["y4"]]),
                    "u": d["u"], "delivered": d["delivered"]})
    return out


def sinr_traces(traces):
    return [ml.SinrTrace(t["gamma_db"], t["y"]) for t in traces]


def learn_channel(config: ExperimentConfig, traces) -> ml.LearnedChannelModel:
    return ml.learn(sinr_traces(traces), config.learner)


def fsmc_baseline(config: ExperimentConfig) -> fsmc.FsmcModel:
    moments = fsmc.moment_match(config.channel, config.fsmc.reference_position, config.fsmc.n_mc,
                                stream_seed(config.seed, 0, MOMENTS), config.plant.sample_period_s,
                                n_chains=config.fsmc.n_chains, ar_order=config.ar_order)
    return fsmc.build_fsmc(moments, config.fsmc.n_states, config.channel.frame_bits,
                           config.loss_model, config.fsmc.reference_position)


@dataclass
class Models:
    sarx: ps.SarxModel
    learned: ml.LearnedChannelModel | None = None
    fsmc: fsmc.FsmcModel | None = None

    def save(self, model_dir):
        d = Path(model_dir)
        d.mkdir(parents=True, exist_ok=True)
        (d / "sarx.json").write_text(self.sarx.to_json())
        if self.learned is not None:
            (d / "learned_channel.json").write_text(self.learned.to_json())
        if self.fsmc is not None:
            (d / "fsmc.json").write_text(self.fsmc.to_json())

    @classmethod
    def load(cls, model_dir) -> "Models":
        d = Path(model_dir)
        learned = d / "learned_channel.json"
        fs = d / "fsmc.json"
        return cls(ps.SarxModel.from_json((d / "sarx.json").read_text()),
                   ml.LearnedChannelModel.from_json(learned.read_text()) if learned.exists() else None,
                   fsmc.FsmcModel.from_json(fs.read_text()) if fs.exists() else None)


def train_models(config: ExperimentConfig, out_dir=None, traces=None) -> Models:
    """Corpus, SARX identification, learned channel model and FSMC baseline."""
    t0 = time.perf_counter()
    boot = bootstrap_sarx(config)
    if traces is None:
        traces, excitation = generate_corpus(config, out_dir, bootstrap=boot)
    else:
        excitation = boot[1]
    log.info("corpus ready (%.1fs)", time.perf_counter() - t0)
    plant_corpus = excitation + [(t["y"], t["u"]) for t in traces]
    models = Models(identify_plant(config, plant_corpus), learn_channel(config, traces), fsmc_baseline(config))
    log.info("models trained (%.1fs)", time.perf_counter() - t0)
    if out_dir is not None:
        models.save(Path(out_dir) / "models")
    return models


# experiment ----------------------------------------------------------------

def _fmt(x) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def band(samples):
    """Mean and the 95.4 % band ``mean +/- 2 sd / sqrt(n)`` along axis 0."""
    a = np.asarray(samples, dtype=float)
    n = a.shape[0]
    mean = a.mean(axis=0)
    if n < 2:
        return mean, mean.copy(), mean.copy()
    half = 2.0 * a.std(axis=0, ddof=1) / math.sqrt(n)
    return mean, mean - half, mean + half


def settled(res: RunResult, config: ExperimentConfig) -> tuple[bool, float, float]:
    """Whether the final second stays within the position and angle tolerances."""
    rp = config.run
    w = max(1, int(round(rp.settle_window_s / config.plant.sample_period_s)))
    tail = res.states[-w:]
    if res.status != "ok" or not np.all(np.isfinite(tail)):
        return False, float("nan"), float("nan")
    target = np.asarray(config.mpc.target, dtype=float)
    pos = float(np.max(np.abs(tail[:, 0] - target[0])))
    ang = float(np.max(np.abs(tail[:, 2] - target[2])))
    return (pos < rp.position_tol and ang < rp.angle_tol), pos, ang


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    runs: dict                     # controller -> list[RunResult]
    summary: dict
    out_dir: Path | None = None


def run_experiment(config: ExperimentConfig, out_dir=None, models: Models | None = None,
                   controllers=None) -> ExperimentResult:
    """Monte Carlo closed-loop study of each controller variant."""
    controllers = list(config.run.controllers if controllers is None else controllers)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(config.to_json())
    if models is None:
        models = train_models(config, out_dir)
    fading_models = fading_sim.fit_fading_models(config.channel, config.plant.sample_period_s,
                                                 config.ar_order)
    runs = {}
    for kind in controllers:
        forecaster = make_forecaster(kind, models.learned, models.fsmc)
        out = []
        for r in range(config.run.n_runs):
            res = simulate_run(models.sarx, forecaster, config, kind=kind,
                               seed=stream_seed(config.seed, r, EVALUATION), n_steps=config.run.n_steps,
                               initial_state=config.run.initial_state, fading_models=fading_models,
                               run_index=r, run_seed=int(config.seed) ^ r)
            out.append(res)
        runs[kind] = out
    summary = summarize(config, runs)
    result = ExperimentResult(config, runs, summary, out_dir)
    if out_dir is not None:
        write_results(result)
    return result


def summarize(config: ExperimentConfig, runs: dict) -> dict:
    s = {"config_fingerprint": config.fingerprint(),
         "scale": {"n_runs": config.run.n_runs, "reference_runs": REFERENCE_RUNS,
                   "n_steps": config.run.n_steps},
         "loss_model": config.loss_model, "mpc": config.mpc.to_dict(), "controllers": {}}
    for kind, results in runs.items():
        ok = [r for r in results if r.status == "ok"]
        costs = np.array([r.cumulative_cost[-1] for r in ok])
        pers = np.array([r.per_cumulative()[-1] for r in ok])
        conv = [settled(r, config)[0] for r in results]
        entry = {"n_runs": len(results), "n_failed": len(results) - len(ok),
                 "settled_fraction": sum(conv) / len(results),
                 "fallbacks": int(sum(r.fallbacks for r in results))}
        if len(ok):
            m, lo, hi = band(costs[:, None])
            entry["cumulative_cost"] = {"mean": float(m[0]), "lo": float(lo[0]), "hi": float(hi[0])}
            m, lo, hi = band(pers[:, None])
            entry["per"] = {"mean": float(m[0]), "lo": float(lo[0]), "hi": float(hi[0])}
        s["controllers"][kind] = entry
    return s


METRIC_COLUMNS = ("controller", "run", "seed", "status", "cumulative_cost", "per",
                  "final_position_error", "final_angle_error", "settled", "fallbacks")


def write_results(result: ExperimentResult):
    out = Path(result.out_dir)
    cfg = result.config
    with (out / "metrics.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for kind, results in result.runs.items():
            for r in results:
                ok, pos, ang = settled(r, cfg)
                w.writerow([kind, r.run, r.seed, r.status,
                            _fmt(r.cumulative_cost[-1]) if r.status == "ok" else "nan",
                            _fmt(r.per_cumulative()[-1]), _fmt(pos), _fmt(ang), int(ok), r.fallbacks])
    (out / "summary.json").write_text(json.dumps(result.summary, indent=2, sort_keys=True))
    pdir = out / "plotdata"
    pdir.mkdir(exist_ok=True)
    stride = max(1, cfg.run.plot_stride)
    series = {
        "cumulative_cost": lambda r: r.cumulative_cost,
        "per_cumulative": lambda r: r.per_cumulative(),
        "per_windowed": lambda r: r.per_windowed(cfg.run.per_window),
        "y1": lambda r: r.states[1:, 0], "y2": lambda r: r.states[1:, 1],
        "y3": lambda r: r.states[1:, 2], "y4": lambda r: r.states[1:, 3],
    }
    for name, get in series.items():
        with (pdir / f"{name}.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("series", "k", "mean", "lo", "hi"))
            for kind, results in result.runs.items():
                ok = [get(r) for r in results if r.status == "ok"]
                if not ok:
                    continue
                m, lo, hi = band(np.vstack(ok))
                for k in range(0, len(m), stride):
                    w.writerow((kind, k + 1, _fmt(m[k]), _fmt(lo[k]), _fmt(hi[k])))


# channel-model evaluation --------------------------------------------------

def evaluate_channel_model(model: ml.LearnedChannelModel, traces, n_bins: int = 10) -> dict:
    """Identification quality of a learned channel model on held-out traces.

    ``traces`` are :class:`SinrTrace` objects. The empirical delivery at step
    ``k+1`` is taken as ``1 - R(gamma(k+1))``, the conditional mean of the
    Bernoulli outcome, which removes draw noise from the calibration curve.
    """
    if isinstance(traces, ml.SinrTrace):
        traces = [traces]
    cfg = model.config
    preds, emps, states, nxt = [], [], [], []
    for tr in traces:
        pts = np.column_stack([tr.gamma_db, tr.states])
        leaves = model.tree_T.leaf_indices(pts)
        one_step = model.pdp_table(1)[:, 0]
        preds.append(one_step[leaves[:-1]])
        g = 10.0 ** (tr.gamma_db[1:] / 10.0)
        emps.append(1.0 - np.asarray(phys.error_rate(g, cfg.frame_bits, cfg.loss_model)))
        states.append(leaves[:-1])
        nxt.append(leaves[1:])
    pred = np.concatenate(preds)
    emp = np.concatenate(emps)
    cur = np.concatenate(states)
    nx = np.concatenate(nxt)

    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, pred, side="right") - 1, 0, n_bins - 1)
    bins = []
    err = 0.0
    for b in range(n_bins):
        m = idx == b
        if not m.any():
            continue
        p, e = float(pred[m].mean()), float(emp[m].mean())
        bins.append({"lo": float(edges[b]), "hi": float(edges[b + 1]), "count": int(m.sum()),
                     "predicted": p, "empirical": e})
        err += m.sum() * abs(p - e)
    calib = err / len(pred)

    n = model.n_states
    counts = np.zeros((n, n))
    np.add.at(counts, (cur, nx), 1.0)
    rows = counts.sum(axis=1)
    l1 = [float(np.abs(counts[i] / rows[i] - model.tpm[i]).sum()) if rows[i] else None for i in range(n)]

    mu = np.array([g.mean for g in model.next_gaussians])
    var = np.array([g.variance for g in model.next_gaussians])
    resp = np.concatenate([tr.gamma_db[1:] for tr in traces])
    v = np.maximum(var[cur], 1e-300)
    ll = -0.5 * (np.log(2 * math.pi * v) + (resp - mu[cur]) ** 2 / v)

    return {"fingerprint": model.fingerprint, "n_samples": int(len(pred)),
            "calibration": {"bins": bins, "mean_abs_error": float(calib)},
            "tpm_row_l1": l1,
            "log_likelihood": {"total": float(ll.sum()), "per_sample": float(ll.mean())}}
