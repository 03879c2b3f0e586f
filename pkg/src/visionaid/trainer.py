"""Progressive ensemble training loop with snapshots, events and resume.

Timeline (steps are optimizer iterations, one batch each)::

    [warm-up: plain GAN] | add model 1 | T_1 steps | add model 2 | T_2 steps | ...

Before each addition the best-FID snapshot so far is restored, the
remaining bank models are re-probed against fresh generator samples, and
the most separable one joins the ensemble.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .augment import AugPolicy
from .bank import ModelBank, desk_bank
from .config import ExperimentConfig, from_dict, write_echo
from .data import load_dataset
from .metrics import MetricReport, evaluate, fid, fit_gaussian, metric_features
from .networks import Discriminator, Generator, seeded
from .selection import ProbeResult, SelectionState, rank_models, linear_probe, select_next
from .selection import _flat_features
from .training import (D_NAME, EnsembleState, NonFiniteLossError, SnapshotRecord, TrainSettings,
                       add_vision_discriminator, derive_seed, generate, make_optimizer, make_rng, smoothing_gate,
                       train_step)

log = logging.getLogger(__name__)

# reference schedule at full scale, in images shown
WARMUP_IMAGES = 500_000
FIRST_INTERVAL_IMAGES = {"low_shot": 1_000_000, "1k": 4_000_000, "default": 8_000_000}
LATER_INTERVAL_IMAGES = {"low_shot": 1_000_000, "default": 2_000_000}

CHECKPOINT_DIR = "checkpoints"
EVENTS_FILE = "events.jsonl"
METRICS_FILE = "metrics.jsonl"
LOCK_FILE = ".lock"


class RunLockedError(RuntimeError):
    pass


def reference_intervals(n_train: int, k: int) -> list[int]:
    """Full-scale intervals (images) before each subsequent model addition."""
    if n_train < 1000:
        first, later = FIRST_INTERVAL_IMAGES["low_shot"], LATER_INTERVAL_IMAGES["low_shot"]
    elif n_train < 2000:
        first, later = FIRST_INTERVAL_IMAGES["1k"], LATER_INTERVAL_IMAGES["default"]
    else:
        first, later = FIRST_INTERVAL_IMAGES["default"], LATER_INTERVAL_IMAGES["default"]
    return [first] + [later] * max(k - 1, 0)


@dataclass
class Schedule:
    warmup: int
    intervals: list[int]
    total: int

    @property
    def additions(self) -> list[int]:
        """Steps at which models 1..K join (only those before the end of training)."""
        at, out = self.warmup, []
        for t in self.intervals:
            if at >= self.total:
                break
            out.append(at)
            at += t
        return out


def resolve_schedule(cfg: ExperimentConfig, n_train: int, warm_started: bool = False) -> Schedule:
    sc, k = cfg.schedule, cfg.selection.k_max
    to_steps = lambda images: max(1, int(round(images * sc.schedule_scale / cfg.data.batch_size)))
    if warm_started:
        warmup = 0
    elif sc.warmup_steps >= 0:
        warmup = sc.warmup_steps
    else:
        warmup = to_steps(WARMUP_IMAGES)
    intervals = list(sc.intervals[:k]) if sc.intervals else [to_steps(i) for i in reference_intervals(n_train, k)][:k]
    total = sc.total_steps or warmup + sum(intervals)
    return Schedule(warmup, intervals, total)


class EventLog:
    """Append-only JSON-lines log: one ``{"step", "kind", "payload"}`` object per line."""

    def __init__(self, path: Path):
        self.path = path
        self.count = sum(1 for _ in open(path)) if path.exists() else 0

    def emit(self, step: int, kind: str, **payload) -> None:
        line = json.dumps({"step": step, "kind": kind, "payload": payload}, sort_keys=True, separators=(",", ":"))
        with open(self.path, "a") as fh:
            fh.write(line + "\n")
        self.count += 1

    def truncate(self, n: int) -> None:
        truncate_lines(self.path, n)
        self.count = n

    def read(self) -> list[dict]:
        return read_jsonl(self.path)


def truncate_lines(path: Path, n: int) -> None:
    if not path.exists():
        return
    lines = path.read_text().splitlines(keepends=True)[:n]
    path.write_text("".join(lines))


def read_jsonl(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


@contextmanager
def run_dir_lock(directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / LOCK_FILE
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLockedError(f"{directory} is in use by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield directory
    finally:
        lock.unlink(missing_ok=True)


def build_bank(cfg: ExperimentConfig) -> ModelBank:
    if cfg.bank.manifest:
        return ModelBank.from_manifest(cfg.bank.manifest, cfg.bank.model_dir or None)
    return desk_bank(cfg.data.resolution, metric_id=cfg.metrics.extractor)


@dataclass
class RunResult:
    state: EnsembleState
    best: SnapshotRecord | None
    report: MetricReport | None
    completed: bool


class Trainer:
    """Owns one run directory and the EnsembleState trained in it."""

    def __init__(self, cfg: ExperimentConfig, bank: ModelBank | None = None, dataset: torch.Tensor | None = None,
                 generator: torch.nn.Module | None = None, discriminator: torch.nn.Module | None = None,
                 out_dir=None):
        self.cfg = cfg
        self.out = Path(out_dir or cfg.run.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.bank = bank if bank is not None else build_bank(cfg)
        self.dataset = dataset if dataset is not None else load_dataset(cfg.data)
        self.metric_id = cfg.metrics.extractor
        if cfg.bank.candidates:
            unknown = [m for m in cfg.bank.candidates if m not in self.bank]
            if unknown:
                raise ValueError(f"bank.candidates: unknown models {unknown}")
            self.candidates = list(cfg.bank.candidates)
        else:
            self.candidates = [m for m in self.bank.list_models() if m != self.metric_id]
        if self.metric_id in self.candidates:
            raise ValueError("the metric extractor must not be a selection candidate")

        seed = cfg.run.seed
        g, d, a = cfg.generator, cfg.discriminator, cfg.augmentation
        G = generator or seeded(Generator(g.latent_dim, g.channels, cfg.data.channels, cfg.data.resolution),
                                derive_seed(seed, "G") % (2 ** 31))
        D = discriminator or seeded(Discriminator(d.channels, cfg.data.channels, cfg.data.resolution),
                                    derive_seed(seed, "D") % (2 ** 31))
        settings = TrainSettings(
            latent_dim=g.latent_dim, r1_gamma=d.r1_gamma, r1_interval=d.r1_interval, r1_heads=d.r1_heads,
            ada_interval=a.interval, head_width=d.head_width or None, head_optimizer=d.optimizer, head_lr=d.lr,
            head_betas=(d.beta1, d.beta2))
        self.state = EnsembleState(
            generator=G,
            discriminator=D,
            bank=self.bank,
            g_opt=make_optimizer(G.parameters(), g.optimizer, g.lr, (g.beta1, g.beta2)),
            d_opt=make_optimizer(D.parameters(), d.optimizer, d.lr, (d.beta1, d.beta2)),
            d_policy=AugPolicy(D_NAME, a.d_mode, a.initial_p, a.d_target, tuple(a.d_ops), a.adjust_step),
            selection=SelectionState(cfg.selection.k_max, set(self.candidates)),
            settings=settings,
            seed=seed,
        )
        self.schedule = resolve_schedule(cfg, len(self.dataset))
        self.state.schedule = list(self.schedule.intervals)
        self.events = EventLog(self.out / EVENTS_FILE)
        self.metrics_path = self.out / METRICS_FILE
        self.baseline_fid: float | None = None
        self._real_metric = None
        self._started = False
        self._stopped = False
        self.warm_started = False

    # -- helpers --------------------------------------------------------------

    def _sample_real(self) -> torch.Tensor:
        rng = self.state.rng("data")
        batch = self.cfg.data.batch_size
        idx = torch.randint(len(self.dataset), (batch,), generator=rng)
        x = self.dataset[idx]
        flip = torch.rand(batch, generator=rng) < 0.5
        if self.cfg.data.mirror:
            x = torch.where(flip.view(-1, 1, 1, 1), x.flip(3), x)
        return x

    def _reference_features(self) -> np.ndarray:
        if self._real_metric is None:
            ref = self.dataset
            n = self.cfg.metrics.reference_size
            if n and n < len(ref):
                idx = np.random.default_rng(derive_seed(self.cfg.run.seed, "reference")).choice(len(ref), n, False)
                ref = ref[np.sort(idx)]
            feats = metric_features(self.bank, self.metric_id, ref)
            self._real_metric = (feats, fit_gaussian(feats))
        return self._real_metric

    def _sampler(self, tag: str):
        G, dim = self.state.generator, self.cfg.generator.latent_dim
        return lambda n: generate(G, n, dim, make_rng(self.cfg.run.seed, tag))

    def training_fid(self, n: int | None = None) -> float:
        _, ref_stats = self._reference_features()
        images = self._sampler("snapshot-latents")(n or self.cfg.metrics.snapshot_n_gen)
        return fid(ref_stats, fit_gaussian(metric_features(self.bank, self.metric_id, images)))

    def _log_metrics(self, record: dict) -> None:
        with open(self.metrics_path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")

    def _metric_lines(self) -> int:
        return len(read_jsonl(self.metrics_path))

    # -- training loop --------------------------------------------------------

    def run(self, stop_at: int | None = None) -> RunResult:
        """Train to the end of the schedule.  ``stop_at`` halts early (simulated interruption)."""
        st, sched = self.state, self.schedule
        if not self._started and st.step == 0 and self.events.count == 0:
            self.events.emit(0, "start", k_max=self.cfg.selection.k_max, warmup=sched.warmup,
                             intervals=sched.intervals, total=sched.total, additions=sched.additions,
                             candidates=sorted(self.candidates), strategy=self.cfg.selection.strategy)
        self._started = True
        additions = sched.additions
        while st.step < sched.total and not self._stopped:
            k = len(st.selection.selected)
            if k < len(additions) and st.step == additions[k]:
                self._addition_event()
                if self._stopped:
                    break
            if stop_at is not None and st.step >= stop_at:
                return RunResult(st, None, None, completed=False)
            try:
                report = train_step(st, self._sample_real())
            except NonFiniteLossError as e:
                self._dump_diagnostic(e.report)
                self.events.emit(st.step, "abort", reason=str(e))
                raise
            if self.cfg.run.log_every and st.step % self.cfg.run.log_every == 0:
                self.events.emit(st.step, "progress", losses=_round(report.losses), p=_round(report.p),
                                 r_t=_round(report.r_t), images=st.images_shown)
            every = self.cfg.metrics.snapshot_every
            if (every and st.step % every == 0) or st.step == sched.total:
                self._snapshot()
        return self._finish()

    def _addition_event(self) -> None:
        st = self.state
        if not st.snapshots or st.snapshots[-1].step != st.step:
            self._snapshot()
            if self._stopped:
                return
        best = self.best_snapshot()
        self.restore(best)
        self.events.emit(st.step, "restore", from_step=best.step, fid=round(best.fid, 6))
        if self.baseline_fid is None:
            self.baseline_fid = best.fid
        n_add = st.selection.k_max - len(st.selection.selected) if self.cfg.selection.strategy == "fixed" else 1
        n_add = min(n_add, len(st.selection.remaining))
        if n_add <= 0:
            return
        ranking, tracked = self.probe_models()
        self.events.emit(st.step, "probe", ranking=[_round(p.to_dict()) for p in ranking],
                         tracked=[_round(p.to_dict()) for p in tracked])
        for _ in range(n_add):
            self._add_from_ranking(ranking, tracked)

    def probe_models(self) -> tuple[list[ProbeResult], list[ProbeResult]]:
        """Rank remaining candidates; also re-probe already selected models when tracking."""
        st, sel = self.state, self.cfg.selection
        n = min(len(self.dataset), sel.max_samples)
        real = self.dataset
        if len(real) > n:
            idx = np.random.default_rng(derive_seed(st.seed, "probe-real", st.step)).choice(len(real), n, False)
            real = real[np.sort(idx)]
        fake = generate(st.generator, n, self.cfg.generator.latent_dim, st.rng("probe"))
        seed = derive_seed(st.seed, "probe", st.step) % (2 ** 31)
        exclude = set(self.bank.list_models()) - st.selection.remaining
        kw = dict(split_ratio=sel.split_ratio, seed=seed, runs=sel.runs, l2=sel.l2, max_samples=sel.max_samples)
        ranking = rank_models(self.bank, fake, real, exclude=exclude, **kw)
        tracked = []
        if sel.track_selected:
            for mid in st.selection.selected:
                r = _flat_features(self.bank, mid, real)
                f = _flat_features(self.bank, mid, fake)
                tracked.append(linear_probe(r, f, sel.split_ratio, seed, sel.runs, sel.l2, model_id=mid))
        return ranking, tracked

    def _add_from_ranking(self, ranking: list[ProbeResult], tracked: list[ProbeResult]) -> None:
        st, a, d = self.state, self.cfg.augmentation, self.cfg.discriminator
        mid = select_next(st.selection, ranking, st.step)
        probe = next(p for p in ranking if p.model_id == mid)
        if tracked and all(probe.val_accuracy <= t.val_accuracy for t in tracked):
            log.warning("next model %s probes at %.3f, no better than any selected model; expect little gain",
                        mid, probe.val_accuracy)
        smoothing = smoothing_gate(probe, d.label_smoothing, d.smoothing_threshold)
        policy = AugPolicy(mid, a.head_mode, a.initial_p, a.head_target, tuple(a.head_ops), a.adjust_step)
        add_vision_discriminator(st, mid, policy, smoothing, probe)
        st.check_invariants()
        self.events.emit(st.step, "add_model", model_id=mid, k=len(st.selection.selected),
                         val_accuracy=round(probe.val_accuracy, 6), smoothing=smoothing)

    def _snapshot(self) -> None:
        st = self.state
        value = self.training_fid()
        path = Path(CHECKPOINT_DIR) / f"step_{st.step:08d}"
        st.snapshots.append(SnapshotRecord(st.step, str(path), value))
        self.events.emit(st.step, "snapshot", fid=round(value, 6), path=str(path))
        self._log_metrics({"step": st.step, "kind": "snapshot", "fid": value})
        factor = self.cfg.metrics.divergence_factor
        if self.baseline_fid is not None and factor > 0 and value > factor * self.baseline_fid:
            self.events.emit(st.step, "diverged", fid=round(value, 6), baseline=round(self.baseline_fid, 6))
            self._stopped = True
        save_checkpoint(self, self.out / path)

    def best_snapshot(self) -> SnapshotRecord | None:
        if not self.state.snapshots:
            return None
        return min(self.state.snapshots, key=lambda s: (s.fid, s.step))

    def restore(self, snap: SnapshotRecord) -> None:
        """Load network weights and optimizer moments from a snapshot; step, rngs and aug p are kept."""
        if snap.step == self.state.step:
            return
        load_weights(self.state, self.out / snap.path)

    def _finish(self) -> RunResult:
        st = self.state
        if not st.snapshots or st.snapshots[-1].step != st.step:
            self._snapshot()
        best = self.best_snapshot()
        report = None
        if self.cfg.metrics.final_eval:
            self.restore(best)
            m = self.cfg.metrics
            feats, _ = self._reference_features()
            report = evaluate(self._sampler("final-latents"), None, self.bank, self.metric_id, n_gen=m.n_gen,
                              step=best.step, kid_subset_size=min(m.kid_subset_size, len(feats), m.n_gen),
                              kid_subsets_n=m.kid_subsets, pr_k=m.pr_k, seed=derive_seed(st.seed, "kid") % 2 ** 31,
                              probe_accuracies=self._latest_probe_accuracies(), real_feats=feats)
            self._log_metrics({"kind": "final", **report.to_dict()})
        self.events.emit(st.step, "end", best_step=best.step, best_fid=round(best.fid, 6),
                         selected=list(st.selection.selected))
        return RunResult(st, best, report, completed=True)

    def _latest_probe_accuracies(self) -> dict[str, float]:
        accs = {}
        for _, ranking in self.state.selection.history:
            for p in ranking:
                accs[p.model_id] = p.val_accuracy
        return accs

    def _dump_diagnostic(self, report: dict) -> None:
        path = self.out / f"diagnostic_step_{self.state.step:08d}.json"
        path.write_text(json.dumps(report, indent=2, sort_keys=True))
        log.error("non-finite loss at step %d; diagnostic written to %s", self.state.step, path)

    # -- warm start / resume --------------------------------------------------

    def warm_start(self, ckpt_dir) -> None:
        """Start from a baseline generator/discriminator and skip the warm-up phase."""
        ckpt_dir = Path(ckpt_dir)
        self.state.generator.load_state_dict(torch.load(ckpt_dir / "generator.pt", weights_only=True))
        self.state.discriminator.load_state_dict(torch.load(ckpt_dir / "discriminator.pt", weights_only=True))
        self.warm_started = True
        self.schedule = resolve_schedule(self.cfg, len(self.dataset), warm_started=True)
        self.state.schedule = list(self.schedule.intervals)
        self.events.emit(0, "warm_start", source=ckpt_dir.name)

    @classmethod
    def resume(cls, ckpt_dir, bank: ModelBank | None = None, dataset: torch.Tensor | None = None,
               out_dir=None, **kwargs) -> "Trainer":
        ckpt_dir = Path(ckpt_dir)
        meta = json.loads((ckpt_dir / "state.json").read_text())
        cfg = from_dict(meta["config"])
        out = Path(out_dir) if out_dir else ckpt_dir.parent.parent
        trainer = cls(cfg, bank=bank, dataset=dataset, out_dir=out, **kwargs)
        load_full_state(trainer, ckpt_dir, meta)
        trainer.events.truncate(meta["n_events"])
        truncate_lines(trainer.metrics_path, meta["n_metric_lines"])
        trainer._started = True
        # snapshot directories written after this checkpoint belong to the abandoned timeline
        for d in sorted((out / CHECKPOINT_DIR).glob("step_*")):
            if int(d.name.split("_")[1]) > trainer.state.step:
                shutil.rmtree(d)
        log.info("resumed from %s at step %d", ckpt_dir, trainer.state.step)
        return trainer


def fork(ckpt_dir, cfg: ExperimentConfig, bank: ModelBank | None = None, dataset: torch.Tensor | None = None,
         out_dir=None) -> Trainer:
    """Continue a checkpoint of a run with no models added yet under a new config.

    Training before the first addition does not depend on K or the
    intervals, so forking a K=0 run at step W reproduces the state a
    from-scratch run with the new config would have at W.  Snapshots up to
    the fork step are copied so restore-best sees the same history.
    """
    ckpt_dir = Path(ckpt_dir)
    meta = json.loads((ckpt_dir / "state.json").read_text())
    if meta["selection"]["selected"]:
        raise ValueError("can only fork a checkpoint taken before any model was added")
    trainer = Trainer(cfg, bank=bank, dataset=dataset, out_dir=out_dir)
    if trainer.events.count:
        raise ValueError(f"{trainer.out} already holds a run")
    selection = trainer.state.selection
    meta["selection"] = selection.to_dict()
    load_full_state(trainer, ckpt_dir, meta)
    src_root = ckpt_dir.parent
    for snap in trainer.state.snapshots:
        src = src_root.parent / snap.path
        dst = trainer.out / snap.path
        if not dst.exists():
            shutil.copytree(src, dst)
    trainer._started = True
    trainer.events.emit(trainer.state.step, "fork", source=ckpt_dir.name, additions=trainer.schedule.additions,
                        total=trainer.schedule.total)
    return trainer


def _round(obj, ndigits: int = 6):
    if isinstance(obj, float):
        return round(obj, ndigits)
    if isinstance(obj, dict):
        return {k: _round(v, ndigits) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_round(v, ndigits) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# checkpoints: one directory per snapshot


def save_checkpoint(trainer: Trainer, ckpt_dir: Path) -> None:
    st = trainer.state
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    torch.save(st.generator.state_dict(), ckpt_dir / "generator.pt")
    torch.save(st.discriminator.state_dict(), ckpt_dir / "discriminator.pt")
    torch.save({v.model_id: v.head.state_dict() for v in st.vision}, ckpt_dir / "heads.pt")
    torch.save({"G": st.g_opt.state_dict(), "D": st.d_opt.state_dict(),
                "heads": {v.model_id: v.optimizer.state_dict() for v in st.vision}}, ckpt_dir / "optim.pt")
    torch.save({k: g.get_state() for k, g in st.rngs.items()}, ckpt_dir / "rng.pt")
    meta = {
        "step": st.step,
        "images_shown": st.images_shown,
        "selection": st.selection.to_dict(),
        "d_policy": asdict(st.d_policy),
        "d_smoothing": st.d_smoothing,
        "vision": [{"model_id": v.model_id, "init_seed": v.init_seed, "policy": asdict(v.policy),
                    "smoothing": v.smoothing, "probe": v.probe.to_dict() if v.probe else None}
                   for v in st.vision],
        "snapshots": [asdict(s) for s in st.snapshots],
        "sign_acc": st.sign_acc,
        "baseline_fid": trainer.baseline_fid,
        "stopped": trainer._stopped,
        "warm_started": trainer.warm_started,
        "n_events": trainer.events.count,
        "n_metric_lines": trainer._metric_lines(),
        "parameters": {
            "generator": {k: list(v.shape) for k, v in st.generator.state_dict().items()},
            "discriminator": {k: list(v.shape) for k, v in st.discriminator.state_dict().items()},
            "heads": {v.model_id: {k: list(p.shape) for k, p in v.head.state_dict().items()} for v in st.vision},
        },
        "config": trainer.cfg.to_dict(),
    }
    (ckpt_dir / "state.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_weights(st: EnsembleState, ckpt_dir: Path) -> None:
    ckpt_dir = Path(ckpt_dir)
    st.generator.load_state_dict(torch.load(ckpt_dir / "generator.pt", weights_only=True))
    st.discriminator.load_state_dict(torch.load(ckpt_dir / "discriminator.pt", weights_only=True))
    heads = torch.load(ckpt_dir / "heads.pt", weights_only=True)
    optim = torch.load(ckpt_dir / "optim.pt", weights_only=True)
    st.g_opt.load_state_dict(optim["G"])
    st.d_opt.load_state_dict(optim["D"])
    # heads added after this snapshot keep their current weights
    for v in st.vision:
        if v.model_id in heads:
            v.head.load_state_dict(heads[v.model_id])
            v.optimizer.load_state_dict(optim["heads"][v.model_id])


def load_full_state(trainer: Trainer, ckpt_dir: Path, meta: dict) -> None:
    st = trainer.state
    st.selection = SelectionState.from_dict(meta["selection"])
    st.d_policy = AugPolicy(**meta["d_policy"])
    st.d_smoothing = meta["d_smoothing"]
    st.vision.clear()
    for v in meta["vision"]:
        probe = ProbeResult(**v["probe"]) if v["probe"] else None
        add_vision_discriminator(st, v["model_id"], AugPolicy(**v["policy"]), v["smoothing"], probe, v["init_seed"])
    load_weights(st, ckpt_dir)
    for k, s in torch.load(ckpt_dir / "rng.pt", weights_only=True).items():
        st.rng(k).set_state(s)
    st.step = meta["step"]
    st.images_shown = meta["images_shown"]
    st.snapshots = [SnapshotRecord(**s) for s in meta["snapshots"]]
    st.sign_acc = {k: list(v) for k, v in meta["sign_acc"].items()}
    trainer.baseline_fid = meta["baseline_fid"]
    trainer._stopped = meta["stopped"]
    if meta["warm_started"]:
        trainer.warm_started = True
        trainer.schedule = resolve_schedule(trainer.cfg, len(trainer.dataset), warm_started=True)
        st.schedule = list(trainer.schedule.intervals)
