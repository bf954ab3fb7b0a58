"""Staged experiment runner with checkpointed, resumable stages."""

import csv
import hashlib
import io
import json
import os
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from omnifuse.checkpoint import load_checkpoint, save_checkpoint
from omnifuse.config import ExperimentConfig, dump_config
from omnifuse.distill import (
    DistillConfig,
    build_mt,
    build_student,
    compression_ratio,
    cosine_distances,
    distill_train,
    mt_train,
    posthoc_decoder_rrmse,
    student_encode,
    teacher_hash,
    teacher_param_count,
)
from omnifuse.engine import Rng, mlp
from omnifuse.fusion import AutoencoderConfig, decoder_widths, fit_fusion, fit_rescaler, latent_dim_rule
from omnifuse.metrics import rrmse
from omnifuse.transfer import (
    FrozenEncoder,
    TransferConfig,
    build_head,
    raw_pair_score,
    select_transfer,
    selection_from,
    transfer_train,
)
from omnifuse.world import extract_embeddings, gen_world, sample_task, sample_unsup, train_experts

STAGES = ("world", "experts", "extract", "fusion", "distill", "transfer", "select", "sweep")
COLUMNS = ("run_id", "seed", "stage", "task", "encoder", "mode", "metric", "value", "n", "n_missing")
OUT_ENV = "OMNIFUSE_OUT"

STAGE_ARTIFACTS = {
    "world": ["world"],
    "experts": ["bank"],
    "extract": ["pool", "pool_emb"],
    "fusion": ["rescaler"],  # plus one fusion-<kind> per fitted kind
    "distill": ["student"],
}


class StageFailed(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


@dataclass
class ReportRow:
    run_id: str
    seed: int
    stage: str
    task: str
    encoder: str
    mode: str
    metric: str
    value: float
    n: int
    n_missing: int = 0


def emit_report(rows, fmt, path):
    """Write rows with the fixed column order as ``csv`` or ``json``."""
    if not rows:
        raise ValueError("emit_report needs at least one row")
    dicts = [asdict(r) if isinstance(r, ReportRow) else {c: r[c] for c in COLUMNS} for r in rows]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for d in dicts:
            w.writerow([repr(float(d[c])) if c == "value" else d[c] for c in COLUMNS])
        path.write_text(buf.getvalue())
    elif fmt == "json":
        path.write_text(json.dumps([{c: d[c] for c in COLUMNS} for d in dicts], indent=1) + "\n")
    else:
        raise ValueError(f"report format must be csv or json, got {fmt!r}")
    return path


def read_report(path):
    path = Path(path)
    if path.suffix == ".json":
        return [ReportRow(**d) for d in json.loads(path.read_text())]
    with open(path, newline="") as f:
        return [ReportRow(r["run_id"], int(r["seed"]), r["stage"], r["task"], r["encoder"], r["mode"], r["metric"],
                          float(r["value"]), int(r["n"]), int(r["n_missing"])) for r in csv.DictReader(f)]


def output_root(cfg):
    return Path(os.environ.get(OUT_ENV) or cfg.output_dir or "runs")


class Run:
    """One run directory plus in-memory artifacts loaded on demand."""

    def __init__(self, cfg, root=None):
        self.cfg = cfg
        self.digest = cfg.digest()
        self.run_id = self.digest[:12]
        self.dir = Path(root) if root is not None else output_root(cfg) / self.run_id
        self.ckpt_dir = self.dir / "checkpoints"
        self.report_dir = self.dir / "reports"
        self.rng = Rng(cfg.seed)
        self.artifacts = {}
        self.dir.mkdir(parents=True, exist_ok=True)
        self.ckpt_dir.mkdir(exist_ok=True)
        (self.report_dir / "stages").mkdir(parents=True, exist_ok=True)
        lock = self.dir / "config.lock"
        text = f"# digest {self.digest}\n" + dump_config(cfg)
        if lock.exists() and not lock.read_text().startswith(f"# digest {self.digest}\n"):
            raise RuntimeError(f"{self.dir} belongs to a different config")
        lock.write_text(text)

    # artifacts
    def save(self, name, obj):
        self.artifacts[name] = obj
        save_checkpoint(obj, self.ckpt_dir / f"{name}.omnf", self.cfg.seed, self.digest)

    def get(self, name):
        if name not in self.artifacts:
            path = self.ckpt_dir / f"{name}.omnf"
            if not path.exists():
                raise FileNotFoundError(f"artifact {name!r} missing; run the stage that produces it first")
            self.artifacts[name] = load_checkpoint(path, expected_digest=self.digest)
        return self.artifacts[name]

    # stage bookkeeping
    def stage_file(self, stage):
        return self.report_dir / "stages" / f"{stage}.json"

    def stage_done(self, stage):
        if not self.stage_file(stage).exists():
            return False
        names = STAGE_ARTIFACTS.get(stage, [])
        if stage == "fusion":
            names = names + [f"fusion-{k}" for k in fusion_kinds(self.cfg)]
        return all((self.ckpt_dir / f"{n}.omnf").exists() for n in names)

    def write_stage(self, stage, rows):
        self.stage_file(stage).write_text(json.dumps([asdict(r) for r in rows], indent=1) + "\n")

    def stage_rows(self, stage):
        return [ReportRow(**d) for d in json.loads(self.stage_file(stage).read_text())]

    def log_time(self, stage, seconds, status):
        with open(self.dir / "timing.log", "a") as f:
            f.write(f"stage={stage} status={status} seconds={seconds:.3f}\n")

    def row(self, stage, task, encoder, mode, metric, value, n, n_missing=0):
        return ReportRow(self.run_id, self.cfg.seed, stage, task, encoder, mode, metric, float(value), int(n),
                         int(n_missing))


def fusion_kinds(cfg):
    return sorted(set(cfg.fusion.compare) | {cfg.fusion.kind})


def latent_for(cfg, bank):
    return cfg.fusion.latent or latent_dim_rule(bank.dims)


def ae_config(cfg, latent):
    f = cfg.fusion
    return AutoencoderConfig(latent, f.n_layers, f.epochs, f.lr, f.batch_size, f.noise_sigma, f.beta)


def distill_config(cfg, epochs=None):
    d = cfg.distill
    return DistillConfig(d.epochs if epochs is None else epochs, d.lr, d.batch_size)


def transfer_config(cfg):
    t = cfg.transfer
    return TransferConfig(t.epochs, t.lr, t.batch_size, t.encoder_lr_scale, t.n_folds)


# stages -------------------------------------------------------------------

def stage_world(run):
    world = gen_world(run.cfg.seed, run.cfg.world)
    run.save("world", world)
    return [run.row("world", "-", "-", "-", "d_x", world.cfg.d_x, 0)]


def stage_experts(run):
    bank = train_experts(run.get("world"), run.cfg.experts, run.rng.split("experts"))
    run.save("bank", bank)
    rows = []
    for e in bank.experts:
        metric = {"classification": "accuracy", "regression": "mae", "binary-attrs": "error_rate"}[e.spec.kind]
        rows.append(run.row("experts", e.spec.name, e.spec.name, "-", metric, e.val_metric, e.spec.n_val))
        rows.append(run.row("experts", e.spec.name, "chance", "-", metric, e.chance, e.spec.n_val))
    return rows


def stage_extract(run):
    cfg = run.cfg
    pool = sample_unsup(run.get("world"), cfg.pool.n, cfg.pool.domain_id, run.rng.split("pool"))
    emb = extract_embeddings(run.get("bank"), pool.observations)
    run.save("pool", pool)
    run.save("pool_emb", emb)
    return [run.row("extract", name, name, "-", "width", m.shape[1], m.shape[0]) for name, m in zip(emb.names, emb.matrices)]


def _recon_rrmse(op, emb_rescaled, rows):
    truth = emb_rescaled.take(rows)
    recon = op.decode(op.encode(truth))
    return [rrmse(r, t) for r, t in zip(recon.matrices, truth.matrices)]


def stage_fusion(run):
    cfg, pool, emb, bank = run.cfg, run.get("pool"), run.get("pool_emb"), run.get("bank")
    tr, va, te = pool.indices("train"), pool.indices("val"), pool.indices("test")
    rescaler = fit_rescaler(emb.take(tr))
    run.save("rescaler", rescaler)
    scaled = rescaler.apply(emb)
    x = scaled.concat()
    latent = latent_for(cfg, bank)
    rows = []
    for kind in fusion_kinds(cfg):
        k = x.shape[1] if kind == "concat" else latent
        op, _ = fit_fusion(kind, x[tr], x[va], k, run.rng.split("fusion").split(kind), scaled.names, scaled.widths,
                           ae_config(cfg, k))
        run.save(f"fusion-{kind}", op)
        errs = _recon_rrmse(op, scaled, te)
        for name, err in zip(scaled.names, errs):
            rows.append(run.row("fusion", name, kind, "-", "rrmse", err, len(te)))
        rows.append(run.row("fusion", "mean", kind, "-", "rrmse", np.mean(errs), len(te)))
    return rows


def stage_distill(run):
    cfg, pool, emb, bank = run.cfg, run.get("pool"), run.get("pool_emb"), run.get("bank")
    rescaler = run.get("rescaler")
    fusion = run.get(f"fusion-{cfg.fusion.kind}")
    scaled = rescaler.apply(emb)
    codes = fusion.encode(scaled)
    d_x, d_e = pool.observations.shape[1], codes.shape[1]
    hidden = tuple(cfg.distill.student_hidden)
    student = build_student(d_x, d_e, run.rng.split("student"), hidden, cfg.distill.student_mode)
    dcfg = distill_config(cfg)
    student, hist = distill_train(student, (bank, rescaler, fusion), pool, dcfg, run.rng.split("step2"),
                                  targets=codes)
    run.save("student", student)
    te = pool.indices("test")
    rows = []
    dist, _ = cosine_distances(student_encode(student, pool.observations[te]), codes[te])
    rows.append(run.row("distill", "pool", "S", "-", "cosine_distance", dist.mean(), len(te)))
    rows.append(run.row("distill", "pool", "S", "-", "best_epoch", hist["best_epoch"], len(te)))
    t_params = teacher_param_count(bank, fusion)
    s_params = student.n_params()
    rows.append(run.row("distill", "-", "teacher", "-", "params", t_params, 0))
    rows.append(run.row("distill", "-", "S", "-", "params", s_params, 0))
    rows.append(run.row("distill", "-", "S", "-", "compression_ratio", compression_ratio(t_params, s_params), 0))
    if not cfg.distill.mt:
        return rows
    dw = decoder_widths(scaled.concat().shape[1], d_e, cfg.fusion.n_layers)
    mt = build_mt(d_x, dw, run.rng.split("mt"), hidden)
    mt, _ = mt_train(mt, scaled, pool, dcfg, run.rng.split("step2"))
    run.save("mt", mt)
    pcfg = distill_config(cfg, cfg.distill.posthoc_epochs)
    reps = {"S": student_encode(student, pool.observations), "MT": mt.backbone.forward(pool.observations)}
    for label, rep in reps.items():
        errs = posthoc_decoder_rrmse(rep, scaled, pool, dw, pcfg, run.rng.split("posthoc"))
        for name, err in zip(scaled.names, errs):
            rows.append(run.row("distill", name, label, "posthoc", "rrmse", err, len(te)))
        rows.append(run.row("distill", "mean", label, "posthoc", "rrmse", np.mean(errs), len(te)))
    return rows


def task_data(run, task):
    return sample_task(run.get("world"), task, run.rng.split("tasks").split(task.name))


def teacher_encoder(bank, rescaler, fusion):
    def encode(x):
        return fusion.encode(rescaler.apply(extract_embeddings(bank, x)))

    def fingerprint():
        h = hashlib.sha256(teacher_hash(bank, fusion).encode())
        for arr in rescaler.lo + rescaler.hi:
            h.update(arr.tobytes())
        return h.hexdigest()

    return FrozenEncoder(encode, fingerprint, fusion.latent)


def _record(run, rows, stage, task, encoder, mode, res):
    rows.append(run.row(stage, task.name, encoder, mode, res.metric, res.value, res.n, res.n_missing))


def _scratch_cfg(tcfg):
    # a freshly initialised encoder trains at the head's learning rate
    return replace(tcfg, encoder_lr_scale=1.0)


def stage_transfer(run):
    cfg = run.cfg
    bank, rescaler = run.get("bank"), run.get("rescaler")
    fusion = run.get(f"fusion-{cfg.fusion.kind}")
    student = run.get("student")
    mt = run.get("mt") if cfg.distill.mt else None
    tcfg = transfer_config(cfg)
    world_cfg = cfg.world
    d_e = fusion.latent
    hidden = tuple(cfg.distill.student_hidden)
    modes = cfg.transfer.modes
    teacher = teacher_encoder(bank, rescaler, fusion)
    rows = []
    for task in cfg.transfer.tasks:
        data = task_data(run, task)
        rng = run.rng.split("transfer").split(task.name)
        pairs = task.kind == "identity-pairs"
        scaled = rescaler.apply(extract_embeddings(bank, data.observations))
        xcat = scaled.concat()

        def head_for(width, label="head"):
            return build_head(width, task, rng.split(label), world_cfg=world_cfg)

        # frozen fused codes, one per fitted operator
        for kind in fusion_kinds(cfg):
            op = run.get(f"fusion-{kind}")
            codes = op.encode(scaled)
            if pairs:
                res = raw_pair_score(None, data, task, tcfg.n_folds, inputs=codes)
            else:
                res = transfer_train(None, head_for(codes.shape[1], f"head-{kind}"), data, task, "CF", tcfg,
                                     rng.split(f"fusion-{kind}"), inputs=codes)
            _record(run, rows, "transfer", task, f"fusion:{kind}", "CF", res)

        # concatenation fed to a fresh network shaped like the fusion encoder
        widths = decoder_widths(xcat.shape[1], d_e, cfg.fusion.n_layers)[::-1]
        net = mlp(widths, ["tanh"] * (len(widths) - 2) + ["identity"], rng.split("concat-mlp.init"), "concat_mlp")
        res = transfer_train(net, head_for(d_e), data, task, "WF", _scratch_cfg(tcfg), rng.split("concat-mlp"),
                             inputs=xcat)
        _record(run, rows, "transfer", task, "concat-mlp", "WF", res)

        # teacher path end to end, frozen
        if pairs:
            res = raw_pair_score(teacher, data, task, tcfg.n_folds)
        else:
            res = transfer_train(teacher, head_for(d_e), data, task, "CF", tcfg, rng.split("teacher"))
        _record(run, rows, "transfer", task, "teacher", "CF", res)

        # student and MT backbones
        encoders = [("S", student.backbone)] + ([("MT", mt.backbone)] if mt is not None else [])
        for label, backbone in encoders:
            for mode in modes:
                if mode == "CF" and pairs:
                    res = raw_pair_score(backbone, data, task, tcfg.n_folds)
                else:
                    enc = backbone if mode == "CF" else backbone.copy()
                    res = transfer_train(enc, head_for(d_e), data, task, mode, tcfg, rng.split(f"{label}-{mode}"))
                _record(run, rows, "transfer", task, label, mode, res)

        # student architecture trained from scratch on the task alone
        scratch = build_student(data.observations.shape[1], d_e, rng.split("cnn.init"), hidden,
                                cfg.distill.student_mode).backbone
        res = transfer_train(scratch, head_for(d_e), data, task, "WF", _scratch_cfg(tcfg), rng.split("cnn"))
        _record(run, rows, "transfer", task, "cnn", "WF", res)
    return rows


def stage_select(run):
    """BT and BCT from one enumeration of every modality subset."""
    cfg = run.cfg
    bank, rescaler = run.get("bank"), run.get("rescaler")
    tcfg = transfer_config(cfg)
    rows = []
    for task in cfg.transfer.tasks:
        data = task_data(run, task)
        scaled = rescaler.apply(extract_embeddings(bank, data.observations))
        rng = run.rng.split("select").split(task.name)
        full = select_transfer(scaled, data, task, "all_subsets", tcfg, rng, world_cfg=cfg.world)
        bt = selection_from(full.candidates, full.results, scaled.names, task.metric, keep=lambda s: len(s) == 1)
        for label, sel in (("BT", bt), ("BCT", full)):
            rows.append(run.row("select", task.name, label, "+".join(sel.names), task.metric, sel.value, sel.n,
                                sel.n_missing))
            rows.append(run.row("select", task.name, label, "+".join(sel.names), f"val_{task.metric}",
                                sel.val_value, len(data.indices("val"))))
    return rows


def sweep_latent(run, dims, transfer=False):
    """Refit the configured fusion kind at each latent width; one row per (dim, metric)."""
    dims = list(dims)
    if len(set(dims)) != len(dims):
        raise ValueError("duplicate latent dims")
    if dims != sorted(dims):
        raise ValueError("latent dims must be sorted ascending")
    cfg = run.cfg
    pool, emb, rescaler, bank = run.get("pool"), run.get("pool_emb"), run.get("rescaler"), run.get("bank")
    kind = cfg.fusion.kind if cfg.fusion.kind != "concat" else "ae"
    scaled = rescaler.apply(emb)
    x = scaled.concat()
    tr, va = pool.indices("train"), pool.indices("val")
    tcfg = transfer_config(cfg)
    rows, failures = [], []
    for d in dims:
        label = f"d{d}"
        try:
            op, _ = fit_fusion(kind, x[tr], x[va], d, run.rng.split("sweep").split(label), scaled.names,
                               scaled.widths, ae_config(cfg, d))
            errs = _recon_rrmse(op, scaled, va)
            rows.append(run.row("sweep", "mean", f"{kind}:{d}", "-", "rrmse", np.mean(errs), len(va)))
            if transfer:
                for task in cfg.transfer.tasks:
                    data = task_data(run, task)
                    codes = op.encode(rescaler.apply(extract_embeddings(bank, data.observations)))
                    trng = run.rng.split("sweep").split(label).split(task.name)
                    if task.kind == "identity-pairs":
                        res = raw_pair_score(None, data, task, tcfg.n_folds, inputs=codes)
                    else:
                        head = build_head(d, task, trng.split("head"), world_cfg=cfg.world) if d >= 2 else None
                        if head is None:
                            raise ValueError("latent width below 2 cannot feed a head")
                        res = transfer_train(None, head, data, task, "CF", tcfg, trng, inputs=codes)
                    _record(run, rows, "sweep", task, f"{kind}:{d}", "CF", res)
        except Exception as exc:  # one bad width must not end the sweep
            failures.append((d, repr(exc)))
            rows.append(run.row("sweep", "mean", f"{kind}:{d}", "-", "failed", 1.0, 0))
    return rows, failures


def stage_sweep(run):
    rows, failures = sweep_latent(run, run.cfg.sweep.dims, run.cfg.sweep.transfer)
    if failures:
        (run.report_dir / "sweep_failures.txt").write_text("".join(f"{d}\t{msg}\n" for d, msg in failures))
    return rows


STAGE_FUNCS = {
    "world": stage_world,
    "experts": stage_experts,
    "extract": stage_extract,
    "fusion": stage_fusion,
    "distill": stage_distill,
    "transfer": stage_transfer,
    "select": stage_select,
    "sweep": stage_sweep,
}


def plan_stages(cfg, upto=None, only=None):
    """Stages to execute, in order; ``upto`` also runs its prerequisites."""
    if only is not None:
        return [s for s in STAGES if s in only]
    if upto == "sweep":
        return [s for s in STAGES if s not in ("transfer", "select")]
    stages = [s for s in STAGES if s != "sweep" or (upto is None and cfg.sweep.dims)]
    if upto is not None:
        stages = stages[:stages.index(upto) + 1]
    if not cfg.transfer.select and upto != "select":
        stages = [s for s in stages if s != "select"]
    return stages


def run_pipeline(cfg, run_dir=None, upto=None, only=None, resume=True, log=None):
    """Execute stages in order; finished stages are reused when ``resume`` is set."""
    if not isinstance(cfg, ExperimentConfig):
        raise TypeError("run_pipeline expects an ExperimentConfig")
    cfg.validate()
    run = Run(cfg, run_dir)
    executed = []
    for stage in plan_stages(cfg, upto, only):
        if resume and run.stage_done(stage):
            run.log_time(stage, 0.0, "cached")
            continue
        t0 = time.perf_counter()
        try:
            rows = STAGE_FUNCS[stage](run)
        except Exception as exc:
            run.log_time(stage, time.perf_counter() - t0, "failed")
            raise StageFailed(stage, exc) from exc
        run.write_stage(stage, rows)
        run.log_time(stage, time.perf_counter() - t0, "ran")
        executed.append(stage)
        if log:
            log(f"{stage}: {time.perf_counter() - t0:.1f}s, {len(rows)} rows")
    write_reports(run)
    return run, executed


def collect_rows(run):
    rows = []
    for stage in STAGES:
        if run.stage_file(stage).exists():
            rows.extend(run.stage_rows(stage))
    return rows


def write_reports(run):
    rows = collect_rows(run)
    if rows:
        emit_report(rows, "csv", run.report_dir / "report.csv")
        emit_report(rows, "json", run.report_dir / "report.json")
    return rows
