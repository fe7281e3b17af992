"""The three training phases, their checkpoints and the evaluation entry point.

Every random choice is keyed on ``(seed, stage, step)`` so a resumed run
replays exactly the batches an uninterrupted run would have drawn.
"""
from __future__ import annotations

import csv
import functools
import logging
import zlib
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt_mod
from . import core, data, losses
from .config import TrainConfig
from .contrastive import ContrastiveQueue, EncoderPair, contrastive_step
from .errors import CheckpointError, ConfigError, NumericError, ProtocolError
from .evaluation import MetricsReport, evaluate_model, write_report
from .networks import (
    TaskNetwork,
    build_discriminator,
    build_encoder,
    build_generator,
    build_projection_head,
    build_task_decoder,
)
from .optim import Adam

log = logging.getLogger(__name__)

STAGE_CODES = {"style": 1, "contrastive": 2, "task": 3}
TRANSLATE_CHUNK = 32


def net_seed(seed: int, role: str) -> int:
    """Stable per-network seed; independent of Python's hash randomisation."""
    return zlib.crc32(f"{seed}:{role}".encode())


def batch_indices(cfg: TrainConfig, step: int, n: int, stream: int = 0) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, STAGE_CODES[cfg.stage], stream, step])
    return rng.choice(n, size=min(cfg.batch_size, n), replace=False)


class StepLog:
    """``step,stage,loss_name,value`` records, one per line."""

    def __init__(self, path: Path | None, append: bool = False):
        self.path = path
        self._fh = None
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "a" if append else "w", newline="")
            self._writer = csv.writer(self._fh)
        self.records = []

    def write(self, step: int, stage: str, values: dict) -> None:
        for name, v in values.items():
            rec = (step, stage, name, repr(float(v)))
            self.records.append(rec)
            if self._fh is not None:
                self._writer.writerow(rec)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def _fast_cpu(fn):
    """Flush subnormals to zero for the duration of a training run.

    They appear mid-training and slow CPU kernels several-fold. The flag is
    process-global, so it is cleared again on the way out.
    """
    @functools.wraps(fn)
    def run(*args, **kwargs):
        torch.set_flush_denormal(True)
        try:
            return fn(*args, **kwargs)
        finally:
            torch.set_flush_denormal(False)

    return run


def _out_path(cfg: TrainConfig) -> Path:
    out = cfg.path("out")
    if out is None:
        raise ConfigError("config key 'out' (checkpoint path) is required")
    return out


def _log_path(cfg: TrainConfig, out: Path) -> Path:
    return cfg.path("log") or out.with_name(out.name + ".log")


def _check_dims(cfg: TrainConfig, data_dir: Path) -> None:
    man = data.read_manifest(data_dir)
    if (int(man["height"]), int(man["width"])) != (cfg.height, cfg.width):
        raise ConfigError(
            f"config dims {cfg.height}x{cfg.width} disagree with dataset {man['height']}x{man['width']}"
        )


def _images(data_dir, split, domain) -> torch.Tensor:
    imgs, _, _ = data.stack(data.load_split(data_dir, split, domain), labels=False)
    return torch.from_numpy(imgs)


@torch.no_grad()
def translate(G, images: torch.Tensor) -> torch.Tensor:
    """Apply a frozen generator in fixed-size chunks (chunking fixes the arithmetic)."""
    G.eval()
    return torch.cat([G(images[i : i + TRANSLATE_CHUNK]) for i in range(0, len(images), TRANSLATE_CHUNK)])


def _dump_nonfinite(out: Path, exc: Exception, **arrays) -> NumericError:
    dump = out.with_name(out.name + ".nonfinite.npz")
    np.savez(dump, **{k: v.detach().numpy() for k, v in arrays.items()})
    return NumericError(f"{exc}; offending batch written to {dump}")


def _resume(path, expected_stage: str) -> ckpt_mod.Checkpoint:
    ck = ckpt_mod.load(path)
    if ck.meta.get("stage") != expected_stage:
        raise CheckpointError(f"{path}: a {ck.meta.get('stage')!r} checkpoint cannot resume stage {expected_stage!r}")
    return ck


# --- stage 1 -------------------------------------------------------------------

def build_style_nets(seed: int) -> dict:
    return {
        "G_st": build_generator(net_seed(seed, "G_st"), "G_st"),
        "G_ts": build_generator(net_seed(seed, "G_ts"), "G_ts"),
        "D_s": build_discriminator(net_seed(seed, "D_s"), "D_s"),
        "D_t": build_discriminator(net_seed(seed, "D_t"), "D_t"),
    }


def _named(nets: dict, keys) -> dict:
    return {f"{k}.{n}": p for k in keys for n, p in nets[k].named_parameters()}


def style_step(nets: dict, xs, xt, w: losses.LossWeights, opt_g: Adam, opt_d: Adam) -> dict:
    """Generator update on the full style objective, then discriminator update."""
    G_st, G_ts, D_s, D_t = nets["G_st"], nets["G_ts"], nets["D_s"], nets["D_t"]
    for d in (D_s, D_t):
        d.requires_grad_(False)
    opt_g.zero_grad()
    fake_t = G_st(xs)
    fake_s = G_ts(xt)
    adv = losses.generator_loss(D_t(fake_t)) + losses.generator_loss(D_s(fake_s))
    cyc = losses.cycle_loss(xs, G_ts(fake_t)) + losses.cycle_loss(xt, G_st(fake_s))
    idt = losses.identity_loss(xt, G_st(xt)) + losses.identity_loss(xs, G_ts(xs))
    total_g = losses.style_total(adv, cyc, idt, w)
    core.backward(total_g, opt_g.params, retain_graph=False)
    opt_g.step()
    for d in (D_s, D_t):
        d.requires_grad_(True)

    opt_d.zero_grad()
    fake_t, fake_s = fake_t.detach(), fake_s.detach()
    loss_d_t = losses.discriminator_loss(D_t(xt), D_t(fake_t))
    loss_d_s = losses.discriminator_loss(D_s(xs), D_s(fake_s))
    core.backward(loss_d_t + loss_d_s, opt_d.params, retain_graph=False)
    opt_d.step()
    return {
        "adv_G": adv.item(),
        "cyc": cyc.item(),
        "idt": idt.item(),
        "cyc_weighted": w.lambda_cyc * cyc.item(),
        "idt_weighted": w.lambda_idt * idt.item(),
        "total_G": total_g.item(),
        "loss_D_s": loss_d_s.item(),
        "loss_D_t": loss_d_t.item(),
    }


@_fast_cpu
def train_style(cfg: TrainConfig, resume=None) -> Path:
    out = _out_path(cfg)
    data_dir = cfg.path("data_dir")
    _check_dims(cfg, data_dir)
    xs_all = _images(data_dir, "train", "source")
    xt_all = _images(data_dir, "train", "target")

    nets = build_style_nets(cfg.seed)
    w = losses.LossWeights(cfg.lambda_cyc, cfg.lambda_idt, cfg.tau)
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    opt_g = Adam(_named(nets, ("G_st", "G_ts")), cfg.learning_rate, betas)
    opt_d = Adam(_named(nets, ("D_s", "D_t")), cfg.learning_rate, betas)
    start = 0
    if resume is not None:
        ck = _resume(resume, "style")
        for k, net in nets.items():
            ck.load_network(k, net)
        ck.load_optimizer("G", opt_g)
        ck.load_optimizer("D", opt_d)
        start = ck.step

    steplog = StepLog(_log_path(cfg, out), append=resume is not None)
    try:
        for step in range(start, cfg.steps):
            xs = xs_all[batch_indices(cfg, step, len(xs_all), 0)]
            xt = xt_all[batch_indices(cfg, step, len(xt_all), 1)]
            try:
                rec = style_step(nets, xs, xt, w, opt_g, opt_d)
            except NumericError as exc:
                raise _dump_nonfinite(out, exc, x_s=xs, x_t=xt) from exc
            steplog.write(step, "style", rec)
            if step % 100 == 0 or step == cfg.steps - 1:
                log.info("style %d/%d G=%.4f cyc=%.4f D_t=%.4f", step, cfg.steps, rec["total_G"], rec["cyc"], rec["loss_D_t"])
    finally:
        steplog.close()

    ck = ckpt_mod.Checkpoint(meta={"stage": "style", "config": cfg.snapshot()}, step=max(start, cfg.steps))
    for k, net in nets.items():
        ck.add_network(k, net)
    ck.add_optimizer("G", opt_g)
    ck.add_optimizer("D", opt_d)
    return ckpt_mod.save(out, ck)


def load_generator(style_ckpt, which: str = "G_st"):
    ck = ckpt_mod.load(style_ckpt)
    if ck.meta.get("stage") != "style":
        raise CheckpointError(f"{style_ckpt}: not a style-transfer checkpoint")
    info = ck.meta["networks"][which]
    G = build_generator(info["seed"], which)
    ck.load_network(which, G)
    G.requires_grad_(False)
    return G


# --- stage 2 -------------------------------------------------------------------

def _pair_roles(cfg: TrainConfig):
    """(encoder prefix, generator, query domain images, stream id) per trained extractor."""
    roles = [("f_T", "G_st", "source", 0)]
    if cfg.direction == "bidirectional":
        roles.append(("f_S", "G_ts", "target", 1))
    return roles


@_fast_cpu
def train_contrastive(cfg: TrainConfig, resume=None) -> Path:
    out = _out_path(cfg)
    data_dir = cfg.path("data_dir")
    _check_dims(cfg, data_dir)
    style_path = cfg.path("style_ckpt")
    if style_path is None:
        raise ConfigError("stage 'contrastive' needs style_ckpt")

    runs = []
    for prefix, gen_key, domain, stream in _pair_roles(cfg):
        G = load_generator(style_path, gen_key)
        positives = _images(data_dir, "train", domain)
        queries = translate(G, positives)
        pair = EncoderPair.from_query(
            build_encoder(net_seed(cfg.seed, prefix), prefix),
            build_projection_head(net_seed(cfg.seed, prefix + ".psi"), prefix + ".psi"),
            m=cfg.momentum_m,
        )
        opt = Adam(pair.query_params(), cfg.learning_rate, (cfg.adam_beta1, cfg.adam_beta2))
        runs.append((prefix, stream, queries, positives, pair, opt, ContrastiveQueue(cfg.queue_capacity)))

    state_path = out.with_name(out.name + ".train-state")
    start = 0
    if resume is not None:
        ck = _resume(resume, "contrastive")
        state = _resume(Path(resume).with_name(Path(resume).name + ".train-state"), "contrastive-state")
        for prefix, _, _, _, pair, opt, _ in runs:
            ck.load_network(prefix, pair.query_net)
            state.load_network(prefix + ".psi", pair.query_head)
            state.load_network(prefix + ".key", pair.key_net)
            state.load_network(prefix + ".key_psi", pair.key_head)
            state.load_optimizer(prefix, opt)
        start = ck.step

    steplog = StepLog(_log_path(cfg, out), append=resume is not None)
    try:
        for step in range(start, cfg.steps):
            for prefix, stream, queries, positives, pair, opt, queue in runs:
                idx = batch_indices(cfg, step, len(positives), stream)
                loss = contrastive_step((queries[idx], positives[idx]), pair, queue, None, cfg.tau, opt)
                steplog.write(step, "contrastive", {f"info_nce_{prefix}": loss})
            if step % 100 == 0 or step == cfg.steps - 1:
                log.info("contrastive %d/%d loss=%.4f", step, cfg.steps, loss)
    finally:
        steplog.close()

    final = max(start, cfg.steps)
    ck = ckpt_mod.Checkpoint(meta={"stage": "contrastive", "config": cfg.snapshot()}, step=final)
    state = ckpt_mod.Checkpoint(meta={"stage": "contrastive-state"}, step=final)
    for prefix, _, _, _, pair, opt, _ in runs:
        # projection heads are discarded: only the query encoder is kept
        ck.add_network(prefix, pair.query_net)
        state.add_network(prefix + ".psi", pair.query_head)
        state.add_network(prefix + ".key", pair.key_net)
        state.add_network(prefix + ".key_psi", pair.key_head)
        state.add_optimizer(prefix, opt)
    ckpt_mod.save(state_path, state)
    return ckpt_mod.save(out, ck)


# --- stage 3 -------------------------------------------------------------------

def build_task_network(task: str, enc_seed: int, dec_seed: int) -> TaskNetwork:
    return TaskNetwork(build_encoder(enc_seed, "enc"), build_task_decoder(task, data.NUM_CLASSES, dec_seed, "dec"))


def task_loss(task: str, preds, depth, classes):
    if task == "depth":
        return losses.depth_loss(preds, depth)
    return losses.seg_loss(preds, classes)


@_fast_cpu
def train_task(cfg: TrainConfig, resume=None) -> Path:
    out = _out_path(cfg)
    data_dir = cfg.path("data_dir")
    _check_dims(cfg, data_dir)
    samples = data.load_split(data_dir, "train", "source")
    imgs, depth, classes = data.stack(samples)
    xs_all = torch.from_numpy(imgs)
    depth = torch.from_numpy(depth)
    classes = torch.from_numpy(classes.astype(np.int64))

    model = build_task_network(cfg.task, net_seed(cfg.seed, "task.enc"), net_seed(cfg.seed, f"task.dec.{cfg.task}"))
    if cfg.init == "dacl":
        style_path, con_path = cfg.path("style_ckpt"), cfg.path("contrastive_ckpt")
        if style_path is None or con_path is None:
            raise ConfigError("init = dacl needs style_ckpt and contrastive_ckpt")
        inputs = translate(load_generator(style_path, "G_st"), xs_all)
        con = ckpt_mod.load(con_path)
        if con.meta.get("stage") != "contrastive":
            raise CheckpointError(f"{con_path}: not a contrastive checkpoint")
        con.load_network("f_T", model.encoder)
    else:
        # source-only baseline: identity style map, randomly initialised encoder
        inputs = xs_all

    opt = Adam(dict(model.named_parameters()), cfg.learning_rate, (cfg.adam_beta1, cfg.adam_beta2))
    start = 0
    if resume is not None:
        ck = _resume(resume, "task")
        ck.load_network("enc", model.encoder)
        ck.load_network("dec", model.decoder)
        ck.load_optimizer("task", opt)
        start = ck.step

    steplog = StepLog(_log_path(cfg, out), append=resume is not None)
    model.train()
    try:
        for step in range(start, cfg.steps):
            idx = batch_indices(cfg, step, len(inputs))
            x = inputs[idx]
            opt.zero_grad()
            try:
                loss = task_loss(cfg.task, model(x), depth[idx], classes[idx])
                core.backward(loss, opt.params, retain_graph=False)
            except NumericError as exc:
                raise _dump_nonfinite(out, exc, x=x) from exc
            opt.step()
            steplog.write(step, "task", {f"{cfg.task}_loss": loss.item()})
            if step % 100 == 0 or step == cfg.steps - 1:
                log.info("task[%s/%s] %d/%d loss=%.4f", cfg.task, cfg.init, step, cfg.steps, loss.item())
    finally:
        steplog.close()

    ck = ckpt_mod.Checkpoint(
        meta={"stage": "task", "task": cfg.task, "init": cfg.init, "config": cfg.snapshot()},
        step=max(start, cfg.steps),
    )
    ck.add_network("enc", model.encoder)
    ck.add_network("dec", model.decoder)
    ck.add_optimizer("task", opt)
    return ckpt_mod.save(out, ck)


STAGE_RUNNERS = {"style": train_style, "contrastive": train_contrastive, "task": train_task}


# --- evaluation ----------------------------------------------------------------

def load_task_network(ckpt_path, task: str) -> TaskNetwork:
    ck = ckpt_mod.load(ckpt_path)
    if ck.meta.get("stage") != "task":
        raise CheckpointError(f"{ckpt_path}: not a task checkpoint")
    if ck.meta.get("task") != task:
        raise ConfigError(f"{ckpt_path}: trained for {ck.meta.get('task')!r}, evaluation asked for {task!r}")
    nets = ck.meta["networks"]
    model = build_task_network(task, nets["enc"]["seed"], nets["dec"]["seed"])
    ck.load_network("enc", model.encoder)
    ck.load_network("dec", model.decoder)
    return model


def evaluate(task: str, ckpt_path, data_dir, split: str = "test", cap_m: float = 80.0,
             out=None, dump_images: bool = False) -> MetricsReport:
    """Metrics of a task checkpoint on raw target-domain images of ``split``."""
    samples = data.load_split(data_dir, split, "target")
    if samples and not samples[0].has_labels:
        raise ProtocolError(f"{split}/target has no labels; only the test split is evaluable")
    model = load_task_network(ckpt_path, task)
    dump_dir = None
    if dump_images and out is not None:
        dump_dir = Path(out).with_name(Path(out).name + ".images")
    metrics = evaluate_model(model, task, samples, cap_m=cap_m, dump_dir=dump_dir)
    if out is not None:
        write_report(out, task, metrics)
    return MetricsReport(task=task, split=split, metrics=metrics)
