# checkpoint_io.py
"""
Checkpoint and run-directory files.

A `.ckpt` file is one line of JSON (format version, model config, layout
segments, epoch index, metrics) followed by the parameter array as
little-endian float64 in layout order. A run directory holds
epoch_0000.ckpt ... epoch_TTTT.ckpt, run.json, and optimizer.npz when the
Adam state is known.
"""

import json
import os

import numpy as np

from errors import FormatError
from mini_model import ModelConfig, build_layout
from param_space import ParamLayout, ParamVector
from training import Adam, Checkpoint, TrainConfig, TrainRun

FORMAT_VERSION = 1


def checkpoint_name(epoch):
    return f"epoch_{epoch:04d}.ckpt"


def save_checkpoint(ckpt, path):
    params = ckpt.params
    config = params.layout.model_config
    header = {
        "format_version": FORMAT_VERSION,
        "label": params.label,
        "model_config": config.to_dict() if config is not None else None,
        "segments": params.layout.to_json(),
        "epoch_index": ckpt.epoch_index,
        "train_loss": ckpt.train_loss,
        "dev_loss": ckpt.dev_loss,
        "dev_error": ckpt.dev_error,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        f.write(params.values.astype("<f8").tobytes())


def load_checkpoint(path):
    if not os.path.exists(path):
        raise FormatError(f"checkpoint '{path}' not found")
    with open(path, "rb") as f:
        head_line = f.readline()
        body = f.read()
    try:
        header = json.loads(head_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: checkpoint header is not JSON ({e})")
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint format {header.get('format_version')!r}")

    if header["model_config"] is not None:
        config = ModelConfig(**header["model_config"])
        layout = build_layout(config)
        if layout.to_json() != header["segments"]:
            raise FormatError(f"{path}: stored layout does not match its model config")
    else:
        layout = ParamLayout.from_json(header["segments"])

    if len(body) != 8 * layout.total_len:
        raise FormatError(f"{path}: expected {8 * layout.total_len} parameter bytes, found {len(body)}")
    values = np.frombuffer(body, dtype="<f8").astype(np.float64)
    params = ParamVector(layout, values, header["label"])
    return Checkpoint(header["epoch_index"], params, header["train_loss"], header["dev_loss"], header["dev_error"])


def load_params(path):
    return load_checkpoint(path).params


def save_run(run, run_dir):
    os.makedirs(run_dir, exist_ok=True)
    for ckpt in run.checkpoints:
        save_checkpoint(ckpt, os.path.join(run_dir, checkpoint_name(ckpt.epoch_index)))
    meta = {
        "format_version": FORMAT_VERSION,
        "label": run.label,
        "provenance": run.provenance,
        "source": run.source,
        "task": run.task_name,
        "epochs": run.epochs,
        "train_config": run.config.to_dict(),
    }
    with open(os.path.join(run_dir, "run.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    if run.optimizer is not None:
        opt = run.optimizer
        np.savez(os.path.join(run_dir, "optimizer.npz"), m=opt.m, v=opt.v, t=np.array(opt.t),
                 hyper=np.array([opt.lr, opt.beta1, opt.beta2, opt.epsilon]))
    print(f"Saved run '{run.label}' ({run.epochs} epochs) to '{run_dir}'")


def is_run_dir(run_dir):
    return os.path.exists(os.path.join(run_dir, "run.json"))


def load_run(run_dir):
    meta_path = os.path.join(run_dir, "run.json")
    if not os.path.exists(meta_path):
        raise FormatError(f"'{run_dir}' is not a run directory (no run.json)")
    with open(meta_path, "r", encoding="utf-8") as f:
        meta = json.load(f)
    if meta.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{meta_path}: unsupported run format {meta.get('format_version')!r}")
    checkpoints = [load_checkpoint(os.path.join(run_dir, checkpoint_name(e))) for e in range(meta["epochs"] + 1)]

    optimizer = None
    opt_path = os.path.join(run_dir, "optimizer.npz")
    if os.path.exists(opt_path):
        with np.load(opt_path) as data:
            lr, beta1, beta2, eps = (float(x) for x in data["hyper"])
            optimizer = Adam(len(data["m"]), lr, beta1, beta2, eps)
            optimizer.m = data["m"].copy()
            optimizer.v = data["v"].copy()
            optimizer.t = int(data["t"])
    return TrainRun(TrainConfig(**meta["train_config"]), checkpoints, meta["provenance"], meta["label"],
                    meta["source"], meta["task"], optimizer)
