"""Command-line interface: a thin client of the HTTP service.

Start the service with ``canta serve``; every other command sends one request
to it (``--url`` or CANTA_URL points elsewhere). Long-running verbs (train,
adapt, clone, matrix) create server-side jobs and poll until completion
unless ``--no-wait`` is given.
"""

from __future__ import annotations

import json
import time

import click
import httpx

DEFAULT_URL = "http://127.0.0.1:8077"


def make_client(url: str) -> httpx.Client:
    """Build the HTTP client; tests replace this with an in-process transport."""
    return httpx.Client(base_url=url, timeout=httpx.Timeout(600.0, connect=10.0))


def _request(ctx, method: str, path: str, **kwargs):
    url = ctx.obj["url"]
    try:
        with make_client(url) as client:
            response = client.request(method, path, **kwargs)
    except httpx.ConnectError as exc:
        raise click.ClickException(
            f"cannot reach the canta service at {url} ({exc}); start it with 'canta serve'"
        )
    if response.status_code >= 400:
        try:
            detail = response.json().get("detail", response.text)
        except ValueError:
            detail = response.text
        raise click.ClickException(f"{path} failed ({response.status_code}): {detail}")
    return response.json()


def _print(data):
    click.echo(json.dumps(data, indent=2, sort_keys=True))


def _overrides(set_entries, steps=None, seed=None):
    from .config import parse_override

    out = {}
    for entry in set_entries or ():
        key, value = parse_override(entry)
        out[key] = value
    if steps is not None:
        out["train.max_steps"] = steps
    if seed is not None:
        out["train.seed"] = seed
        out["corpus.seed"] = seed
    return out or None


def _configured(config, set_entries, steps=None, seed=None):
    return {
        "config_path": config,
        "overrides": _overrides(set_entries, steps=steps, seed=seed),
    }


def _run_job(ctx, path: str, payload: dict, wait: bool):
    created = _request(ctx, "POST", path, json=payload)
    job_id = created["job_id"]
    if not wait:
        _print(created)
        return
    click.echo(f"job {job_id} ({created['kind']}) submitted; waiting...")
    last_step = None
    while True:
        status = _request(ctx, "GET", f"/jobs/{job_id}")
        progress = status.get("progress") or {}
        step = progress.get("step") or progress.get("stage")
        if step is not None and step != last_step:
            last_step = step
            if "loss" in progress:
                click.echo(
                    f"  step {progress['step']}  loss {progress['loss']:.4f}  "
                    f"recon {progress['recon']:.4f}  embed {progress['embed']:.4f}"
                )
            else:
                click.echo(f"  {step}")
        if status["state"] == "done":
            _print(status["result"])
            return
        if status["state"] == "error":
            raise click.ClickException(f"job {job_id} failed: {status['error']}")
        time.sleep(0.5)


@click.group()
@click.option("--url", envvar="CANTA_URL", default=DEFAULT_URL, show_default=True,
              help="base URL of the canta service")
@click.pass_context
def main(ctx, url):
    """Singing-voice timbre modelling: corpus, training, synthesis."""
    ctx.ensure_object(dict)
    ctx.obj["url"] = url


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8077, show_default=True, type=int)
def serve(host, port):
    """Run the canta HTTP service."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=host, port=port)


@main.command("gen-corpus")
@click.option("--out", "out_dir", required=True, help="output directory for feature containers")
@click.option("--config", type=click.Path(), default=None, help="TOML/JSON config file (server-side path)")
@click.option("--set", "set_entries", multiple=True, help="override, e.g. corpus.n_singers=5")
@click.option("--seed", type=int, default=None)
@click.option("--export-wav", is_flag=True, default=False, help="also write each utterance as WAV")
@click.pass_context
def gen_corpus(ctx, out_dir, config, set_entries, seed, export_wav):
    """Generate the synthetic labelled corpus and its feature containers."""
    payload = {"out_dir": out_dir, "export_wav": export_wav,
               **_configured(config, set_entries, seed=seed)}
    _print(_request(ctx, "POST", "/corpus/generate", json=payload))


@main.command()
@click.option("--item", "items", multiple=True, required=True,
              help="wav:phones:f0:singer_id (repeatable)")
@click.option("--out", "out_path", required=True)
@click.option("--stats-from", default=None, help="checkpoint whose F0 stats to reuse")
@click.option("--config", default=None)
@click.option("--set", "set_entries", multiple=True)
@click.pass_context
def features(ctx, items, out_path, stats_from, config, set_entries):
    """Extract features from WAV + phone timing + F0 files."""
    parsed = []
    for item in items:
        parts = item.rsplit(":", 3)
        if len(parts) != 4:
            raise click.ClickException(f"--item must be wav:phones:f0:singer_id, got {item!r}")
        parsed.append(
            {"wav": parts[0], "phones": parts[1], "f0": parts[2], "singer_id": int(parts[3])}
        )
    payload = {
        "items": parsed,
        "out_path": out_path,
        "stats_from": stats_from,
        **_configured(config, set_entries),
    }
    _print(_request(ctx, "POST", "/features/extract", json=payload))


@main.command()
@click.option("--features", "features_path", required=True)
@click.option("--out", "out_checkpoint", required=True)
@click.option("--config", default=None)
@click.option("--set", "set_entries", multiple=True)
@click.option("--steps", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--resume-from", default=None, help="checkpoint to resume")
@click.option("--wait/--no-wait", default=True)
@click.pass_context
def train(ctx, features_path, out_checkpoint, config, set_entries, steps, seed, resume_from, wait):
    """Supervised multi-singer training (phase A)."""
    payload = {
        "features_path": features_path,
        "out_checkpoint": out_checkpoint,
        "resume_from": resume_from,
        **_configured(config, set_entries, steps=steps, seed=seed),
    }
    _run_job(ctx, "/train", payload, wait)


@main.command()
@click.option("--checkpoint", required=True)
@click.option("--features", "features_path", required=True)
@click.option("--out", "out_checkpoint", required=True)
@click.option("--config", default=None)
@click.option("--set", "set_entries", multiple=True)
@click.option("--steps", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--from-scratch", is_flag=True, default=False,
              help="reinitialize the decoders instead of warm-starting")
@click.option("--wait/--no-wait", default=True)
@click.pass_context
def adapt(ctx, checkpoint, features_path, out_checkpoint, config, set_entries, steps, seed,
          from_scratch, wait):
    """Audio-only decoder adaptation to a new voice (phase B)."""
    payload = {
        "checkpoint": checkpoint,
        "features_path": features_path,
        "out_checkpoint": out_checkpoint,
        "from_scratch": from_scratch,
        **_configured(config, set_entries, steps=steps, seed=seed),
    }
    _run_job(ctx, "/adapt", payload, wait)


@main.command()
@click.option("--checkpoint", required=True)
@click.option("--features", "features_path", required=True)
@click.option("--out", "out_checkpoint", required=True)
@click.option("--config", default=None)
@click.option("--set", "set_entries", multiple=True)
@click.option("--steps", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--supervised", is_flag=True, default=False,
              help="fine-tune with labels instead of audio-only adaptation")
@click.option("--wait/--no-wait", default=True)
@click.pass_context
def clone(ctx, checkpoint, features_path, out_checkpoint, config, set_entries, steps, seed,
          supervised, wait):
    """Clone a voice from a small (~3 min) dataset."""
    payload = {
        "checkpoint": checkpoint,
        "features_path": features_path,
        "out_checkpoint": out_checkpoint,
        "supervised": supervised,
        **_configured(config, set_entries, steps=steps, seed=seed),
    }
    _run_job(ctx, "/clone", payload, wait)


@main.command()
@click.option("--checkpoint", required=True)
@click.option("--phones", "phone_file", required=True, help="phone timing file")
@click.option("--f0", "f0_file", required=True, help="F0 track file")
@click.option("--speaker", required=True, type=int)
@click.option("--out", "out_mel", required=True)
@click.option("--wav", "out_wav", default=None, help="also render audio (phase reconstruction)")
@click.pass_context
def synth(ctx, checkpoint, phone_file, f0_file, speaker, out_mel, out_wav):
    """Synthesize mel (and optional audio) from timed phones + F0."""
    payload = {
        "checkpoint": checkpoint,
        "phone_file": phone_file,
        "f0_file": f0_file,
        "speaker": speaker,
        "out_mel": out_mel,
        "out_wav": out_wav,
    }
    _print(_request(ctx, "POST", "/synthesize", json=payload))


@main.command()
@click.option("--checkpoint", required=True)
@click.option("--wav", "source_wav", required=True)
@click.option("--f0", "f0_file", required=True)
@click.option("--speaker", required=True, type=int)
@click.option("--out", "out_mel", required=True)
@click.pass_context
def convert(ctx, checkpoint, source_wav, f0_file, speaker, out_mel):
    """Voice conversion from a source WAV (F0 file required)."""
    payload = {
        "checkpoint": checkpoint,
        "source_wav": source_wav,
        "f0_file": f0_file,
        "speaker": speaker,
        "out_mel": out_mel,
    }
    _print(_request(ctx, "POST", "/convert", json=payload))


@main.command("eval")
@click.option("--checkpoint", required=True)
@click.option("--features", "features_path", required=True)
@click.option("--system", default="model")
@click.option("--out", "out_path", default=None,
              help="append the report to this line-delimited JSON file")
@click.pass_context
def eval_cmd(ctx, checkpoint, features_path, system, out_path):
    """Objective metrics of a checkpoint on a labelled validation set."""
    payload = {"checkpoint": checkpoint, "features_path": features_path,
               "system": system, "out_path": out_path}
    _print(_request(ctx, "POST", "/evaluate", json=payload))


@main.command()
@click.option("--corpus", "corpus_dir", required=True)
@click.option("--out", "out_dir", required=True)
@click.option("--config", default=None)
@click.option("--set", "set_entries", multiple=True)
@click.option("--pretrain-steps", type=int, default=None)
@click.option("--target-steps", type=int, default=None)
@click.option("--clone-steps", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--wait/--no-wait", default=True)
@click.pass_context
def matrix(ctx, corpus_dir, out_dir, config, set_entries, pretrain_steps, target_steps,
           clone_steps, seed, wait):
    """Supervised vs semi-supervised comparison (full-data and cloning)."""
    payload = {
        "corpus_dir": corpus_dir,
        "out_dir": out_dir,
        "pretrain_steps": pretrain_steps,
        "target_steps": target_steps,
        "clone_steps": clone_steps,
        **_configured(config, set_entries, seed=seed),
    }
    _run_job(ctx, "/experiments/matrix", payload, wait)


@main.command()
@click.option("--mel", "mel_path", required=True)
@click.option("--out", "out_png", required=True)
@click.option("--title", default=None)
@click.pass_context
def plot(ctx, mel_path, out_png, title):
    """Render a mel container as a PNG heatmap."""
    payload = {"mel_path": mel_path, "out_png": out_png, "title": title}
    _print(_request(ctx, "POST", "/plot", json=payload))


@main.command()
@click.argument("job_id", required=False)
@click.pass_context
def jobs(ctx, job_id):
    """List jobs, or show one job's status."""
    if job_id:
        _print(_request(ctx, "GET", f"/jobs/{job_id}"))
    else:
        _print(_request(ctx, "GET", "/jobs"))


if __name__ == "__main__":
    main()
