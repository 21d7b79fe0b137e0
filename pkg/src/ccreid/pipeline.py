"""Stage runners behind the command line.

A run directory holds one sub-directory per stage. Each stage writes its
artifacts first and its ``manifest.json`` last (atomically), so a stage counts
as complete only when the manifest exists and its recorded output checksums
still match. Manifests also record the hash of the configuration sections the
stage depends on, the checksums of its inputs and source provenance.
"""
from __future__ import annotations

import csv
import io
import platform
import subprocess
from pathlib import Path

import numpy as np

from . import tensorio
from .config import RunConfig
from .diffusion import Denoiser, make_schedule, train_denoiser, inpaint
from .errors import ArtifactError, ConfigError
from .expansion import GeneratedSet, expand_dataset, sample_clothes_ids, source_generators
from .guidance import Discriminator, GuidanceHook, train_discriminator
from .reid import EmbeddingModel, train as train_reid_model
from .retrieval import FeatureMatrix, Protocol, Refinement, embed, evaluate, make_query_variants
from .synthdata import gen_dataset, load_dataset, one_hot, save_dataset

MANIFEST_FORMAT = "ccreid-manifest/1"

# stage -> (directory, command that produces it)
STAGES = {
    "data": ("data", "gen-data"),
    "diffusion": ("diffusion", "train-diffusion"),
    "disc": ("disc", "train-disc"),
    "generated": ("generated", "expand"),
    "variants": ("variants", "evaluate --refine"),
}

_DATA = ("dataset",)
_DIFF = _DATA + ("schedule", "denoiser", "diffusion")


def _deps(stage: str, config: RunConfig) -> tuple:
    if stage == "data":
        return _DATA
    if stage == "diffusion":
        return _DIFF
    if stage == "disc":
        return _DIFF + ("guidance.train", "guidance.n_generated")
    if stage == "generated":
        return _DIFF + ("guidance", "expansion")
    if stage == "variants":
        return _DIFF + ("guidance", "refinement")
    if stage.startswith("reid/"):
        if stage == "reid/baseline":
            return _DATA + ("reid",)
        return _DIFF + ("guidance", "expansion", "reid")
    raise KeyError(stage)


def provenance() -> dict:
    here = Path(__file__).resolve().parent

    def git(*args):
        try:
            out = subprocess.run(["git", "-C", str(here), *args], capture_output=True,
                                 text=True, timeout=10)
        except (OSError, subprocess.SubprocessError):
            return None
        return out.stdout.strip() if out.returncode == 0 else None

    from . import __version__
    commit = git("rev-parse", "HEAD")
    status = git("status", "--porcelain", "--", str(here))
    return {"git_commit": commit or "unknown", "git_dirty": bool(status),
            "package_version": __version__, "python": platform.python_version(),
            "numpy": np.__version__}


def stage_dir(run, stage: str) -> Path:
    run = Path(run)
    return run / STAGES[stage][0] if stage in STAGES else run / stage


def _command_for(stage: str) -> str:
    if stage.startswith("reid/"):
        return f"train-reid --mode {stage.split('/', 1)[1]}"
    return STAGES[stage][1]


def write_manifest(run, stage: str, config: RunConfig, inputs, outputs, extra=None) -> Path:
    d = stage_dir(run, stage)
    deps = _deps(stage, config)
    manifest = {
        "format": MANIFEST_FORMAT,
        "stage": stage,
        "config_sections": list(deps),
        "config_hash": config.section_hash(*deps),
        "inputs": {str(Path(p).relative_to(run)): tensorio.sha256_file(p) for p in inputs},
        "outputs": {str(Path(p).relative_to(d)): tensorio.sha256_file(p) for p in outputs},
        "provenance": provenance(),
    }
    if extra:
        manifest.update(extra)
    tensorio.write_json(d / "manifest.json", manifest)
    return d / "manifest.json"


def stage_complete(run, stage: str, config: RunConfig) -> bool:
    try:
        require(run, stage, config)
    except ArtifactError:
        return False
    return True


def require(run, stage: str, config: RunConfig) -> dict:
    """Manifest of a finished prerequisite stage, or an ArtifactError naming the command to run."""
    d = stage_dir(run, stage)
    path = d / "manifest.json"
    hint = f"run `ccreid {_command_for(stage)} --out {run}` first"
    if not path.exists():
        raise ArtifactError(f"missing {stage} artifacts in {d}; {hint}")
    m = tensorio.read_json(path)
    if m.get("format") != MANIFEST_FORMAT:
        raise ArtifactError(f"{path}: unsupported manifest format {m.get('format')!r}; {hint}")
    if m.get("config_hash") != config.section_hash(*_deps(stage, config)):
        raise ArtifactError(f"{stage} artifacts in {d} were built with a different configuration; "
                            f"re-{hint.split(' ', 1)[1]}")
    for rel, digest in m["outputs"].items():
        f = d / rel
        if not f.exists() or tensorio.sha256_file(f) != digest:
            raise ArtifactError(f"{f} is missing or modified; {hint}")
    return m


def save_config(run, config: RunConfig) -> Path:
    path = Path(run) / "config.json"
    tensorio.write_json(path, config.to_dict())
    return path


def _schedule(config: RunConfig):
    s = config.schedule
    return make_schedule(s.T, s.beta_start, s.beta_end, s.kind)


# -- stages -------------------------------------------------------------------

def gen_data(config: RunConfig, run, log=print):
    run = Path(run)
    ds = gen_dataset(config.dataset)
    d = stage_dir(run, "data")
    save_dataset(ds, d)
    write_manifest(run, "data", config, [], sorted(p for p in d.iterdir() if p.name != "manifest.json"),
                   {"sizes": {k: len(v) for k, v in ds.splits.items()}})
    log(f"dataset: train {len(ds.train)}, query {len(ds.query)}, gallery {len(ds.gallery)}, "
        f"{ds.n_clothes} training clothes IDs -> {d}")
    return ds


def load_data(config: RunConfig, run):
    require(run, "data", config)
    return load_dataset(stage_dir(run, "data"))


def train_diffusion(config: RunConfig, run, log=print):
    run = Path(run)
    ds = load_data(config, run)
    schedule = _schedule(config)
    dc = config.denoiser
    rng = np.random.default_rng(config.diffusion.seed)
    den = Denoiser(ds.image_shape, ds.n_clothes, dc.hidden, dc.time_dim, rng=rng,
                   cond_scale=dc.cond_scale, data_std=dc.data_std, schedule=schedule)
    tr = ds.train
    losses = train_denoiser(den, tr.images, one_hot(tr.clothes, ds.n_clothes), schedule,
                            config.diffusion, rng=rng)
    d = stage_dir(run, "diffusion")
    tensorio.save_params(d, den.params, den.arch())
    tensorio.write_tensor(d / "losses.dlt", losses)
    tail = float(np.mean(losses[-100:])) if len(losses) else float("nan")
    write_manifest(run, "diffusion", config, [stage_dir(run, "data") / "manifest.json"],
                   [d / "params.dlt", d / "model.json", d / "losses.dlt"], {"final_loss": tail})
    log(f"denoiser: {config.diffusion.steps} steps, final loss {tail:.3f} -> {d}")
    return den


def load_denoiser(config: RunConfig, run):
    require(run, "diffusion", config)
    params, arch = tensorio.load_params(stage_dir(run, "diffusion"))
    return Denoiser.from_arch(arch, params, schedule=_schedule(config))


def _disc_fake_set(ds, den, schedule, n: int, seed: int):
    """Inpaintings of ``n`` training images (one random target clothes ID each)."""
    tr = ds.train
    idx = np.random.default_rng([seed, 1]).choice(len(tr), size=min(n, len(tr)), replace=False)
    ids, rngs = [], []
    for i in idx:
        gens = source_generators(seed, int(i), 1)
        ids.extend(sample_clothes_ids(ds.train_clothes, int(tr.clothes[i]), 1, gens[0]))
        rngs.append(gens[1])
    return inpaint(den, tr.images[idx], tr.masks[idx], one_hot(ids, ds.n_clothes), schedule, rngs)


def train_disc(config: RunConfig, run, log=print):
    run = Path(run)
    ds = load_data(config, run)
    den = load_denoiser(config, run)
    schedule = _schedule(config)
    gc = config.guidance
    fake = _disc_fake_set(ds, den, schedule, gc.n_generated, gc.train.seed)
    disc, losses = train_discriminator(ds.train.images, fake, schedule, gc.train,
                                       rng=np.random.default_rng(gc.train.seed))
    d = stage_dir(run, "disc")
    tensorio.save_params(d, disc.params, disc.arch())
    tensorio.write_tensor(d / "losses.dlt", losses)
    tail = float(np.mean(losses[-100:])) if len(losses) else float("nan")
    write_manifest(run, "disc", config, [stage_dir(run, "diffusion") / "manifest.json"],
                   [d / "params.dlt", d / "model.json", d / "losses.dlt"], {"final_loss": tail})
    log(f"discriminator: {gc.train.steps} steps, final loss {tail:.3f} -> {d}")
    return disc


def load_guidance(config: RunConfig, run):
    if not config.guidance.enabled:
        return None
    require(run, "disc", config)
    params, arch = tensorio.load_params(stage_dir(run, "disc"))
    return GuidanceHook(Discriminator.from_arch(arch, params), config.guidance.weight)


def expand(config: RunConfig, run, log=print):
    run = Path(run)
    ds = load_data(config, run)
    den = load_denoiser(config, run)
    hook = load_guidance(config, run)
    ec = config.expansion
    d = stage_dir(run, "generated")
    chunks = d / "chunks"
    # chunk files from an interrupted run are only reusable under the same configuration
    key = config.section_hash(*_deps("generated", config))
    key_file = chunks / "config_hash"
    if chunks.exists() and (not key_file.exists() or key_file.read_text() != key):
        for f in chunks.glob("chunk_*.dlt"):
            f.unlink()
    chunks.mkdir(parents=True, exist_ok=True)
    tensorio.atomic_write_bytes(key_file, key.encode())
    gen = expand_dataset(ds, den, _schedule(config), ec.K, hook, ec.seed, ec.chunk, chunks,
                         progress=lambda done, total: None)
    gen.save(d)
    inputs = [stage_dir(run, "diffusion") / "manifest.json"]
    if hook is not None:
        inputs.append(stage_dir(run, "disc") / "manifest.json")
    write_manifest(run, "generated", config, inputs, [d / "generated.dlt", d / "generated.json"],
                   {"records": len(gen)})
    log(f"expansion: {len(ds.train)} originals x K={ec.K} -> {len(gen)} generated records -> {d}")
    return gen


def load_generated(config: RunConfig, run):
    require(run, "generated", config)
    return GeneratedSet.load(stage_dir(run, "generated"))


def train_reid(config: RunConfig, run, log=print, generated=None, tag=None):
    """Train one re-id model; ``generated``/``tag`` let sweeps substitute a sub-set."""
    run = Path(run)
    ds = load_data(config, run)
    mode = config.reid.mode
    if generated is None and mode != "baseline":
        generated = load_generated(config, run)
    result = train_reid_model(ds, generated, config.reid)
    stage = tag or f"reid/{mode}"
    d = stage_dir(run, stage)
    tensorio.save_params(d, result.model.params, result.model.arch())
    lines = "".join(tensorio.dumps_json(s).replace("\n", " ").strip() + "\n" for s in result.stats)
    tensorio.atomic_write_bytes(d / "stats.jsonl", lines.encode("utf-8"))
    if tag is None:
        inputs = [stage_dir(run, "data") / "manifest.json"]
        if mode != "baseline":
            inputs.append(stage_dir(run, "generated") / "manifest.json")
        write_manifest(run, stage, config, inputs, [d / "params.dlt", d / "model.json"],
                       {"epochs": config.reid.epochs})
    last = result.stats[-1] if result.stats else {}
    log(f"re-id ({mode}): {config.reid.epochs} epochs, last loss {last.get('loss', float('nan')):.4f}, "
        f"val top-1 {last.get('val_top1')} -> {d}")
    return result


def load_reid(config: RunConfig, run, mode: str | None = None):
    cfg = config
    if mode is not None and mode != config.reid.mode:
        cfg = RunConfig.from_dict({**config.to_dict(), "reid": {**config.to_dict()["reid"], "mode": mode}})
    stage = f"reid/{cfg.reid.mode}"
    require(run, stage, cfg)
    params, arch = tensorio.load_params(stage_dir(run, stage))
    return EmbeddingModel.from_arch(arch, params)


def query_variants(config: RunConfig, run, ds=None, log=print):
    """Cached (n_query, l, H, W) inpainted query variants."""
    run = Path(run)
    d = stage_dir(run, "variants")
    path = d / "query_variants.dlt"
    if stage_complete(run, "variants", config):
        return tensorio.read_tensor(path)
    ds = load_data(config, run) if ds is None else ds
    den = load_denoiser(config, run)
    hook = load_guidance(config, run)
    rc = config.refinement
    v = make_query_variants(ds, den, _schedule(config), rc.l, rc.seed, hook)
    tensorio.write_tensor(path, v)
    write_manifest(run, "variants", config, [stage_dir(run, "diffusion") / "manifest.json"], [path])
    log(f"query variants: {len(ds.query)} queries x l={rc.l} -> {path}")
    return v


def eval_name(mode: str, refine: bool) -> str:
    return f"{mode}+refine" if refine else mode


def evaluate_run(config: RunConfig, run, refine: bool = False, model=None, log=print,
                 out_name: str | None = None) -> dict:
    run = Path(run)
    ds = load_data(config, run)
    model = load_reid(config, run) if model is None else model
    q, g = ds.query, ds.gallery
    qf = embed(model, q.images, q.subjects, q.clothes, q.cameras)
    gf = embed(model, g.images, g.subjects, g.clothes, g.cameras)
    refinement = None
    if refine:
        rc = config.refinement
        if rc.l > 0:
            v = query_variants(config, run, ds, log)
            vf = model.embed(v.reshape(-1, *ds.image_shape)).reshape(len(q), rc.l, -1)
        else:
            vf = np.zeros((len(q), 0, qf.feats.shape[1]))
        refinement = Refinement(vf, rc.m)
    report = evaluate(qf, gf, Protocol(), refinement).to_dict()
    name = out_name or eval_name(config.reid.mode, refine)
    tensorio.write_json(run / "eval" / f"{name}.json", report)
    log(f"evaluate ({name}): top-1 {report['top1']:.4f}, mAP {report['mAP']:.4f} "
        f"over {report['n_query']} queries / {report['n_gallery']} gallery")
    return report


# -- reporting ----------------------------------------------------------------

ABLATION_RUNS = ("baseline", "baseline+refine", "merged", "merged+refine",
                 "progressive", "progressive+refine")


def ablation_rows(run) -> list:
    """2^3 toggle grid over (generated data, progressive pairing, refinement).

    Progressive pairing without generated data has nothing to pair with and so
    reduces to the originals-only baseline; those rows reuse the baseline runs.
    """
    run = Path(run)
    missing = [n for n in ABLATION_RUNS if not (run / "eval" / f"{n}.json").exists()]
    if missing:
        raise ArtifactError("incomplete runs: " + ", ".join(missing))
    rows = []
    for gen in (0, 1):
        for prog in (0, 1):
            for ref in (0, 1):
                mode = "baseline" if not gen else ("progressive" if prog else "merged")
                m = tensorio.read_json(run / "eval" / f"{eval_name(mode, bool(ref))}.json")
                rows.append({"generated_data": gen, "progressive": prog, "refinement": ref,
                             "source_run": eval_name(mode, bool(ref)),
                             "top1": m["top1"], "mAP": m["mAP"]})
    return rows


def _csv_text(rows, fields) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: r[k] for k in fields})
    return buf.getvalue()


def write_csv(path, rows, fields) -> None:
    tensorio.atomic_write_bytes(path, _csv_text(rows, fields).encode("utf-8"))


def k_sweep_rows(run) -> list:
    files = sorted((Path(run) / "ksweep").glob("K*.json"), key=lambda p: int(p.stem[1:]))
    rows = []
    for f in files:
        m = tensorio.read_json(f)
        rows.append({"K": int(f.stem[1:]), "top1": m["top1"], "mAP": m["mAP"]})
    return rows


def k_sweep_svg(rows) -> str:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "ccreid"
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ks = [r["K"] for r in rows]
    ax.plot(ks, [r["top1"] for r in rows], "o-", label="top-1")
    ax.plot(ks, [r["mAP"] for r in rows], "s--", label="mAP")
    ax.set_xlabel("generated variants per image (K)")
    ax.set_ylabel("score")
    ax.set_ylim(0, 1.02)
    ax.legend(loc="lower right")
    fig.tight_layout()
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    return buf.getvalue()


def pca_rows(model, ds, gen, n: int = 400, seed: int = 0) -> list:
    """2-D PCA of real and generated training embeddings (shared projection)."""
    rng = np.random.default_rng(seed)
    ri = np.sort(rng.choice(len(ds.train), size=min(n, len(ds.train)), replace=False))
    gi = np.sort(rng.choice(len(gen), size=min(n, len(gen)), replace=False))
    feats = np.vstack([model.embed(ds.train.images[ri]), model.embed(gen.images[gi])])
    centred = feats - feats.mean(axis=0)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    # fix the sign of each axis so the output is deterministic
    vt = vt[:2] * np.sign(vt[:2, np.argmax(np.abs(vt[:2]), axis=1)].diagonal())[:, None]
    pc = centred @ vt.T
    rows = []
    for k, (kind, subj, cl) in enumerate(
            [("real", ds.train.subjects[i], ds.train.clothes[i]) for i in ri]
            + [("generated", gen.subjects[i], gen.clothes[i]) for i in gi]):
        rows.append({"kind": kind, "subject": int(subj), "clothes": int(cl),
                     "pc1": float(pc[k, 0]), "pc2": float(pc[k, 1])})
    return rows


def report(config: RunConfig, run, log=print) -> dict:
    run = Path(run)
    out = run / "report"
    rows = ablation_rows(run)
    write_csv(out / "ablation.csv", rows,
              ["generated_data", "progressive", "refinement", "source_run", "top1", "mAP"])
    written = [out / "ablation.csv"]
    ks = k_sweep_rows(run)
    monotone = None
    if ks:
        tops = [r["top1"] for r in ks]
        monotone = bool(all(b >= a for a, b in zip(tops, tops[1:])))
        for r in ks:
            r["top1_monotone_nondecreasing"] = monotone
        write_csv(out / "k_sweep.csv", ks, ["K", "top1", "mAP", "top1_monotone_nondecreasing"])
        tensorio.atomic_write_bytes(out / "k_sweep.svg", k_sweep_svg(ks).encode("utf-8"))
        written += [out / "k_sweep.csv", out / "k_sweep.svg"]
    else:
        log("no K-sweep results under ksweep/; run scripts/k_sweep.py to add them")
    ds = load_data(config, run)
    model = load_reid(config, run, "progressive")
    gen = load_generated(config, run)
    write_csv(out / "pca.csv", pca_rows(model, ds, gen), ["kind", "subject", "clothes", "pc1", "pc2"])
    written.append(out / "pca.csv")
    summary = {"ablation": rows, "k_sweep": ks, "k_sweep_top1_monotone": monotone,
               "files": [str(p.relative_to(run)) for p in written]}
    tensorio.write_json(out / "summary.json", summary)
    for r in rows:
        log(f"  gen={r['generated_data']} prog={r['progressive']} refine={r['refinement']}: "
            f"top-1 {r['top1']:.4f} mAP {r['mAP']:.4f}")
    return summary


# -- compound drivers -----------------------------------------------------------

def with_mode(config: RunConfig, mode: str) -> RunConfig:
    d = config.to_dict()
    d["reid"]["mode"] = mode
    return RunConfig.from_dict(d)


def run_all(config: RunConfig, run, log=print, resume: bool = True) -> dict:
    """Every stage, all three training modes, with and without refinement, then the report."""
    run = Path(run)
    config.validate()
    save_config(run, config)
    steps = [("data", gen_data), ("diffusion", train_diffusion)]
    if config.guidance.enabled:
        steps.append(("disc", train_disc))
    steps.append(("generated", expand))
    for stage, fn in steps:
        if resume and stage_complete(run, stage, config):
            log(f"{stage}: up to date")
            continue
        fn(config, run, log=log)
    results = {}
    for mode in ("baseline", "merged", "progressive"):
        cfg = with_mode(config, mode)
        if not (resume and stage_complete(run, f"reid/{mode}", cfg)):
            train_reid(cfg, run, log=log)
        for refine in (False, True):
            results[eval_name(mode, refine)] = evaluate_run(cfg, run, refine, log=log)
    report(config, run, log=log)
    return results


def k_sweep(config: RunConfig, run, ks=(0, 4, 6, 8, 10), log=print) -> list:
    """Progressive training on the first K variants of each image (K=0: originals only)."""
    run = Path(run)
    gen = load_generated(config, run)
    rows = []
    for k in ks:
        if k > gen.k:
            raise ConfigError(f"K={k} exceeds the expansion's K={gen.k}")
        cfg = with_mode(config, "baseline" if k == 0 else "progressive")
        sub = None if k == 0 else gen.first_variants(k)
        result = train_reid(cfg, run, log=log, generated=sub, tag=f"ksweep/model_K{k}")
        m = evaluate_run(cfg, run, False, model=result.model, log=log, out_name=f"ksweep_K{k}")
        tensorio.write_json(run / "ksweep" / f"K{k}.json", m)
        rows.append({"K": k, "top1": m["top1"], "mAP": m["mAP"]})
    return rows
