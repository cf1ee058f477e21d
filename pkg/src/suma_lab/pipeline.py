"""Seeded end-to-end runs: pretrain -> construct -> eliminate -> attack ->
eval -> report, with per-stage checkpoints, a hash manifest for resume, and
the ablation presets."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from . import erasure as E
from . import metrics as M
from . import red_team as R
from .concept_world import NearestCentroid, build_universe, by_id, sample_features
from .config import ABLATION_PRESETS, STAGES, ConfigInvalid, RunConfig
from .inversion import TiTrajectory, run_ti
from .toy_t2i import ToyT2I, build_model, concept_accuracy, model_from_tensors, pretrain

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
LOCK = ".lock"


class StageFailed(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


class LockHeld(RuntimeError):
    pass


def derive_seed(seed: int, *names) -> int:
    h = hashlib.sha256(("/".join([str(seed)] + [str(n) for n in names])).encode()).digest()
    return int.from_bytes(h[:8], "little")


def stage_rng(seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *names))


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_text(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def rows_to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def worst(rep: M.MetricsReport, key: str) -> float:
    vals = [d[key] for d in rep.per_concept.values() if d.get(key) is not None]
    return float(max(vals)) if vals else float("nan")


class Run:
    """One output directory. Stages record their files in the manifest; a
    stage whose files all still match their hashes is skipped on re-run."""

    def __init__(self, cfg: RunConfig, out):
        self.cfg = cfg
        self.out = Path(out)
        self.universe = build_universe(cfg.universe_seed, feature_dim=cfg.model.feature_dim)
        self.ids = by_id(self.universe)
        for c in list(cfg.concepts) + list(cfg.multi.concepts):
            if c not in self.ids:
                raise ConfigInvalid("concepts", f"unknown concept {c!r}")
            if self.ids[c].parent_id is None:
                raise ConfigInvalid("concepts", f"{c!r} has no parent to anchor to")
        self.clf = NearestCentroid(self.universe)
        extra = cfg.multi.concepts if "multi_IE_SE" in cfg.ablations else []
        self.constructed = list(dict.fromkeys(list(cfg.concepts) + list(extra)))
        self.manifest = {"config": cfg.fingerprint(), "stages": {}}
        self._cache: dict = {}

    # -- bookkeeping ------------------------------------------------------

    def path(self, name: str) -> Path:
        return self.out / name

    def _load_manifest(self):
        p = self.path(MANIFEST)
        if p.exists():
            m = json.loads(p.read_text())
            if m.get("config") == self.manifest["config"]:
                self.manifest = m
            else:
                log.info("config changed; ignoring previous manifest")

    def _save_manifest(self):
        write_text(self.path(MANIFEST), M.canonical_json(self.manifest))

    def done(self, stage: str) -> bool:
        files = self.manifest["stages"].get(stage)
        if files is None:
            return False
        for name, digest in files.items():
            p = self.path(name)
            if not p.exists() or sha256_file(p) != digest:
                return False
        return True

    def record(self, stage: str, names: Sequence[str]):
        self.manifest["stages"][stage] = {n: sha256_file(self.path(n)) for n in sorted(names)}
        self._save_manifest()

    def rng(self, *names) -> np.random.Generator:
        return stage_rng(self.cfg.seed, *names)

    def seed_for(self, *names) -> int:
        return derive_seed(self.cfg.seed, *names) & 0x7FFFFFFF

    def images(self, concept: str, purpose: str) -> np.ndarray:
        n = self.cfg.ti.n_images if purpose != "attack" else self.cfg.attack.n_images
        return sample_features(self.ids[concept], n, self.rng("images", concept, purpose))

    # -- stages -----------------------------------------------------------

    def stage_pretrain(self):
        cfg = self.cfg
        model = build_model(self.universe, cfg.model, seed=self.seed_for("model-init"))
        p = cfg.pretrain
        model, losses = pretrain(model, self.universe, p.steps, self.rng("pretrain"), batch=p.batch,
                                 lr=p.lr, lr_final=p.lr_final, clip=p.clip,
                                 generic_frac=p.generic_frac)
        model.save(self.path("model.suma"))
        acc = concept_accuracy(model, self.universe, self.clf, p.n_eval, self.seed_for("pretrain-eval"))
        k = max(1, min(500, losses.size // 10)) if losses.size else 1
        summary = {"accuracy": acc, "min_accuracy": min(acc.values()) if acc else None,
                   "loss_first": float(losses[:k].mean()) if losses.size else None,
                   "loss_last": float(losses[-k:].mean()) if losses.size else None,
                   "steps": p.steps}
        write_text(self.path("pretrain.json"), M.canonical_json(summary))
        return ["model.suma", "pretrain.json"]

    def model(self) -> ToyT2I:
        if "model" not in self._cache:
            self._cache["model"] = model_from_tensors(checkpoint.load(self.path("model.suma")),
                                                      self.universe, self.cfg.model)
        return self._cache["model"]

    def stage_construct(self):
        model = self.model()
        tensors, summary = {}, {}
        for cid in self.constructed:
            c = self.ids[cid]
            a = self.ids[c.parent_id]
            pair, _, chain = E.construct_subspaces(
                model, c, a, self.images(cid, "construct"), self.cfg.erasure, self.cfg.ti,
                self.rng("construct", cid), self.images(a.id, "anchor"))
            tensors.update(pair.tensors())
            for j, tr in enumerate(pair.trajectories):
                tr.target_concept = f"{cid}#{j}"
                tensors.update(tr.tensors())
            ph = model.encoder.placeholder_prompt()
            seed = self.seed_for("construct-eval", cid)
            summary[cid] = {
                "u_asr_on_own_model": [M.asr(chain[j], chain[j].cond(ph, u), self.clf, cid, 100, seed)
                                       for j, u in enumerate(pair.tokens_u)],
                "anchor": a.id,
            }
        checkpoint.save(self.path("construct.suma"), tensors)
        write_text(self.path("construct.json"), M.canonical_json(summary))
        return ["construct.suma", "construct.json"]

    def trajectories(self, cid: str) -> list:
        t = self._construct_tensors()
        out = []
        for j in range(self.cfg.erasure.l):
            out.append(TiTrajectory.from_tensors(t, f"{cid}#{j}"))
        return out

    def _construct_tensors(self):
        if "construct" not in self._cache:
            self._cache["construct"] = checkpoint.load(self.path("construct.suma"))
        return self._cache["construct"]

    def pair(self, cid: str, early_step: int | None = None) -> E.SubspacePair:
        step = self.cfg.erasure.early_step if early_step is None else early_step
        trajs = self.trajectories(cid)
        us = [tr.final() for tr in trajs]
        vs = [tr.token_at(step) for tr in trajs]
        return E.SubspacePair.build(self.model(), cid, self.ids[cid].parent_id, us, vs,
                                    self.cfg.erasure.kinds, trajs)

    def target(self, cid: str, early_step: int | None = None, ecfg=None) -> E.EraseTarget:
        c = self.ids[cid]
        a = self.ids[c.parent_id]
        return E.make_target(self.model(), c, a, self.images(cid, "construct"),
                             self.pair(cid, early_step), ecfg or self.cfg.erasure,
                             self.images(a.id, "anchor"))

    def eliminate(self, ecfg=None, early_step=None, multi_mode=None, tag="main", concepts=None):
        """Erase `concepts` (default: the configured targets); returns
        (model, list of EraseLog)."""
        ecfg = ecfg or self.cfg.erasure
        concepts = self.cfg.concepts if concepts is None else concepts
        model = self.model()
        targets = [self.target(cid, early_step, ecfg) for cid in concepts]
        rng = self.rng("eliminate", tag)
        if len(targets) == 1 and multi_mode is None:
            steps = ecfg.steps_for(self.ids[concepts[0]])
            em, lg = E.erase(model, targets, ecfg, steps, rng)
            return em, [lg]
        steps = max(ecfg.steps_for(self.ids[c]) for c in concepts)
        mode = multi_mode or self.cfg.multi.mode
        return E.erase_multi(model, targets, mode, ecfg, steps, rng,
                             self.cfg.multi.simultaneous_steps)

    def stage_eliminate(self):
        em, logs = self.eliminate()
        em.save(self.path("erased.suma"))
        names = ["erased.suma"]
        for j, lg in enumerate(logs):
            n = f"eliminate_{j}.csv"
            write_text(self.path(n), lg.to_csv())
            names.append(n)
        return names

    def erased(self) -> ToyT2I:
        return model_from_tensors(checkpoint.load(self.path("erased.suma")), self.universe,
                                  self.cfg.model)

    def attack(self, model: ToyT2I, tag: str = "main", do_ud: bool = True, concepts=None) -> list:
        a = self.cfg.attack
        reports = []
        for cid in (self.cfg.concepts if concepts is None else concepts):
            c = self.ids[cid]
            imgs = self.images(cid, "attack")
            seed = self.seed_for("attack-eval", cid)
            cce = R.attack_cce(model, c, imgs, self.clf, a.cce_steps, self.rng("cce", tag, cid),
                               lr=self.cfg.ti.lr, init_token=self.cfg.ti.init_token,
                               batch=self.cfg.ti.batch, n_eval=a.n_eval, eval_seed=seed)
            reports.append(cce.report)
            if do_ud:
                ud = R.attack_ud(model, c, imgs, self.clf, self.rng("ud", tag, cid), k=a.ud_k,
                                 steps=a.ud_steps, eta=a.ud_eta, batch=a.ud_batch,
                                 n_eval=a.n_eval, eval_seed=seed)
                reports.append(ud.report)
        return reports

    def stage_attack(self):
        reports = self.attack(self.erased())
        R.write_reports(self.path("attacks.json"), reports)
        return ["attacks.json"]

    def evaluate(self, model: ToyT2I, attacks: Sequence[R.AttackReport],
                 concepts=None) -> M.MetricsReport:
        concepts = self.cfg.concepts if concepts is None else concepts
        a = self.cfg.attack
        rep = M.MetricsReport(config_fingerprint=self.cfg.fingerprint(), seed=self.cfg.seed,
                              n_eval=a.n_eval)
        by = {(r.attack, r.concept): r.asr for r in attacks}
        text = []
        for cid in concepts:
            t = M.asr(model, model.concept_cond(self.ids[cid].vocab_token), self.clf, cid, a.n_eval,
                      self.seed_for("textual-eval", cid))
            text.append(t)
            rep.per_concept[cid] = {"asr_textual": t, "asr_cce": by.get(("cce", cid)),
                                    "asr_ud": by.get(("ud", cid))}
        rep.asr_textual = float(np.mean(text))
        cces = [v for (k, _), v in by.items() if k == "cce"]
        uds = [v for (k, _), v in by.items() if k == "ud"]
        rep.asr_cce = float(np.mean(cces)) if cces else None
        rep.asr_ud = float(np.mean(uds)) if uds else None
        fid, clip = M.utility(model, self.model(), self.universe, concepts,
                              self.cfg.metrics.n_fid, self.seed_for("utility"))
        rep.toy_fid, rep.toy_clip = fid, clip
        return rep.finalize()

    def stage_eval(self):
        attacks = [R.AttackReport(**d) for d in json.loads(self.path("attacks.json").read_text())]
        rep = self.evaluate(self.erased(), attacks)
        write_text(self.path("metrics.json"), rep.to_json())
        return ["metrics.json"]

    def stage_report(self):
        model = self.model()
        out = {"schema_version": M.SCHEMA_VERSION, "config": self.cfg.to_dict(),
               "config_fingerprint": self.cfg.fingerprint(),
               "pretrain": json.loads(self.path("pretrain.json").read_text()),
               "metrics": json.loads(self.path("metrics.json").read_text()),
               "attacks": json.loads(self.path("attacks.json").read_text()),
               "construct": json.loads(self.path("construct.json").read_text()),
               "distances": {}}
        out["distances"] = self.distances(model)
        abl = {}
        for preset in ABLATION_PRESETS:
            p = self.path(f"ablation_{preset}.csv")
            if p.exists():
                abl[preset] = p.read_text().splitlines()
        out["ablations"] = abl
        write_text(self.path("report.json"), M.canonical_json(out))
        return ["report.json"]

    def distances(self, model: ToyT2I) -> dict:
        """Final vs early vs textual token distances, TI against the pretrained
        model, for every concept in the universe."""
        ti = self.cfg.ti
        out = {}
        for c in self.universe:
            tr = run_ti(model, self.images(c.id, "construct"), ti.steps, ti.lr,
                        self.rng("distance", c.id), init_token=ti.init_token, batch=ti.batch,
                        checkpoint_stride=ti.checkpoint_stride, target_concept=c.id)
            out[c.id] = M.distance_report(tr.final(), tr.token_at(self.cfg.erasure.early_step),
                                          model.encoder.embedding(c.vocab_token))
        return out

    # -- ablations --------------------------------------------------------

    def ablation_rows(self, preset: str) -> list:
        """[(variant, metrics report)] for one preset."""
        base = self.cfg.erasure
        variants = []
        if preset == "ref_step_30_50_70":
            for s in (30, 50, 70):
                variants.append((f"step_{s}", dict(early_step=s), base, None))
        elif preset == "lambda_reg_on_off":
            for lam in (1.0, 0.0):
                variants.append((f"lambda_reg_{lam:g}", {}, replace(base, lambda_reg=lam), None))
        elif preset == "base_mode":
            for mode in ("ca_only", "suma", "push", "erase_all_tokens"):
                variants.append((mode, {}, replace(base, mode=mode), None))
        elif preset == "multi_IE_SE":
            for mm in ("IE", "SE"):
                variants.append((mm, {}, base, mm))
        else:
            raise ConfigInvalid("ablations", f"unknown preset {preset!r}")
        concepts = self.cfg.multi.concepts if preset == "multi_IE_SE" else self.cfg.concepts
        rows = []
        for name, kw, ecfg, mm in variants:
            tag = f"{preset}/{name}"
            em, _ = self.eliminate(ecfg, kw.get("early_step"), mm, tag=tag, concepts=concepts)
            rep = self.evaluate(em, self.attack(em, tag=tag, concepts=concepts), concepts)
            rows.append((name, rep))
        return rows

    def run_ablations(self, presets: Sequence[str]) -> list:
        if not presets:
            raise ConfigInvalid("ablations", "empty preset list")
        names = []
        for preset in presets:
            rows = self.ablation_rows(preset)
            text = rows_to_csv(["variant", "asr_textual", "asr_cce", "asr_cce_max", "asr_ud",
                                "toy_fid", "toy_clip"],
                               [(n, r.asr_textual, r.asr_cce, worst(r, "asr_cce"), r.asr_ud,
                                 r.toy_fid, r.toy_clip) for n, r in rows])
            n = f"ablation_{preset}.csv"
            write_text(self.path(n), text)
            names.append(n)
        return names

    # -- driver -----------------------------------------------------------

    def execute(self, stages: Sequence[str], ablations: Sequence[str] = ()) -> dict:
        self.out.mkdir(parents=True, exist_ok=True)
        lock = self.path(LOCK)
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockHeld(f"{lock} exists; another run owns this directory") from None
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            self._load_manifest()
            ran = {}
            order = [s for s in STAGES if s in stages]
            for st in order:
                if self.done(st):
                    ran[st] = "cached"
                    continue
                try:
                    names = getattr(self, f"stage_{st}")()
                except (ConfigInvalid, LockHeld):
                    raise
                except Exception as exc:
                    raise StageFailed(st, exc) from exc
                self.record(st, names)
                ran[st] = "ran"
            if ablations:
                key = "ablate:" + ",".join(ablations)
                if self.done(key):
                    ran[key] = "cached"
                else:
                    try:
                        names = self.run_ablations(ablations)
                    except ConfigInvalid:
                        raise
                    except Exception as exc:
                        raise StageFailed("ablate", exc) from exc
                    self.record(key, names)
                    ran[key] = "ran"
            return ran
        finally:
            lock.unlink(missing_ok=True)


def requirements(stage: str) -> list:
    """A stage plus everything it depends on."""
    return list(STAGES[: STAGES.index(stage) + 1])


def run_pipeline(cfg: RunConfig, out, stages: Sequence[str] | None = None,
                 ablations: Sequence[str] = ()) -> dict:
    return Run(cfg, out).execute(cfg.stages if stages is None else stages, ablations)


def ablation_grid(cfg: RunConfig, out, presets: Sequence[str]) -> dict:
    if not presets:
        raise ConfigInvalid("ablations", "empty preset list")
    return Run(cfg, out).execute(requirements("construct"), presets)


def check_report(report: dict) -> list:
    """Headline acceptance rows a finished report can verify on its own.
    Returns a list of (name, passed, detail)."""
    m = report["metrics"]
    out = [("textual_asr<0.05", m["asr_textual"] is not None and m["asr_textual"] < 0.05,
            m["asr_textual"]),
           ("cce_asr<0.20", m["asr_cce"] is not None and m["asr_cce"] < 0.20, m["asr_cce"]),
           ("ud_asr<0.20", m["asr_ud"] is not None and m["asr_ud"] < 0.20, m["asr_ud"])]
    for cid, d in report.get("distances", {}).items():
        out.append((f"distance_order[{cid}]", d["u_to_early"] < d["u_to_textual"], d))
    return out
