"""Acceptance suite: every criterion prints one PASS/FAIL line.

Criteria 3-9 and 11 run a full attack campaign through the CLI into a
temporary directory (training two models, attacking a 100-image suite
at every budget tier in both modes, plus two high-confidence levels).
Expect the whole module to take well over an hour on two CPU cores.
"""

import csv
import json
import shutil
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from advcolor import cli, colorspace, data, perceptual
from advcolor.attacks import PercAL
from advcolor.classifier import (
    ConvNetClassifier,
    ReLU,
    is_adversarial,
    loss_input_grad,
    margin_loss,
)
from advcolor.validation import is_on_grid

from oracles import ciede2000_reference

SEED = 7
SUITE_SIZE = 100
REL_MARGIN = 0.05          # criterion 4: orderings with >= 5% relative margin
BUDGET_TOL = 1.02          # criterion 5: nonincreasing within 2% relative
PERC_HIGH_SR = 98.0        # criterion 6: PerC success at high confidence
DOMINANCE_FRACTION = 0.8   # criterion 7: pointwise domination share
STRUCT_RATIO = 0.5         # criterion 10: flat-half suppression factor
KAPPA_PERCENTILES = (50, 90)

BUDGET_TIERS_CW = [[3, 100], [5, 200], [9, 1000]]
BUDGET_TIERS_ITER = [100, 300, 1000]


def _criterion(num, name, ok, detail=""):
    print(f"[criterion {num:>2}] {name}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"criterion {num} ({name}): {detail}"


# ---------------------------------------------------------------------------
# Campaign fixture (shared by criteria 3-11)
# ---------------------------------------------------------------------------

def _c3_blocks():
    blocks = []
    for mode in ("targeted", "untargeted"):
        blocks.append({"name": "ifgsm", "mode": mode, "kappa": 0.0})
        for nm in ("cw", "perc_cw"):
            blocks.append(
                {"name": nm, "mode": mode, "kappa": 0.0, "budgets": BUDGET_TIERS_CW}
            )
        for nm in ("ddn", "perc_al"):
            blocks.append(
                {"name": nm, "mode": mode, "kappa": 0.0, "budgets": BUDGET_TIERS_ITER}
            )
    return blocks


def _kappa_blocks():
    blocks = []
    for p in KAPPA_PERCENTILES:
        kappa = {"percentile": p}
        blocks.append({"name": "ifgsm", "mode": "untargeted", "kappa": kappa})
        for nm in ("cw", "perc_cw"):
            blocks.append(
                {"name": nm, "mode": "untargeted", "kappa": kappa, "budgets": [[9, 1000]]}
            )
        for nm in ("ddn", "perc_al"):
            blocks.append(
                {"name": nm, "mode": "untargeted", "kappa": kappa, "budgets": [1000]}
            )
    return blocks


def _base_config(root):
    return {
        "schema_version": 1,
        "seed": SEED,
        "output_dir": str(root / "out"),
        "suite_size": SUITE_SIZE,
        "dataset": {"dir": str(root / "dataset"), "n_train": 2000, "n_val": 500},
        "models": {"dir": str(root / "out" / "models"), "epochs": 12},
        "attacks": [],
        "evaluation": {"contact_sheets": 2},
    }


def _parse_campaigns(out_dir):
    reports = {}
    for camp in sorted((out_dir / "attacks").iterdir()):
        rp = camp / "report.json"
        if not rp.exists():
            continue
        r = json.loads(rp.read_text())
        attack, mode, ktag, btag = camp.name.split("__")
        reports[(attack, mode, ktag, btag)] = dict(r, dir=str(camp))
    return reports


@pytest.fixture(scope="session")
def campaign(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    cfg_c3 = _base_config(root)
    cfg_c3["attacks"] = _c3_blocks()
    c3_path = root / "c3.json"
    c3_path.write_text(json.dumps(cfg_c3))

    cfg_k = _base_config(root)
    cfg_k["attacks"] = _kappa_blocks()
    k_path = root / "kappa.json"
    k_path.write_text(json.dumps(cfg_k))

    t0 = time.time()
    assert cli.main(["--config", str(c3_path), "make-dataset"]) == 0
    assert cli.main(["--config", str(c3_path), "train"]) == 0
    print(f"[campaign] dataset + models ready ({time.time() - t0:.0f}s)", flush=True)
    assert cli.main(["--config", str(c3_path), "attack"]) == 0
    print(f"[campaign] base campaign done ({time.time() - t0:.0f}s)", flush=True)
    assert cli.main(["--config", str(k_path), "attack"]) == 0
    print(f"[campaign] high-confidence campaign done ({time.time() - t0:.0f}s)", flush=True)
    assert cli.main(["--config", str(k_path), "evaluate"]) == 0
    print(f"[campaign] evaluation done ({time.time() - t0:.0f}s)", flush=True)

    out = root / "out"
    return SimpleNamespace(
        root=root,
        out=out,
        c3_config=c3_path,
        reports=_parse_campaigns(out),
        evaluation=json.loads((out / "evaluate" / "evaluation.json").read_text()),
        model=ConvNetClassifier.load(out / "models" / "source.npz"),
    )


def _mean(reports, attack, mode, ktag, btag, key):
    return reports[(attack, mode, ktag, btag)]["aggregate"][f"mean_{key}"]


# ---------------------------------------------------------------------------
# Criterion 1: color-difference oracle equivalence
# ---------------------------------------------------------------------------

def test_criterion_01_ciede2000_oracle():
    rng = np.random.default_rng(1001)
    n = 10_000
    lab1 = np.stack(
        [rng.uniform(0, 100, n), rng.uniform(-80, 80, n), rng.uniform(-80, 80, n)], -1
    )
    lab2 = np.stack(
        [rng.uniform(0, 100, n), rng.uniform(-80, 80, n), rng.uniform(-80, 80, n)], -1
    )
    t0 = time.time()
    got = perceptual.delta_e00_lab(lab1, lab2)
    want = np.array([ciede2000_reference(p, q) for p, q in zip(lab1, lab2)])
    elapsed = time.time() - t0
    worst = float(np.max(np.abs(got - want)))
    _criterion(
        1,
        "ciede2000-oracle-equivalence",
        worst < 1e-4 and elapsed < 10.0,
        f"max |diff| = {worst:.2e} over {n} pairs in {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# Criterion 2: gradient correctness
# ---------------------------------------------------------------------------

def _smooth_pair(rng, shape=(8, 8, 3)):
    """An sRGB pair whose pixels sit away from every formula branch."""
    while True:
        x = rng.uniform(0.15, 0.85, size=shape)
        x2 = np.clip(x + rng.uniform(-0.08, 0.08, size=shape), 0.08, 0.92)
        lab1 = colorspace.srgb_to_lab(x)
        lab2 = colorspace.srgb_to_lab(x2)
        lch1 = colorspace.lab_to_lch(lab1)
        lch2 = colorspace.lab_to_lch(lab2)
        dh = np.abs(lch2[..., 2] - lch1[..., 2])
        dh = np.minimum(dh, 360.0 - dh)
        if (
            lch1[..., 1].min() > 2.0
            and lch2[..., 1].min() > 2.0
            and np.all(np.abs(dh - 180.0) > 3.0)
        ):
            return x, x2


def _fd_check_fn(value_fn, grad, x2, coords, h=1e-5, rtol=1e-3, floor=1e-6):
    flat = x2.reshape(-1)
    gflat = grad.reshape(-1)
    bad = []
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(value_fn(x2))
        flat[i] = orig - h
        fm = float(value_fn(x2))
        flat[i] = orig
        fd = (fp - fm) / (2 * h)
        scale = max(abs(fd), abs(gflat[i]), floor)
        if abs(fd - gflat[i]) > rtol * scale:
            bad.append((i, fd, gflat[i]))
    return bad


def test_criterion_02_gradient_correctness(campaign):
    rng = np.random.default_rng(1002)
    t0 = time.time()
    failures = []

    # c2 and weighted_c2 through the full color pipeline
    for name, use_weight in (("c2", False), ("weighted_c2", True)):
        checked = 0
        while checked < 100:
            x, x2 = _smooth_pair(rng)
            sigma = rng.uniform(0, 1, size=x.shape) if use_weight else None
            if use_weight:
                val_fn = lambda z: perceptual.weighted_c2(x, z, sigma)
                _, g = perceptual.weighted_c2_and_grad(x, x2, sigma)
            else:
                val_fn = lambda z: perceptual.c2(x, z)
                _, g = perceptual.c2_and_grad(x, x2)
            coords = rng.choice(x2.size, size=min(20, 100 - checked), replace=False)
            bad = _fd_check_fn(val_fn, g, x2.copy(), coords)
            failures += [(name, *b) for b in bad]
            checked += len(coords)

    # cross-entropy and margin through the classifier
    model = campaign.model
    val_records = cli.ingest(Path(json.loads(campaign.c3_config.read_text())["dataset"]["dir"]) / "val")
    X = np.stack([r.image for r in val_records[:40]])
    y = np.array([r.label for r in val_records[:40]])

    def relu_masks(x):
        _, caches = model._forward_cache(x[None])
        return tuple(
            c.tobytes() for l, c in zip(model.layers_, caches) if isinstance(l, ReLU)
        )

    for kind in ("xent", "margin"):
        checked = 0
        img = 0
        while checked < 100:
            x = X[img % len(X)]
            label = int(y[img % len(y)])
            img += 1
            targeted = bool(img % 2) and kind == "margin"
            lbl = (label + 1) % model.n_classes if targeted else label
            _, g, _ = loss_input_grad(
                model, x[None], [lbl], kind=kind, kappa=0.0, targeted=targeted
            )

            def val_fn(z, lbl=lbl, kind=kind, targeted=targeted):
                v, _, _ = loss_input_grad(
                    model, z[None], [lbl], kind=kind, kappa=0.0, targeted=targeted
                )
                return float(np.atleast_1d(v)[0])

            # keep only coordinates whose +-h probes stay on one ReLU branch
            coords = []
            attempts = 0
            while len(coords) < 10 and attempts < 200:
                attempts += 1
                i = int(rng.integers(0, x.size))
                reference = None
                stable = True
                for sgn in (1.0, -1.0):
                    xp = x.copy()
                    xp.reshape(-1)[i] += sgn * 1e-5
                    masks = relu_masks(xp)
                    if reference is None:
                        reference = masks
                    elif masks != reference:
                        stable = False
                if stable:
                    coords.append(i)
            bad = _fd_check_fn(val_fn, g[0], x.copy(), coords)
            failures += [(kind, *b) for b in bad]
            checked += len(coords)

    elapsed = time.time() - t0
    _criterion(
        2,
        "gradient-correctness",
        not failures and elapsed < 60.0,
        f"{len(failures)} mismatches, {elapsed:.1f}s"
        + (f"; first: {failures[0]}" if failures else ""),
    )


# ---------------------------------------------------------------------------
# Criterion 3: 100% success at kappa = 0 across budgets and modes
# ---------------------------------------------------------------------------

def test_criterion_03_success_rates(campaign):
    shortfalls = []
    for key, report in campaign.reports.items():
        attack, mode, ktag, btag = key
        if ktag != "k0":
            continue
        sr = report["aggregate"]["success_rate"]
        if sr < 100.0:
            shortfalls.append((key, sr))
    _criterion(
        3,
        "success-rate-reproduction",
        not shortfalls,
        f"{len([k for k in campaign.reports if k[2] == 'k0'])} campaigns at 100%"
        + (f"; failing: {shortfalls}" if shortfalls else ""),
    )


# ---------------------------------------------------------------------------
# Criterion 4: orderings at the highest budgets (targeted)
# ---------------------------------------------------------------------------

def test_criterion_04_orderings(campaign):
    r = campaign.reports
    top_cw, top_it = "9x1000", "1000"
    checks = []

    def rec(label, small, large):
        ok = small < large * (1.0 - REL_MARGIN)
        checks.append((label, ok, f"{small:.2f} vs {large:.2f}"))

    rec("C2: perc_cw < cw", _mean(r, "perc_cw", "targeted", "k0", top_cw, "c2"),
        _mean(r, "cw", "targeted", "k0", top_cw, "c2"))
    rec("C2: perc_al < ddn", _mean(r, "perc_al", "targeted", "k0", top_it, "c2"),
        _mean(r, "ddn", "targeted", "k0", top_it, "c2"))
    rec("L2: cw < perc_cw", _mean(r, "cw", "targeted", "k0", top_cw, "l2"),
        _mean(r, "perc_cw", "targeted", "k0", top_cw, "l2"))
    rec("Linf: cw < perc_cw", _mean(r, "cw", "targeted", "k0", top_cw, "linf"),
        _mean(r, "perc_cw", "targeted", "k0", top_cw, "linf"))
    rec("L2: ddn < perc_al", _mean(r, "ddn", "targeted", "k0", top_it, "l2"),
        _mean(r, "perc_al", "targeted", "k0", top_it, "l2"))
    rec("Linf: ddn < perc_al", _mean(r, "ddn", "targeted", "k0", top_it, "linf"),
        _mean(r, "perc_al", "targeted", "k0", top_it, "linf"))
    rec("C2: perc_al <= perc_cw", _mean(r, "perc_al", "targeted", "k0", top_it, "c2"),
        _mean(r, "perc_cw", "targeted", "k0", top_cw, "c2"))

    failed = [c for c in checks if not c[1]]
    detail = "; ".join(f"{label} [{vals}]" for label, ok, vals in checks)
    _criterion(4, "ordering-reproduction", not failed, detail)


# ---------------------------------------------------------------------------
# Criterion 5: budget monotonicity on each attack's own metric
# ---------------------------------------------------------------------------

def test_criterion_05_budget_monotonicity(campaign):
    r = campaign.reports
    plans = [
        ("cw", ["3x100", "5x200", "9x1000"], "l2"),
        ("perc_cw", ["3x100", "5x200", "9x1000"], "c2"),
        ("ddn", ["100", "300", "1000"], "l2"),
        ("perc_al", ["100", "300", "1000"], "c2"),
    ]
    violations = []
    details = []
    for attack, tiers, key in plans:
        for mode in ("targeted", "untargeted"):
            seq = [_mean(r, attack, mode, "k0", t, key) for t in tiers]
            details.append(f"{attack}/{mode}: " + " -> ".join(f"{v:.2f}" for v in seq))
            for lo, hi in zip(seq[1:], seq[:-1]):
                if lo > hi * BUDGET_TOL:
                    violations.append((attack, mode, seq))
    _criterion(
        5,
        "budget-monotonicity",
        not violations,
        "; ".join(details) + (f"; violations: {violations}" if violations else ""),
    )


# ---------------------------------------------------------------------------
# Criterion 6: high-confidence behavior
# ---------------------------------------------------------------------------

def _kappa_tags():
    return [f"kp{p:g}" for p in KAPPA_PERCENTILES]


def test_criterion_06_high_confidence(campaign):
    r = campaign.reports
    t1, t2 = _kappa_tags()
    k1 = r[("perc_al", "untargeted", t1, "1000")]["kappa"]
    k2 = r[("perc_al", "untargeted", t2, "1000")]["kappa"]
    problems = []
    if not k1 < k2:
        problems.append(f"kappa levels not ordered: {k1} vs {k2}")
    for tag in (t1, t2):
        for attack, btag in (("perc_cw", "9x1000"), ("perc_al", "1000")):
            sr = r[(attack, "untargeted", tag, btag)]["aggregate"]["success_rate"]
            if sr < PERC_HIGH_SR:
                problems.append(f"{attack}@{tag} success {sr:.1f}% < {PERC_HIGH_SR}%")
        c2_cw = _mean(r, "cw", "untargeted", tag, "9x1000", "c2")
        c2_pcw = _mean(r, "perc_cw", "untargeted", tag, "9x1000", "c2")
        c2_ddn = _mean(r, "ddn", "untargeted", tag, "1000", "c2")
        c2_pal = _mean(r, "perc_al", "untargeted", tag, "1000", "c2")
        if not c2_pcw < c2_cw:
            problems.append(f"{tag}: C2 perc_cw {c2_pcw:.1f} !< cw {c2_cw:.1f}")
        if not c2_pal < c2_ddn:
            problems.append(f"{tag}: C2 perc_al {c2_pal:.1f} !< ddn {c2_ddn:.1f}")
        if not c2_pal <= c2_pcw:
            problems.append(f"{tag}: C2 perc_al {c2_pal:.1f} !<= perc_cw {c2_pcw:.1f}")
    _criterion(
        6,
        "high-confidence-behavior",
        not problems,
        f"kappa1={k1:.2f} kappa2={k2:.2f}" + ("; " + "; ".join(problems) if problems else ""),
    )


# ---------------------------------------------------------------------------
# Criterion 7: robustness trend under bit-depth reduction
# ---------------------------------------------------------------------------

def _curves(campaign, attack, tag, transform="bit_depth"):
    btag = {"ifgsm": "default", "cw": "9x1000", "perc_cw": "9x1000",
            "ddn": "1000", "perc_al": "1000"}[attack]
    name = f"{attack}__untargeted__{tag}__{btag}"
    entry = campaign.evaluation[name]
    for c in entry["robustness"]:
        if c["transform"] == transform:
            return c["rates"]
    raise KeyError(transform)


def test_criterion_07_robustness_trend(campaign):
    t1, t2 = _kappa_tags()
    problems = []
    details = []
    for attack in ("ifgsm", "cw", "perc_cw", "ddn", "perc_al"):
        lo = _curves(campaign, attack, t1)
        hi = _curves(campaign, attack, t2)
        dom = np.mean([h >= l for h, l in zip(hi, lo)])
        details.append(f"{attack}: dominated {dom * 100:.0f}%")
        if dom < DOMINANCE_FRACTION:
            problems.append(f"{attack}: kappa2 dominates only {dom*100:.0f}% of grid")
    mid = len(_curves(campaign, "cw", t2)) // 2
    for tag in (t1, t2):
        cw_mid = _curves(campaign, "cw", tag)[mid]
        pcw_mid = _curves(campaign, "perc_cw", tag)[mid]
        ddn_mid = _curves(campaign, "ddn", tag)[mid]
        pal_mid = _curves(campaign, "perc_al", tag)[mid]
        details.append(
            f"{tag} median: perc_cw {pcw_mid:.0f} vs cw {cw_mid:.0f},"
            f" perc_al {pal_mid:.0f} vs ddn {ddn_mid:.0f}"
        )
        if pcw_mid < cw_mid:
            problems.append(f"{tag}: perc_cw median {pcw_mid:.0f} < cw {cw_mid:.0f}")
        if pal_mid < ddn_mid:
            problems.append(f"{tag}: perc_al median {pal_mid:.0f} < ddn {ddn_mid:.0f}")
    _criterion(7, "robustness-trend", not problems, "; ".join(details + problems))


# ---------------------------------------------------------------------------
# Criterion 8: transfer trend
# ---------------------------------------------------------------------------

def test_criterion_08_transfer_trend(campaign):
    t1, t2 = _kappa_tags()
    btag = {"ifgsm": "default", "cw": "9x1000", "perc_cw": "9x1000",
            "ddn": "1000", "perc_al": "1000"}
    rates = {}
    for attack in btag:
        for tag in (t1, t2):
            name = f"{attack}__untargeted__{tag}__{btag[attack]}"
            rates[(attack, tag)] = campaign.evaluation[name]["transfer_rate"]
    problems = []
    for attack in btag:
        if rates[(attack, t2)] < rates[(attack, t1)]:
            problems.append(
                f"{attack}: transfer {rates[(attack, t2)]:.1f} < {rates[(attack, t1)]:.1f}"
            )
    for tag in (t1, t2):
        non_ifgsm = {a: rates[(a, tag)] for a in btag if a != "ifgsm"}
        best = max(non_ifgsm, key=non_ifgsm.get)
        if best not in ("perc_cw", "perc_al"):
            problems.append(f"{tag}: best non-ifgsm transfer is {best} ({non_ifgsm})")
    detail = "; ".join(f"{a}@{t}: {v:.1f}" for (a, t), v in sorted(rates.items()))
    _criterion(8, "transfer-trend", not problems, detail + ("; " + "; ".join(problems) if problems else ""))


# ---------------------------------------------------------------------------
# Criterion 9: persisted validity
# ---------------------------------------------------------------------------

def test_criterion_09_persisted_validity(campaign):
    model = campaign.model
    total, bad = 0, []
    for key, report in campaign.reports.items():
        camp = Path(report["dir"])
        with open(camp / "records.csv", newline="") as fh:
            rows = [row for row in csv.DictReader(fh) if row["success"] == "1"]
        if not rows:
            continue
        imgs = np.stack([data.load_png(camp / "images" / r["filename"]) for r in rows])
        if not is_on_grid(imgs):
            bad.append((key, "off-grid"))
            continue
        z = model.decision_function(imgs)
        for i, row in enumerate(rows):
            total += 1
            if report["mode"] == "targeted":
                ok = is_adversarial(z[i], target=int(row["target"]), kappa=0.0)
            else:
                ok = is_adversarial(z[i], y=int(row["label"]), kappa=0.0)
            if not ok:
                bad.append((key, row["id"]))
    _criterion(
        9,
        "persisted-validity",
        not bad,
        f"{total} successful images re-verified" + (f"; broken: {bad[:5]}" if bad else ""),
    )


# ---------------------------------------------------------------------------
# Criterion 10: structure-weighted variant suppresses flat regions
# ---------------------------------------------------------------------------

def test_criterion_10_structure_variant(campaign):
    model = campaign.model
    probe = data.flat_textured_probe(seed=3)
    y = model.predict(probe[None])
    plain = PercAL(iterations=1000).perturb(model, probe[None], y)[0]
    struct = PercAL(iterations=1000, structure=True).perturb(model, probe[None], y)[0]
    half = probe.shape[1] // 2
    flat_plain = float(np.abs(plain.image - probe)[:, :half].mean())
    flat_struct = float(np.abs(struct.image - probe)[:, :half].mean())
    ratio = flat_struct / max(flat_plain, 1e-12)
    _criterion(
        10,
        "structure-variant-suppression",
        plain.success and struct.success and ratio < STRUCT_RATIO,
        f"flat-half mean |delta|: plain {flat_plain:.5f}, weighted {flat_struct:.5f}"
        f" (ratio {ratio:.2f}); success {plain.success}/{struct.success}",
    )


# ---------------------------------------------------------------------------
# Criterion 11: determinism of the criterion-3 campaign
# ---------------------------------------------------------------------------

def test_criterion_11_determinism(campaign):
    out = campaign.out
    first = campaign.root / "first_attacks"
    shutil.move(out / "attacks", first)
    try:
        assert cli.main(["--config", str(campaign.c3_config), "attack"]) == 0
        mismatches = []
        count = 0
        for camp in sorted(first.iterdir()):
            if not (camp / "report.json").exists():
                continue
            twin = out / "attacks" / camp.name
            for f in sorted(camp.rglob("*")):
                if f.is_dir():
                    continue
                count += 1
                other = twin / f.relative_to(camp)
                if not other.exists() or f.read_bytes() != other.read_bytes():
                    mismatches.append(str(f.relative_to(first)))
        _criterion(
            11,
            "determinism",
            not mismatches,
            f"{count} files byte-identical"
            + (f"; differing: {mismatches[:5]}" if mismatches else ""),
        )
    finally:
        # restore the kappa campaigns for any later inspection
        for camp in first.iterdir():
            target = out / "attacks" / camp.name
            if not target.exists():
                shutil.move(camp, target)
