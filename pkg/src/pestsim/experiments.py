"""Desk-scale versions of the layout/circuit bench, the per-species trigger
campaign and the cross-device conditioning comparison."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import cmmformer as cm
from .circuit import tune_components
from .device import DeviceConfig
from .dropsim import (
    PROFILES, SPECIES, CampaignConfig, Scenario, build_reference_drops, draw_event, make_devices,
    simulate_campaign, synth_event,
)
from .metrics import eta, trigger_accuracy
from .optics import Layout

COMBINATIONS = ("sym+conv", "asym+conv", "asym+tailored")


# --- layout and circuit bench -------------------------------------------------


def combination_template(name: str, template: DeviceConfig, max_response_time: float = 1e-3,
                         linearity_margin: float = 0.3) -> DeviceConfig:
    layout, circuit = name.split("+")
    geom = replace(template.geometry, layout=Layout.SYMMETRIC if layout == "sym" else Layout.ASYMMETRIC_ORTHOGONAL)
    circ = template.circuit
    if circuit == "tailored":
        r_r, r_e = tune_components(circ, max_response_time, linearity_margin)
        circ = replace(circ, r_r=r_r, r_e=r_e)
    return replace(template, geometry=geom, circuit=circ)


def peak_excursion_mv(stream: np.ndarray, device: DeviceConfig) -> tuple[float, float]:
    """Per-channel largest departure from the stream's median baseline, in mV."""
    base = np.median(stream, axis=1, keepdims=True)
    mv = device.circuit.counts_to_mv(np.abs(stream - base).max(axis=1))
    return float(mv[0]), float(mv[1])


def _sd(values) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def bench_layout(template: DeviceConfig = DeviceConfig(), *, seed: int = 0, n_devices: int = 3,
                 drops: int = 10, species: str = "Cp", max_response_time: float = 1e-3,
                 linearity_margin: float = 0.3) -> list[dict]:
    """Mean and sd of eta per combination and device, plus per-combination averages.

    Every combination sees the same devices (same individuality seeds) and
    the same drops, so the rows differ only in layout and resistor choice.
    """
    rows = []
    for combo in COMBINATIONS:
        tpl = combination_template(combo, template, max_response_time, linearity_margin)
        values = []
        for dev in make_devices(n_devices, seed, tpl):
            etas = []
            for k in range(drops):
                rng = np.random.default_rng([seed, 5003, k])
                event = draw_event(rng, species, Scenario.NORMAL_SINGLE, dev.geometry.dropzone_radius_R)
                stream, _ = synth_event(event, dev)
                dv1, dv2 = peak_excursion_mv(stream, dev)
                etas.append(eta(dv1, dv2) if dv1 + dv2 > 0 else 0.0)
            values += etas
            rows.append({"combination": combo, "device_id": dev.device_id, "n": len(etas),
                         "eta_mean_mv": float(np.mean(etas)), "eta_sd_mv": _sd(etas),
                         "r_r": dev.circuit.r_r, "r_e": dev.circuit.r_e})
        rows.append({"combination": combo, "device_id": "all", "n": len(values),
                     "eta_mean_mv": float(np.mean(values)), "eta_sd_mv": _sd(values),
                     "r_r": tpl.circuit.r_r, "r_e": tpl.circuit.r_e})
    return rows


# --- trigger accuracy by species -------------------------------------------


def trigger_rates(template: DeviceConfig = DeviceConfig(), *, seed: int = 0, n_events: int = 200,
                  n_devices: int = 3, species=SPECIES) -> list[dict]:
    """Single-pest campaigns per species; one record per released pest is ideal."""
    rows = []
    only_single = {s.value: (1.0 if s is Scenario.NORMAL_SINGLE else 0.0) for s in Scenario}
    for sp in species:
        cfg = CampaignConfig(n_events=n_events, species_mix={sp: 1.0}, scenario_mix=only_single,
                             n_devices=n_devices, seed=seed)
        records, truth = simulate_campaign(cfg, make_devices(n_devices, seed, template))
        triggered = len(records)
        rows.append({"species": sp, "released": n_events, "triggered": triggered,
                     "trigger_accuracy": trigger_accuracy(triggered, n_events)})
    return rows


# --- cross-device conditioning ------------------------------------------------


@dataclass(frozen=True)
class CrossDeviceSetup:
    n_records: int = 1000
    pool_size: int = 100
    gains: tuple = ((0.6, 0.65), (1.5, 1.4))
    offsets: tuple = ((-80.0, 40.0), (60.0, -50.0))
    split: tuple = (0.6, 0.2, 0.2)


def cross_device_data(setup: CrossDeviceSetup = CrossDeviceSetup(), seed: int = 0):
    """Two devices with contrasting gain and offset, equal five-species mix.

    Returns ``(x, y, devices, pools, split)`` where ``split`` holds index
    arrays for train, val and test.
    """
    devs = [DeviceConfig(device_id=f"dev{k}", seed=1000 + k, channel_gain=g, channel_offset=o)
            for k, (g, o) in enumerate(zip(setup.gains, setup.offsets))]
    mix = {s.value: (1.0 if s is Scenario.NORMAL_SINGLE else 0.0) for s in Scenario}
    cfg = CampaignConfig(n_events=setup.n_records, species_mix={s: 1 / len(SPECIES) for s in SPECIES},
                         scenario_mix=mix, n_devices=len(devs), seed=seed)
    records, _ = simulate_campaign(cfg, devs)
    records = [r for r in records if r.n_samples == 128]
    pools = {d.device_id: np.stack([r.as_array() for r in build_reference_drops(d, setup.pool_size, seed)])
             for d in devs}
    x = np.stack([r.as_array() for r in records])
    y = np.array([SPECIES.index(r.truth["species"]) for r in records])
    devices = [r.device_id for r in records]
    order = np.random.default_rng([seed, 77]).permutation(len(y))
    n_tr = int(round(setup.split[0] * len(y)))
    n_va = int(round(setup.split[1] * len(y)))
    split = (order[:n_tr], order[n_tr : n_tr + n_va], order[n_tr + n_va :])
    return x, y, devices, pools, split


def per_device_accuracy(pred, y, devices) -> dict[str, float]:
    devices = np.asarray(devices)
    return {d: float(np.mean(pred[devices == d] == y[devices == d])) for d in sorted(set(devices))}


def cmm_comparison(seeds=(0, 1, 2), setup: CrossDeviceSetup = CrossDeviceSetup(),
                   model: cm.ModelConfig = cm.ModelConfig(), tcfg: cm.TrainConfig = cm.TrainConfig(),
                   data_seed: int = 0) -> list[dict]:
    """Train with and without reference conditioning on the same data.

    One row per (variant, seed) with per-device test accuracies and their mean.
    """
    x, y, devices, pools, (tr, va, te) = cross_device_data(setup, data_seed)
    dv = np.asarray(devices)
    rows = []
    for variant, cfg in (("cmm", model), ("identity", replace(model, cmm=False))):
        for s in seeds:
            t0 = time.perf_counter()
            params, hist = cm.train(x[tr], y[tr], dv[tr].tolist(), pools, cfg, replace(tcfg, seed=s),
                                    val=(x[va], y[va], dv[va].tolist()))
            pred = cm.predict(x[te], dv[te].tolist(), pools, params, cfg, seed=s)
            acc = per_device_accuracy(pred, y[te], dv[te])
            rows.append({"variant": variant, "seed": s, "epochs": len(hist),
                         "mean_device_acc": float(np.mean(list(acc.values()))),
                         **{f"acc_{d}": v for d, v in acc.items()},
                         "seconds": time.perf_counter() - t0})
    return rows


def summarize_cmm(rows) -> dict[str, float]:
    out = {}
    for variant in ("cmm", "identity"):
        out[variant] = float(np.mean([r["mean_device_acc"] for r in rows if r["variant"] == variant]))
    return out


__all__ = [
    "COMBINATIONS", "bench_layout", "trigger_rates", "CrossDeviceSetup", "cross_device_data",
    "cmm_comparison", "summarize_cmm", "per_device_accuracy", "PROFILES",
]
