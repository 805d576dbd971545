"""BSS-eval style SDR/SIR/SAR via filtered projections, SI-SDR, and aggregation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

INF_RATIO = 1e-12
GRAM_TIKHONOV = 1e-10


class MetricError(ValueError):
    pass


@dataclass
class Decomposition:
    s_target: np.ndarray
    e_interf: np.ndarray
    e_artif: np.ndarray
    filter_len: int


def _as_array(x):
    return np.asarray(getattr(x, "samples", x), dtype=np.float64)


def _xcorr(a, b, max_lag, nfft):
    """c[k] = sum_t a[t] * b[t + k] for k = 0..max_lag-1 via FFT."""
    fa = np.fft.rfft(a, nfft)
    fb = np.fft.rfft(b, nfft)
    return np.fft.irfft(np.conj(fa) * fb, nfft)[:max_lag]


def _project(refs, est, flen):
    """Least-squares projection of ``est`` onto all delays 0..flen-1 of ``refs``.

    Signals are zero-extended by flen-1 samples so the delayed copies are
    exact shifts and the Gram matrix is block Toeplitz. Returns the
    projection, of length n + flen - 1.
    """
    k, n = refs.shape
    total = n + flen - 1
    nfft = 1 << int(math.ceil(math.log2(total + flen)))
    gram = np.empty((k * flen, k * flen))
    for i in range(k):
        for j in range(k):
            # <ref_i delayed by a, ref_j delayed by b> = sum_u ref_i[u] ref_j[u + a - b]
            pos = _xcorr(refs[i], refs[j], flen, nfft)
            neg = _xcorr(refs[j], refs[i], flen, nfft)
            gram[i * flen : (i + 1) * flen, j * flen : (j + 1) * flen] = scipy.linalg.toeplitz(pos, neg)
    rhs = np.concatenate([_xcorr(refs[i], est, flen, nfft) for i in range(k)])
    gram[np.diag_indices_from(gram)] += GRAM_TIKHONOV * np.trace(gram) / gram.shape[0]
    try:
        coef = scipy.linalg.solve(gram, rhs, assume_a="pos")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        raise MetricError(f"singular Gram matrix for references {list(range(k))}; are they linearly dependent?") from exc
    proj = np.zeros(total)
    for i in range(k):
        proj += np.convolve(refs[i], coef[i * flen : (i + 1) * flen])
    return proj


def bss_decompose(estimate, ref_target, ref_interf, filter_len=512):
    """Split ``estimate`` into target, interference and artifact components."""
    est = _as_array(estimate)
    s = _as_array(ref_target)
    b = _as_array(ref_interf)
    if not (len(est) == len(s) == len(b)):
        raise MetricError(f"length mismatch: estimate {len(est)}, target {len(s)}, interference {len(b)}")
    if len(est) < filter_len:
        raise MetricError(f"signals of {len(est)} samples are shorter than the {filter_len}-tap filter")
    if not np.any(s):
        raise MetricError("target reference is all zeros")
    est_pad = np.concatenate([est, np.zeros(filter_len - 1)])
    s_target = _project(s[None], est, filter_len)
    p_all = _project(np.stack([s, b]), est, filter_len)
    return Decomposition(s_target, p_all - s_target, est_pad - p_all, filter_len)


def _ratio_db(num, den):
    if num <= 0:
        raise MetricError("numerator energy is zero; metric undefined")
    if den < INF_RATIO * num:
        return math.inf
    return 10.0 * math.log10(num / den)


def _energy(x):
    return float(np.dot(x, x))


def sdr(d):
    return _ratio_db(_energy(d.s_target), _energy(d.e_interf + d.e_artif))


def sir(d):
    return _ratio_db(_energy(d.s_target), _energy(d.e_interf))


def sar(d):
    return _ratio_db(_energy(d.s_target + d.e_interf), _energy(d.e_artif))


def bss_eval(estimate, ref_target, ref_interf, filter_len=512):
    d = bss_decompose(estimate, ref_target, ref_interf, filter_len)
    return {"sdr": sdr(d), "sir": sir(d), "sar": sar(d)}


def si_sdr(estimate, reference):
    """Scale-invariant SDR with both signals zero-meaned first."""
    est = _as_array(estimate)
    ref = _as_array(reference)
    if len(est) != len(ref):
        raise MetricError(f"length mismatch: {len(est)} vs {len(ref)}")
    est = est - est.mean()
    ref = ref - ref.mean()
    e_ref = _energy(ref)
    if e_ref <= 0:
        raise MetricError("reference is zero after mean removal")
    alpha = float(np.dot(est, ref)) / e_ref
    target = alpha * ref
    return _ratio_db(_energy(target), _energy(target - est))


def all_metrics(estimate, ref_target, ref_interf, filter_len=512):
    out = bss_eval(estimate, ref_target, ref_interf, filter_len)
    out["si_sdr"] = si_sdr(estimate, ref_target)
    return out


METRICS = ("sdr", "sir", "sar", "si_sdr")


def summarize(values):
    """Mean/median/quartiles over finite values; infinite and failed entries are counted."""
    vals = [v for v in values if v is not None]
    finite = np.array([v for v in vals if math.isfinite(v)], dtype=np.float64)
    out = {
        "count": len(values),
        "finite_count": int(finite.size),
        "inf_count": sum(1 for v in vals if not math.isfinite(v)),
        "failed_count": len(values) - len(vals),
    }
    if finite.size:
        q1, med, q3 = np.percentile(finite, [25, 50, 75])
        out.update(mean=float(finite.mean()), median=float(med), q1=float(q1), q3=float(q3), min=float(finite.min()), max=float(finite.max()))
    else:
        out.update(mean=None, median=None, q1=None, q3=None, min=None, max=None)
    return out


def aggregate(rows):
    return {m: summarize([r.get(m) for r in rows]) for m in METRICS}


def _encode(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if isinstance(v, dict):
        return {k: _encode(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_encode(x) for x in v]
    return v


def _decode(v):
    if v == "inf":
        return math.inf
    if v == "-inf":
        return -math.inf
    if isinstance(v, dict):
        return {k: _decode(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_decode(x) for x in v]
    return v


def report_to_json(report):
    return json.dumps(_encode(report), sort_keys=True, indent=2)


def report_from_json(text):
    return _decode(json.loads(text))


def report_to_csv(report):
    """One line per system, columns in the order SDR, SIR, SAR, SI-SDR (medians and means)."""
    lines = ["system,statistic,SDR,SIR,SAR,SI-SDR"]
    for system, block in report["systems"].items():
        for stat in ("median", "mean"):
            vals = [block["aggregate"][m][stat] for m in METRICS]
            lines.append(",".join([system, stat] + ["" if v is None else f"{v:.2f}" for v in vals]))
    return "\n".join(lines) + "\n"
