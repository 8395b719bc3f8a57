"""The five learnable components: region-scoring policy, value head, gated
attention slide classifier, local set-pooling updater, and global residual
updater — plus their pretraining procedures and the checkpoint format.

All forwards take an optional tape; with a tape they return kernel Vars for
training, without one they return plain ndarrays.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import numkernel as K
from . import slidegen

CHECKPOINT_MAGIC = b"RLGN"
CHECKPOINT_VERSION = 1

DEFAULT_ARCH = {
    "hidden": 64,
    "attn_dim": 32,
    "embed_dim": 64,
}


class NetsError(Exception):
    pass


class EmptyRegionError(NetsError):
    pass


class DegenerateLabelsError(NetsError):
    pass


@dataclass
class NetworkBundle:
    d: int
    arch: dict
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def subset(self, *prefixes: str) -> dict[str, np.ndarray]:
        """Live view of the parameters under the given prefixes (shared arrays,
        so in-place optimizer updates land in the bundle)."""
        return {k: v for k, v in self.params.items()
                if any(k.startswith(p + "/") for p in prefixes)}


def _linear(rng, params, name, fan_in, fan_out, zero=False, scale=1.0):
    w, b = K.init_linear(rng, fan_in, fan_out, zero=zero)
    if scale != 1.0:
        w *= scale
    params[name + ".w"] = w
    params[name + ".b"] = b


def init_bundle(d: int, seed: int = 0, arch: dict | None = None) -> NetworkBundle:
    arch = {**DEFAULT_ARCH, **(arch or {})}
    rng = np.random.default_rng(seed)
    h = arch["hidden"]
    a = arch["attn_dim"]
    e = arch["embed_dim"]
    p: dict[str, np.ndarray] = {}
    # policy: shared per-region scorer on [v_i ; mean ; max ; observed ; t/T]
    _linear(rng, p, "policy/l0", 3 * d + 2, h)
    _linear(rng, p, "policy/l1", h, 1, scale=0.01)  # near-uniform initial policy
    # value head on [mean ; max ; t/T], zero final layer -> value 0 at init
    _linear(rng, p, "value/l0", 2 * d + 1, h)
    _linear(rng, p, "value/l1", h, 1, zero=True)
    # classifier: embed rows [v_i ; v_i - rowmean ; observed_i], gated
    # attention with a mean-pooled context branch, sigmoid head
    _linear(rng, p, "clf/embed", 2 * d + 1, e)
    _linear(rng, p, "clf/att_v", e, a)
    _linear(rng, p, "clf/att_u", e, a)
    _linear(rng, p, "clf/att_w", a, 1)
    # head sees [attention-pooled ; mean-pooled ; mean/max/max-centered stats]
    _linear(rng, p, "clf/head", 2 * e + 3 * d, 1)
    # local updater: attention-pooled set network with residual output head
    _linear(rng, p, "local/score0", d, a)
    _linear(rng, p, "local/score1", a, 1)
    _linear(rng, p, "local/corr0", d, h)
    _linear(rng, p, "local/corr1", h, d, zero=True)
    # global updater: residual MLP on [v_i ; v_a ; v'_a], identity at init
    _linear(rng, p, "global/corr0", 3 * d, h)
    _linear(rng, p, "global/corr1", h, d, zero=True)
    return NetworkBundle(d=d, arch=arch, params=p)


def _p(tape, params, name):
    return tape.param(name, params[name]) if tape is not None else params[name]


def _dense(tape, params, name, x, act=None):
    out = K.add(tape, K.matmul(tape, x, _p(tape, params, name + ".w")),
                _p(tape, params, name + ".b"))
    if act is not None:
        out = act(tape, out)
    return out


# ---------------------------------------------------------------------------
# policy and value


def build_policy_view(current_scan: np.ndarray, observed: np.ndarray,
                      t: int, T: int) -> np.ndarray:
    """Per-region input rows [v_i ; mean-pool ; max-pool ; observed_i ; t/T]."""
    N = current_scan.shape[0]
    context = np.concatenate([current_scan.mean(axis=0), current_scan.max(axis=0)])
    view = np.concatenate([
        current_scan,
        np.broadcast_to(context, (N, context.size)),
        observed.astype(np.float32)[:, None],
        np.full((N, 1), t / T, dtype=np.float32),
    ], axis=1)
    return view.astype(np.float32)


def build_value_input(current_scan: np.ndarray, t: int, T: int) -> np.ndarray:
    return np.concatenate([current_scan.mean(axis=0), current_scan.max(axis=0),
                           [t / T]]).astype(np.float32)


def policy_logits_from_view(bundle: NetworkBundle, view: np.ndarray, tape=None):
    """Shared scorer applied to every region row; returns N logits."""
    h = _dense(tape, bundle.params, "policy/l0", view, K.relu)
    out = _dense(tape, bundle.params, "policy/l1", h)
    return K.reshape(tape, out, (view.shape[0],))


def policy_logits(bundle: NetworkBundle, state, tape=None):
    view = build_policy_view(state.current_scan, state.observed, state.t, state.T)
    return policy_logits_from_view(bundle, view, tape=tape)


def value_from_input(bundle: NetworkBundle, vin: np.ndarray, tape=None):
    h = _dense(tape, bundle.params, "value/l0", vin[None, :], K.relu)
    out = _dense(tape, bundle.params, "value/l1", h)
    return K.reshape(tape, out, ())


def value_estimate(bundle: NetworkBundle, state) -> float:
    vin = build_value_input(state.current_scan, state.t, state.T)
    return float(value_from_input(bundle, vin))


# ---------------------------------------------------------------------------
# classifier


def _classifier_head_input(bundle: NetworkBundle, scan: np.ndarray,
                           observed: np.ndarray | None = None, tape=None,
                           obs_mode: str = "full"):
    """(1, 2e+3d) head input: [attention-pooled emb ; mean emb ; statistics]."""
    if observed is None:
        observed = np.zeros(scan.shape[0], dtype=bool)
    if obs_mode == "observed_only" and observed.any():
        # restrict every pathway to the observed subset
        scan = scan[observed]
        observed = np.ones(scan.shape[0], dtype=bool)
    N = scan.shape[0]
    centered = scan - scan.mean(axis=0)
    rows = np.concatenate([scan, centered,
                           observed.astype(np.float32)[:, None]],
                          axis=1).astype(np.float32)
    emb = _dense(tape, bundle.params, "clf/embed", rows, K.relu)
    gate_v = _dense(tape, bundle.params, "clf/att_v", emb, K.tanh)
    gate_u = _dense(tape, bundle.params, "clf/att_u", emb, K.sigmoid)
    scores = _dense(tape, bundle.params, "clf/att_w",
                    K.mul(tape, gate_v, gate_u))  # (N,1)
    scores = K.reshape(tape, scores, (1, N))
    alpha = K.softmax_rows(tape, scores)  # (1,N)
    pooled = K.matmul(tape, alpha, emb)   # (1,embed)
    # mean-pooled context branch lets the head cancel slide-wide shifts
    ctx = K.reduce_mean(tape, emb, axis=0, keepdims=True)
    # fixed pooled statistics: a linear readout of [mean ; max ; max-centered]
    # already separates the classes, so the head starts from that floor
    stats = np.concatenate([scan.mean(axis=0), scan.max(axis=0),
                            centered.max(axis=0)])
    return K.concat(tape, [pooled, ctx, stats[None, :].astype(np.float32)],
                    axis=1)


def classifier_logit(bundle: NetworkBundle, scan: np.ndarray,
                     observed: np.ndarray | None = None, tape=None,
                     obs_mode: str = "full"):
    """Gated-attention pooling over region rows -> slide logit."""
    head_in = _classifier_head_input(bundle, scan, observed, tape=tape,
                                     obs_mode=obs_mode)
    logit = _dense(tape, bundle.params, "clf/head", head_in)
    return K.reshape(tape, logit, ())


def classifier_attention(bundle: NetworkBundle, scan: np.ndarray,
                         observed: np.ndarray | None = None) -> np.ndarray:
    """Attention weights only (diagnostics)."""
    N = scan.shape[0]
    if observed is None:
        observed = np.zeros(N, dtype=bool)
    centered = scan - scan.mean(axis=0)
    rows = np.concatenate([scan, centered,
                           observed.astype(np.float32)[:, None]], axis=1)
    emb = _dense(None, bundle.params, "clf/embed", rows.astype(np.float32), K.relu)
    gate_v = _dense(None, bundle.params, "clf/att_v", emb, K.tanh)
    gate_u = _dense(None, bundle.params, "clf/att_u", emb, K.sigmoid)
    scores = _dense(None, bundle.params, "clf/att_w", gate_v * gate_u)
    return K.softmax_rows(None, scores.reshape(1, N)).ravel()


def classify_slide(bundle: NetworkBundle, scan: np.ndarray,
                   observed: np.ndarray | None = None,
                   obs_mode: str = "full") -> float:
    logit = classifier_logit(bundle, scan, observed, tape=None, obs_mode=obs_mode)
    return float(1.0 / (1.0 + np.exp(-float(logit))))


# ---------------------------------------------------------------------------
# feature updaters


def local_update_batch(bundle: NetworkBundle, subs: np.ndarray, tape=None):
    """Attention-pooled set aggregation of sub-patch features, (B,K,d)->(B,d)."""
    B, Kn, d = subs.shape
    if Kn == 0:
        raise EmptyRegionError("region has no sub-patches")
    flat = subs.reshape(B * Kn, d).astype(np.float32)
    s = _dense(tape, bundle.params, "local/score0", flat, K.relu)
    s = _dense(tape, bundle.params, "local/score1", s)  # (B*K,1)
    alpha = K.softmax_rows(tape, K.reshape(tape, s, (B, Kn)))
    pooled = K.attn_pool(tape, alpha, subs.astype(np.float32))  # (B,d)
    corr = _dense(tape, bundle.params, "local/corr0", pooled, K.relu)
    corr = _dense(tape, bundle.params, "local/corr1", corr)
    return K.add(tape, pooled, corr)


def local_update(bundle: NetworkBundle, sub_features: np.ndarray) -> np.ndarray:
    if sub_features.ndim != 2 or sub_features.shape[0] == 0:
        raise EmptyRegionError("expected nonempty (K,d) sub-feature matrix")
    return np.asarray(local_update_batch(bundle, sub_features[None, :, :]))[0]


def global_update_batch(bundle: NetworkBundle, v_rows: np.ndarray,
                        v_a: np.ndarray, v_a_new: np.ndarray, tape=None):
    """Residual update of unobserved rows conditioned on the observed
    (before, after) pair; identity at initialization."""
    M = v_rows.shape[0]
    x = np.concatenate([
        v_rows,
        np.broadcast_to(v_a, (M, v_a.size)),
        np.broadcast_to(v_a_new, (M, v_a_new.size)),
    ], axis=1).astype(np.float32)
    corr = _dense(tape, bundle.params, "global/corr0", x, K.relu)
    corr = _dense(tape, bundle.params, "global/corr1", corr)
    return K.add(tape, corr, v_rows.astype(np.float32))


def global_update_pairs(bundle: NetworkBundle, x: np.ndarray, tape=None):
    """Same head on precomputed (M,3d) inputs [v_i ; v_a ; v'_a]."""
    corr = _dense(tape, bundle.params, "global/corr0", x, K.relu)
    corr = _dense(tape, bundle.params, "global/corr1", corr)
    return K.add(tape, corr, x[:, :bundle.d])


def global_update(bundle: NetworkBundle, v_i: np.ndarray, v_a: np.ndarray,
                  v_a_new: np.ndarray) -> np.ndarray:
    return np.asarray(global_update_batch(bundle, v_i[None, :], v_a, v_a_new))[0]


# ---------------------------------------------------------------------------
# checkpoint format


def save_bundle(bundle: NetworkBundle, path: str):
    names = sorted(bundle.params)
    header = {
        "d": bundle.d,
        "arch": bundle.arch,
        "params": [{"name": n, "shape": list(bundle.params[n].shape)}
                   for n in names],
    }
    hdr = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(hdr)))
        f.write(hdr)
        for n in names:
            f.write(np.ascontiguousarray(bundle.params[n], dtype="<f4").tobytes())


def load_bundle(path: str) -> NetworkBundle:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise NetsError(f"bad checkpoint magic {blob[:4]!r}")
    version, hdr_len = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise NetsError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[12:12 + hdr_len].decode())
    off = 12 + hdr_len
    params = {}
    for spec in header["params"]:
        shape = tuple(spec["shape"])
        size = int(np.prod(shape)) if shape else 1
        if off + 4 * size > len(blob):
            raise NetsError(f"checkpoint truncated: need {off + 4 * size} "
                            f"bytes, have {len(blob)}")
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=off)
        params[spec["name"]] = arr.reshape(shape).copy()
        off += 4 * size
    if off != len(blob):
        raise NetsError(f"checkpoint length mismatch: expected {off}, got {len(blob)}")
    return NetworkBundle(d=header["d"], arch=header["arch"], params=params)


# ---------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainReport:
    heldout_auc: float = 0.0
    epoch_losses: list[float] = field(default_factory=list)
    local_rel_l2: float = 0.0
    global_mse: float = 0.0
    identity_mse: float = 0.0


def _split_slides(bundles, heldout_fraction, rng):
    """Label-stratified split so the held-out side sees both classes whenever
    the input does (small manifests would otherwise flip a coin)."""
    train, heldout = [], []
    for label in (0, 1):
        pool = [b for b in bundles if b.label == label]
        idx = rng.permutation(len(pool))
        cut = max(1, int(round(len(pool) * (1 - heldout_fraction))))
        train += [pool[i] for i in idx[:cut]]
        heldout += [pool[i] for i in idx[cut:]]
    return train, heldout


def pretrain_classifier(manifest: slidegen.DatasetManifest, epochs: int = 60,
                        lr: float = 1e-3, seed: int = 0,
                        bundle: NetworkBundle | None = None,
                        heldout_fraction: float = 0.2,
                        weight_decay: float = 1e-4,
                        shift_augment: float = 2.0):
    """Cold-start the classifier on raw scanning features (no observation),
    with binary cross-entropy; early-stops on held-out AUC to keep the
    attention head from memorizing slide latents."""
    from .evalharness import compute_auc

    slides = slidegen.load_bundles(manifest)
    labels = {s.label for s in slides}
    if len(labels) < 2:
        raise DegenerateLabelsError("training manifest has a single class")
    d = slides[0].d
    if bundle is None:
        bundle = init_bundle(d, seed=seed)
    rng = np.random.default_rng(seed + 1)
    train, held = _split_slides(slides, heldout_fraction, rng)
    params = bundle.subset("clf")
    adam = K.AdamState(learning_rate=lr)
    report = PretrainReport()
    best_auc, best_params = -1.0, None

    # warm-start the linear head full-batch on frozen embeddings: the pooled
    # statistics alone separate the classes, and per-slide SGD is slow to
    # find that plane from scratch
    head_in = np.stack([np.asarray(_classifier_head_input(bundle, s.scan_features))
                        .ravel() for s in train])
    y = np.array([s.label for s in train], dtype=np.float32)
    head = {k: params[k] for k in ("clf/head.w", "clf/head.b")}
    adam_head = K.AdamState(learning_rate=1e-2)
    for _ in range(300):
        tape = K.Tape()
        logits = K.reshape(tape, _dense(tape, bundle.params, "clf/head", head_in),
                           (len(train),))
        probs = K.sigmoid(tape, logits)
        err = K.sub(tape, probs, y)
        loss = K.reduce_mean(tape, K.mul(tape, err, err))
        K.adam_step(head, K.backward(tape, loss), adam_head)

    for _epoch in range(epochs):
        order = rng.permutation(len(train))
        total = 0.0
        for i in order:
            s = train[i]
            feats = s.scan_features
            if shift_augment:
                # fresh slide-wide offset per pass: the slide latent is not a
                # usable fingerprint, within-slide contrast is preserved
                shift = rng.normal(0.0, shift_augment, size=s.d).astype(np.float32)
                feats = feats + shift
            tape = K.Tape()
            logit = classifier_logit(bundle, feats, tape=tape)
            loss = K.bce_with_logit(tape, logit, s.label)
            total += float(loss.value)
            grads = K.backward(tape, loss)
            if weight_decay:
                for name, g in grads.items():
                    g += weight_decay * params[name]
            K.adam_step(params, grads, adam)
        report.epoch_losses.append(total / len(train))
        scores = [(classify_slide(bundle, s.scan_features), s.label) for s in held]
        auc = compute_auc(scores)
        if auc > best_auc:
            best_auc = auc
            best_params = {k: v.copy() for k, v in params.items()}
    for k in params:
        params[k][...] = best_params[k]
    report.heldout_auc = best_auc
    return bundle, report


def _all_regions(slides):
    subs = np.concatenate([s.sub_features for s in slides], axis=0)
    scans = np.concatenate([s.scan_features for s in slides], axis=0)
    return subs, scans


def pretrain_updaters(manifest: slidegen.DatasetManifest, epochs: int = 6,
                      lr: float = 1e-3, seed: int = 0,
                      bundle: NetworkBundle | None = None,
                      batch_size: int = 64, pair_samples_per_slide: int = 64,
                      heldout_fraction: float = 0.2):
    """Phase 1: regress the local updater onto the sub-feature mean, then
    freeze it. Phase 2: train the global updater to predict the local
    updater's output for unobserved regions from an observed feature pair."""
    slides = slidegen.load_bundles(manifest)
    d = slides[0].d
    if bundle is None:
        bundle = init_bundle(d, seed=seed)
    rng = np.random.default_rng(seed + 2)
    train, held = _split_slides(slides, heldout_fraction, rng)
    report = PretrainReport()

    # phase 1: self-supervised mean regression
    subs_tr, _ = _all_regions(train)
    targets_tr = subs_tr.mean(axis=1)
    params_local = bundle.subset("local")
    adam = K.AdamState(learning_rate=lr)
    n = subs_tr.shape[0]
    for _epoch in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            sel = order[lo:lo + batch_size]
            tape = K.Tape()
            out = local_update_batch(bundle, subs_tr[sel], tape=tape)
            err = K.sub(tape, out, targets_tr[sel].astype(np.float32))
            loss = K.reduce_mean(tape, K.mul(tape, err, err))
            grads = K.backward(tape, loss)
            K.adam_step(params_local, grads, adam)
    subs_he, _ = _all_regions(held)
    targets_he = subs_he.mean(axis=1)
    pred_he = np.asarray(local_update_batch(bundle, subs_he))
    report.local_rel_l2 = float(
        np.sqrt(np.sum((pred_he - targets_he) ** 2) / np.sum(targets_he ** 2)))

    # phase 2: global updater regression against the frozen local updater.
    # Inputs are sampled from simulated observation trajectories that apply
    # the *current* global updater, so iterated application at play time stays
    # on-distribution and does not collapse unobserved rows.
    params_global = bundle.subset("global")
    adam2 = K.AdamState(learning_rate=lr)

    def trajectory_samples(s, targets, collect):
        state = s.scan_features.copy()
        unobserved = np.ones(s.N, dtype=bool)
        steps = max(1, int(math.ceil(rng.uniform(0.1, 0.5) * s.N)))
        per_step = max(1, pair_samples_per_slide // steps)
        for _step in range(steps):
            choices = np.flatnonzero(unobserved)
            a = int(choices[rng.integers(choices.size)])
            v_a = state[a].copy()
            m_a = targets[a]
            others = np.flatnonzero(unobserved)
            others = others[others != a]
            if others.size:
                sel = others[rng.integers(others.size, size=min(per_step, others.size))]
                x = np.concatenate([
                    state[sel],
                    np.broadcast_to(v_a, (sel.size, s.d)),
                    np.broadcast_to(m_a, (sel.size, s.d)),
                ], axis=1).astype(np.float32)
                collect(x, targets[sel])
            unobserved[a] = False
            state[a] = m_a
            rest = np.flatnonzero(unobserved)
            if rest.size:
                state[rest] = np.asarray(
                    global_update_pairs(bundle, np.concatenate([
                        state[rest],
                        np.broadcast_to(v_a, (rest.size, s.d)),
                        np.broadcast_to(m_a, (rest.size, s.d)),
                    ], axis=1).astype(np.float32)), dtype=np.float32)

    local_targets = {id(s): np.asarray(local_update_batch(bundle, s.sub_features),
                                       dtype=np.float32) for s in train + held}
    pending_x: list[np.ndarray] = []
    pending_y: list[np.ndarray] = []

    def push(x, y):
        pending_x.append(x)
        pending_y.append(y)

    def raw_pair_samples(s, targets, collect):
        n_pairs = min(pair_samples_per_slide, s.N * (s.N - 1))
        i_idx = rng.integers(0, s.N, size=n_pairs)
        a_idx = rng.integers(0, s.N, size=n_pairs)
        keep = i_idx != a_idx
        i_idx, a_idx = i_idx[keep], a_idx[keep]
        collect(np.concatenate([s.scan_features[i_idx], s.scan_features[a_idx],
                                targets[a_idx]], axis=1).astype(np.float32),
                targets[i_idx])

    for _epoch in range(epochs):
        for si in rng.permutation(len(train)):
            s = train[si]
            trajectory_samples(s, local_targets[id(s)], push)
            raw_pair_samples(s, local_targets[id(s)], push)
            while sum(len(b) for b in pending_x) >= batch_size:
                X = np.concatenate(pending_x)[:batch_size * 2]
                Y = np.concatenate(pending_y)[:batch_size * 2]
                pending_x.clear()
                pending_y.clear()
                for lo in range(0, X.shape[0], batch_size):
                    tape = K.Tape()
                    out = global_update_pairs(bundle, X[lo:lo + batch_size], tape=tape)
                    err = K.sub(tape, out, Y[lo:lo + batch_size])
                    loss = K.reduce_mean(tape, K.mul(tape, err, err))
                    grads = K.backward(tape, loss)
                    K.adam_step(params_global, grads, adam2)

    # held-out check on raw first-application pairs vs the identity baseline
    xs, ys, ident = [], [], []
    for s in held:
        m = local_targets[id(s)]
        n_pairs = min(pair_samples_per_slide, s.N * (s.N - 1))
        i_idx = rng.integers(0, s.N, size=n_pairs)
        a_idx = rng.integers(0, s.N, size=n_pairs)
        keep = i_idx != a_idx
        i_idx, a_idx = i_idx[keep], a_idx[keep]
        xs.append(np.concatenate([s.scan_features[i_idx],
                                  s.scan_features[a_idx], m[a_idx]], axis=1))
        ys.append(m[i_idx])
        ident.append(s.scan_features[i_idx])
    X_he = np.concatenate(xs).astype(np.float32)
    Y_he = np.concatenate(ys)
    pred = np.asarray(global_update_pairs(bundle, X_he))
    report.global_mse = float(np.mean((pred - Y_he) ** 2))
    report.identity_mse = float(np.mean((np.concatenate(ident) - Y_he) ** 2))
    return bundle, report
