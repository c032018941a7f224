"""Per-patch MLP adapter with a dense or sparse-binary decision head.

The model maps frozen patch embeddings [N_p x D] row-wise through an MLP
to feature maps F [N_p x N_f], average-pools them to a feature vector f,
and classifies with either a real-valued dense head or a frozen binary
head over a selected feature subset. Training optimizes cross entropy
plus a spatial diversity term and L1 sparsity terms, all with hand-coded
backward passes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .formats import Checkpoint, EmbeddingSet, StructureError
from .rng import stream


@dataclass
class TrainConfig:
    stage: str  # "dense" or "finetune"
    epochs: int
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.0
    dropout_p: float = 0.0
    lambda_div: float = 0.0
    lambda_l1_fv: float = 0.0
    lambda_l1_fm: float = 0.0
    seed: int = 0
    schedule_free: bool = False

    def validate(self) -> None:
        if self.stage not in ("dense", "finetune"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if min(self.lambda_div, self.lambda_l1_fv, self.lambda_l1_fm) < 0:
            raise ValueError("loss weights must be >= 0")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be >= 0")


def diversity_loss(F: np.ndarray, f: np.ndarray,
                   w_row: np.ndarray) -> tuple[float, bool, dict | None]:
    """Negative coverage of the per-cell best scaled feature map.

    Each feature map is spatially softmaxed, then scaled by its share of
    the feature vector (f_d / max f) and of the class row (|w_d| / ||w||).
    The loss is minus the sum over cells of the best scaled value, so it
    is minimized when few strong features tile the image. Returns
    (loss, degenerate, cache); degenerate inputs (max f == 0 or a zero
    weight row) yield (0.0, True, None) instead of dividing by zero.
    """
    m = float(f.max())
    n2 = float(np.sqrt(np.sum(w_row.astype(np.float64) ** 2)))
    if m == 0.0 or n2 == 0.0:
        return 0.0, True, None
    z = F - F.max(axis=0, keepdims=True)
    e = np.exp(z)
    sigma = e / e.sum(axis=0, keepdims=True)  # spatial softmax per feature
    alpha = f / m
    beta = np.abs(w_row) / n2
    scale = alpha * beta
    s_hat = sigma * scale[None, :]
    dstar = np.argmax(s_hat, axis=1)
    rows = np.arange(F.shape[0])
    loss = -float(s_hat[rows, dstar].sum(dtype=np.float64))
    cache = dict(sigma=sigma, alpha=alpha, beta=beta, scale=scale,
                 dstar=dstar, m=m, n2=n2, f=f, w_row=w_row)
    return loss, False, cache


def diversity_backward(cache: dict) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of the diversity loss w.r.t. (F, f, w_row).

    The per-cell argmax and the max/argmax inside the scale factors are
    treated as locally constant, which is the a.e. derivative.
    """
    sigma = cache["sigma"]
    p, n_f = sigma.shape
    rows = np.arange(p)
    g = np.zeros_like(sigma)
    g[rows, cache["dstar"]] = -1.0  # dL/dS_hat
    scale = cache["scale"]
    dsigma = g * scale[None, :]
    dscale = (g * sigma).sum(axis=0, dtype=np.float64).astype(sigma.dtype)
    # softmax backward, independently per feature column
    dF = sigma * (dsigma - (dsigma * sigma).sum(axis=0, keepdims=True))
    dalpha = dscale * cache["beta"]
    dbeta = dscale * cache["alpha"]
    m = cache["m"]
    f = cache["f"]
    dm_idx = int(np.argmax(f))
    df = dalpha / m
    df[dm_idx] -= float(np.dot(dalpha, f)) / (m * m)
    w = cache["w_row"]
    n2 = cache["n2"]
    dw = dbeta * np.sign(w) / n2 \
        - (float(np.dot(dbeta, np.abs(w))) / n2 ** 3) * w
    return dF, df.astype(sigma.dtype), dw.astype(sigma.dtype)


def l1_feature_vector(f: np.ndarray) -> float:
    return float(np.mean(np.abs(f), dtype=np.float64))


def l1_feature_maps(F: np.ndarray) -> float:
    return float(np.mean(np.abs(F), dtype=np.float64))


class AdapterModel:
    """MLP over patch rows plus a decision head over the pooled vector.

    ``n_layers`` linear layers with BatchNorm+ReLU between them and a bare
    final layer; the head is real-valued Kaiming-initialized in dense mode
    and a frozen 0/1 matrix over the selected features in sparse mode.
    Decision layers carry no bias.
    """

    def __init__(self, in_dim: int, hidden: int, n_features: int,
                 n_classes: int, n_layers: int = 4, dropout_p: float = 0.2,
                 bn_momentum: float = 0.1, bn_eps: float = 1e-5,
                 seed: int = 0, init: bool = True, dtype=np.float32):
        if n_layers < 1:
            raise ValueError("need at least one linear layer")
        if min(in_dim, hidden, n_features, n_classes) < 1:
            raise ValueError("all dims must be positive")
        self.in_dim = in_dim
        self.hidden = hidden
        self.n_features = n_features
        self.n_classes = n_classes
        self.n_layers = n_layers
        self.dropout_p = dropout_p
        self.bn_momentum = bn_momentum
        self.bn_eps = bn_eps
        dims = ([in_dim] + [hidden] * (n_layers - 1) + [n_features]) \
            if n_layers > 1 else [in_dim, n_features]
        self.linears = [
            nn.Linear(dims[i], dims[i + 1],
                      stream(seed, "init", "mlp", i) if init else None,
                      dtype=dtype)
            for i in range(n_layers)]
        self.bns = [nn.BatchNorm(dims[i + 1], bn_momentum, bn_eps, dtype=dtype)
                    for i in range(n_layers - 1)]
        self.head_mode = "dense"
        if init:
            self.w_dense = nn.kaiming_uniform(stream(seed, "init", "head"),
                                              n_classes, n_features, dtype)
        else:
            self.w_dense = np.zeros((n_classes, n_features), dtype=dtype)
        self.selected: np.ndarray | None = None
        self.assignment: np.ndarray | None = None
        self.w_sparse: np.ndarray | None = None
        self._relu_in: list[np.ndarray] = []

    # ---- head management -------------------------------------------------

    def set_sparse_head(self, selected: np.ndarray, assignment: np.ndarray) -> None:
        selected = np.asarray(selected, dtype=np.uint32)
        assignment = np.asarray(assignment, dtype=np.uint8)
        if selected.ndim != 1 or len(set(selected.tolist())) != selected.size:
            raise StructureError("selected indices must be unique")
        if selected.size and selected.max() >= self.n_features:
            raise StructureError("selected index out of range")
        if assignment.shape != (self.n_classes, selected.size):
            raise StructureError("assignment must be [n_classes x n_selected]")
        if not np.isin(assignment, (0, 1)).all():
            raise StructureError("assignment entries must be 0 or 1")
        row_sums = assignment.sum(axis=1)
        if row_sums.size and not (row_sums == row_sums[0]).all():
            raise StructureError("every class must use the same feature count")
        self.selected = selected
        self.assignment = assignment
        self.w_sparse = assignment.astype(np.float32)
        self.head_mode = "sparse"

    def sparse_fingerprint(self) -> str:
        """Digest of (selection, assignment); must survive finetuning."""
        import hashlib
        if self.head_mode != "sparse":
            raise ValueError("fingerprint requires a sparse head")
        h = hashlib.blake2b(digest_size=16)
        h.update(np.ascontiguousarray(self.selected, dtype="<u4").tobytes())
        h.update(np.ascontiguousarray(self.assignment, dtype=np.uint8).tobytes())
        return h.hexdigest()

    # ---- forward / backward ----------------------------------------------

    def mlp_forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        self._relu_in = []
        h = x
        for i, lin in enumerate(self.linears):
            h = lin.forward(h)
            if i < len(self.linears) - 1:
                h = self.bns[i].forward(h, train)
                self._relu_in.append(h)
                h = nn.relu(h)
        return h

    def mlp_backward(self, dout: np.ndarray) -> np.ndarray:
        d = dout
        for i in range(len(self.linears) - 1, -1, -1):
            if i < len(self.linears) - 1:
                d = nn.relu_backward(d, self._relu_in[i])
                d = self.bns[i].backward(d)
            d = self.linears[i].backward(d)
        return d

    def forward_batch(self, x: np.ndarray, train: bool = False,
                      drop_rng: np.random.Generator | None = None) -> dict:
        """Run [B x P x D] through MLP, pooling, and head; cache for backward."""
        if x.ndim != 3:
            raise nn.ShapeError(f"expected [B x P x D], got {x.shape}")
        b, p, d = x.shape
        if p == 0 or b == 0:
            raise nn.ShapeError("empty batch or empty patch grid")
        if d != self.in_dim:
            raise nn.ShapeError(f"embedding dim {d} != model dim {self.in_dim}")
        flat = self.mlp_forward(x.reshape(b * p, d), train)
        F = flat.reshape(b, p, self.n_features)
        f = F.mean(axis=1, dtype=np.float64).astype(F.dtype)
        mask = None
        f_used = f
        if train and self.head_mode == "dense" and self.dropout_p > 0.0:
            if drop_rng is None:
                raise ValueError("training dropout needs a generator")
            f_used, mask = nn.dropout(f, self.dropout_p, drop_rng, train=True)
        if self.head_mode == "dense":
            logits = f_used @ self.w_dense.T
        else:
            logits = f[:, self.selected] @ self.w_sparse.T
        return dict(F=F, f=f, f_used=f_used, mask=mask, logits=logits,
                    batch=b, patches=p)

    def forward(self, patches: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Single-image eval pass: (feature maps [P x N_f], f, logits)."""
        if patches.ndim != 2:
            raise nn.ShapeError(f"expected [P x D], got {patches.shape}")
        out = self.forward_batch(patches[None], train=False)
        return out["F"][0], out["f"][0], out["logits"][0]

    # ---- parameter plumbing ----------------------------------------------

    def param_dict(self) -> dict[str, np.ndarray]:
        """Arrays the optimizer may update. Sparse heads are never included."""
        params: dict[str, np.ndarray] = {}
        for i, lin in enumerate(self.linears):
            params[f"mlp{i}.weight"] = lin.weight
            params[f"mlp{i}.bias"] = lin.bias
        for i, bn in enumerate(self.bns):
            params[f"bn{i}.gamma"] = bn.gamma
            params[f"bn{i}.beta"] = bn.beta
        if self.head_mode == "dense":
            params["head.weight"] = self.w_dense
        return params

    def grad_dict(self) -> dict[str, np.ndarray]:
        grads: dict[str, np.ndarray] = {}
        for i, lin in enumerate(self.linears):
            grads[f"mlp{i}.weight"] = lin.gweight
            grads[f"mlp{i}.bias"] = lin.gbias
        for i, bn in enumerate(self.bns):
            grads[f"bn{i}.gamma"] = bn.ggamma
            grads[f"bn{i}.beta"] = bn.gbeta
        return grads

    def state_dict(self) -> dict[str, np.ndarray]:
        state = dict(self.param_dict())
        for i, bn in enumerate(self.bns):
            state[f"bn{i}.running_mean"] = bn.running_mean
            state[f"bn{i}.running_var"] = bn.running_var
        return state

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        targets = self.state_dict()
        for name, arr in arrays.items():
            if name not in targets:
                raise StructureError(f"unknown array {name!r} in checkpoint")
            if targets[name].shape != arr.shape:
                raise StructureError(f"shape mismatch for {name!r}")
            targets[name][...] = arr

    def astype(self, dtype) -> "AdapterModel":
        out = AdapterModel(self.in_dim, self.hidden, self.n_features,
                           self.n_classes, self.n_layers, self.dropout_p,
                           self.bn_momentum, self.bn_eps, init=False,
                           dtype=dtype)
        out.linears = [lin.astype(dtype) for lin in self.linears]
        out.bns = [bn.astype(dtype) for bn in self.bns]
        out.w_dense = self.w_dense.astype(dtype)
        if self.head_mode == "sparse":
            out.set_sparse_head(self.selected.copy(), self.assignment.copy())
        return out

    def to_checkpoint(self, config_hash: bytes) -> Checkpoint:
        return Checkpoint(
            head_mode=self.head_mode, n_layers=self.n_layers,
            in_dim=self.in_dim, hidden=self.hidden,
            n_features=self.n_features, n_classes=self.n_classes,
            dropout_p=self.dropout_p, bn_momentum=self.bn_momentum,
            bn_eps=self.bn_eps, config_hash=config_hash,
            selected=None if self.selected is None else self.selected.copy(),
            assignment=None if self.assignment is None else self.assignment.copy(),
            arrays={k: v.copy() for k, v in self.state_dict().items()})

    @classmethod
    def from_checkpoint(cls, ck: Checkpoint) -> "AdapterModel":
        model = cls(ck.in_dim, ck.hidden, ck.n_features, ck.n_classes,
                    ck.n_layers, ck.dropout_p, ck.bn_momentum, ck.bn_eps,
                    init=False)
        if ck.head_mode == "sparse":
            model.set_sparse_head(ck.selected, ck.assignment)
        model.load_state(ck.arrays)
        return model


def loss_and_grads(model: AdapterModel, x: np.ndarray, labels: np.ndarray,
                   cfg: TrainConfig, train: bool = True,
                   drop_rng: np.random.Generator | None = None
                   ) -> tuple[dict[str, float], dict[str, np.ndarray], dict]:
    """Batch loss terms and parameter gradients for one step.

    Loss = CE + lambda_div * L_div + lambda_l1_fv * Mean|f|
    + lambda_l1_fm * Mean|F|, each term batch-averaged. Dense stages also
    receive head gradients; sparse heads stay frozen by construction.
    """
    out = model.forward_batch(x, train=train, drop_rng=drop_rng)
    F, f, logits = out["F"], out["f"], out["logits"]
    b, p = out["batch"], out["patches"]
    n_f = model.n_features
    ce, dlogits = nn.cross_entropy(logits, labels)

    div_sum = 0.0
    degenerate = 0
    dF_extra = np.zeros_like(F)
    df_total = np.zeros_like(f)
    dw_head = np.zeros_like(model.w_dense)
    preds = np.argmax(logits, axis=1)

    if cfg.lambda_div > 0.0:
        w_div = cfg.lambda_div / b
        for i in range(b):
            c_hat = int(preds[i])
            if model.head_mode == "dense":
                loss_i, degen, cache = diversity_loss(F[i], f[i],
                                                      model.w_dense[c_hat])
                if degen:
                    degenerate += 1
                    continue
                dF_i, df_i, dw_i = diversity_backward(cache)
                dF_extra[i] += w_div * dF_i
                df_total[i] += w_div * df_i
                dw_head[c_hat] += w_div * dw_i
            else:
                sel = model.selected
                loss_i, degen, cache = diversity_loss(
                    F[i][:, sel], f[i][sel], model.w_sparse[c_hat])
                if degen:
                    degenerate += 1
                    continue
                dF_i, df_i, _ = diversity_backward(cache)  # head frozen
                dF_extra[i][:, sel] += w_div * dF_i
                df_total[i][sel] += w_div * df_i
            div_sum += loss_i
    div = div_sum / b

    l1_fv = l1_feature_vector(f)
    l1_fm = l1_feature_maps(F)
    if cfg.lambda_l1_fv > 0.0:
        df_total += (cfg.lambda_l1_fv / (b * n_f)) * np.sign(f)
    if cfg.lambda_l1_fm > 0.0:
        dF_extra += (cfg.lambda_l1_fm / (b * p * n_f)) * np.sign(F)

    total = ce + cfg.lambda_div * div + cfg.lambda_l1_fv * l1_fv \
        + cfg.lambda_l1_fm * l1_fm
    if not np.isfinite(total):
        raise nn.NumericError(
            f"non-finite loss: ce={ce} div={div} l1_fv={l1_fv} l1_fm={l1_fm}")

    # head backward
    if model.head_mode == "dense":
        f_used, mask = out["f_used"], out["mask"]
        dw_head += dlogits.T @ f_used
        df_used = dlogits @ model.w_dense
        if mask is not None:
            df_used = df_used * mask / (1.0 - model.dropout_p)
        df_total += df_used
    else:
        df_sel = dlogits @ model.w_sparse
        df_total[:, model.selected] += df_sel

    # pooling backward: every cell shares df / P
    dF = dF_extra + df_total[:, None, :] / p
    model.mlp_backward(dF.reshape(b * p, n_f))
    grads = model.grad_dict()
    if model.head_mode == "dense":
        grads["head.weight"] = dw_head

    terms = dict(ce=ce, div=div, l1_fv=l1_fv, l1_fm=l1_fm, total=total,
                 degenerate_div=degenerate)
    aux = dict(logits=logits, preds=preds, F=F, f=f)
    return terms, grads, aux


def train_stage(model: AdapterModel, data: EmbeddingSet,
                cfg: TrainConfig) -> list[dict]:
    """Run one training stage in place; returns the per-epoch log records.

    Dense stage trains MLP + head; finetune requires a sparse head and
    updates the MLP only. Batches are reshuffled each epoch from the
    seeded stream; the last partial batch is kept. With schedule_free the
    final parameters are the averaged iterates.
    """
    cfg.validate()
    if cfg.stage == "dense" and model.head_mode != "dense":
        raise ValueError("dense stage requires a dense head")
    if cfg.stage == "finetune" and model.head_mode != "sparse":
        raise ValueError("finetune requires a sparse head; run selection first")
    if data.n == 0:
        raise ValueError("empty dataset")
    data.validate()
    if data.d != model.in_dim:
        raise nn.ShapeError(f"data dim {data.d} != model dim {model.in_dim}")
    if data.n_classes != model.n_classes:
        raise ValueError("class count mismatch between data and model")

    model.dropout_p = cfg.dropout_p if cfg.stage == "dense" else 0.0
    params = model.param_dict()
    opt = nn.Adam(params, nn.AdamConfig(
        lr=cfg.lr, weight_decay=cfg.weight_decay,
        schedule_free=cfg.schedule_free))
    x_all = data.patches
    y_all = np.asarray(data.labels, dtype=np.int64)
    log: list[dict] = []
    for epoch in range(cfg.epochs):
        perm = stream(cfg.seed, "shuffle", epoch).permutation(data.n)
        sums = dict(ce=0.0, div=0.0, l1_fv=0.0, l1_fm=0.0, total=0.0)
        correct = 0
        degen = 0
        for bidx, start in enumerate(range(0, data.n, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            drop_rng = stream(cfg.seed, "dropout", epoch, bidx)
            terms, grads, aux = loss_and_grads(
                model, x_all[idx], y_all[idx], cfg, train=True,
                drop_rng=drop_rng)
            opt.step(grads)
            w = idx.size
            for k in sums:
                sums[k] += terms[k] * w
            degen += terms["degenerate_div"]
            correct += int((aux["preds"] == y_all[idx]).sum())
        rec = {k: v / data.n for k, v in sums.items()}
        rec["accuracy"] = correct / data.n
        rec["epoch"] = epoch
        rec["degenerate_div"] = degen
        log.append(rec)
    opt.swap_in_eval_params()
    return log


def evaluate_accuracy(model: AdapterModel, data: EmbeddingSet,
                      batch_size: int = 256) -> float:
    correct = 0
    y = np.asarray(data.labels, dtype=np.int64)
    for start in range(0, data.n, batch_size):
        out = model.forward_batch(data.patches[start:start + batch_size],
                                  train=False)
        correct += int((np.argmax(out["logits"], axis=1)
                        == y[start:start + batch_size]).sum())
    return correct / data.n if data.n else 0.0


def explain(model: AdapterModel, patches: np.ndarray, cls: int,
            top_k: int | None = None) -> list[tuple[int, float, np.ndarray]]:
    """Per-feature saliency for one image and one class.

    Returns (feature id, head weight, per-patch map) for the features
    assigned to ``cls``, strongest pooled activation first (ties broken by
    feature id). Requires a sparse head.
    """
    if model.head_mode != "sparse":
        raise ValueError("explanations require a sparse head")
    if not 0 <= cls < model.n_classes:
        raise ValueError(f"class {cls} out of range [0, {model.n_classes})")
    F, f, _ = model.forward(patches)
    positions = np.flatnonzero(model.assignment[cls])
    entries = []
    for pos in positions:
        fid = int(model.selected[pos])
        entries.append((fid, 1.0, F[:, fid].copy()))
    entries.sort(key=lambda e: (-float(f[e[0]]), e[0]))
    if top_k is not None:
        entries = entries[:top_k]
    return entries
