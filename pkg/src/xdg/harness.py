"""Training loops, optimizers, model selection, and random-search sweeps.

Minibatches are drawn per environment and concatenated; the loss is CE on
(possibly masked) features plus the algorithm's weighted addends. Runs are
deterministic under a fixed (config, seed): all randomness flows from one
seed sequence, and metric records contain no wall-clock fields.
"""

import csv
import json
import os
import time
from dataclasses import dataclass, replace

import numpy as np

from . import align, challenge, proto, tensor as T, xattn
from .datasets import MultiDomainDataset, SplitSpec, split_domains

ALGORITHMS = (
    "erm",
    "rsc",
    "divcam",
    "divcam+tap",
    "divcam+hnc",
    "divcam+mmd",
    "divcam+cdann",
    "protodrop",
    "dtransformer",
)


@dataclass
class HyperParams:
    lr: float = 1e-3
    batch_size: int = 16  # per environment
    weight_decay: float = 0.0
    feature_drop: float = 1.0 / 3.0
    batch_drop: float = 1.0 / 3.0
    score_rule: str = "B"
    per_domain: bool = False
    schedule: bool = False
    rsc_mode: str = "alternate"
    hnc_weight: float = 0.0
    top_m: int = 0  # 0 means classes - 1
    tap_threshold: float = 0.0
    adv_weight: float = 0.0
    disc_steps: int = 1
    grad_penalty: float = 0.0
    disc_width: int = 64
    disc_depth: int = 3
    disc_dropout: float = 0.5
    mmd_weight: float = 0.0
    clst_weight: float = 0.8
    sep_weight: float = 0.08
    intra_weight: float = 0.0
    w_neg: float = -0.5
    per_class: int = 5
    n_support: int = 4
    d_k: int = 64
    d_v: int = 64
    channels: int = 64
    blocks: int = 3
    optimizer: str = "adam"
    lr_decay: bool = False  # step decay x0.1 at 80% of training
    total_steps: int = 2000
    eval_every: int = 100
    warmup_steps: int = 100
    seed: int = 0


@dataclass
class Checkpoint:
    step: int
    params: dict
    record: dict


@dataclass
class TrainResult:
    checkpoints: list
    metrics: list
    aborted: bool
    model: object
    algorithm: str


@dataclass
class TrialResult:
    trial: int
    split_seed: int
    hp: HyperParams
    val_acc_training_domain: float
    test_acc_training_domain: float
    oracle_val_acc: float
    test_acc_oracle: float
    wall_clock: float
    error: str = ""


# ---------------------------------------------------------------------------
# optimizers


class Sgd:
    def __init__(self, lr, weight_decay=0.0):
        self.lr = lr
        self.weight_decay = weight_decay
        self.lr_scale = 1.0

    def step(self, params):
        for name, p in params.items():
            g = p.grad + self.weight_decay * p.value
            p.value -= self.lr * self.lr_scale * g


class Adam:
    def __init__(self, lr, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = {}
        self.lr_scale = 1.0

    def step(self, params):
        for name, p in params.items():
            g = p.grad + self.weight_decay * p.value
            m, v, t = self.state.get(name, (np.zeros_like(p.value), np.zeros_like(p.value), 0))
            t += 1
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.state[name] = (m, v, t)
            mhat = m / (1 - self.beta1**t)
            vhat = v / (1 - self.beta2**t)
            p.value -= self.lr * self.lr_scale * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(kind, lr, weight_decay):
    if kind == "sgd":
        return Sgd(lr, weight_decay)
    if kind == "adam":
        return Adam(lr, weight_decay)
    raise ValueError(f"optimizer must be sgd|adam, got {kind!r}")


def optimizer_step(kind_or_opt, params, hp=None):
    """One in-place update from the gradients already on the params."""
    opt = make_optimizer(kind_or_opt, hp.lr, hp.weight_decay) if isinstance(kind_or_opt, str) else kind_or_opt
    opt.step(params)
    return opt


# ---------------------------------------------------------------------------
# evaluation helpers


def _predict_chunked(predict, images, chunk=256):
    outs = [predict(images[i : i + chunk]) for i in range(0, images.shape[0], chunk)]
    return np.concatenate(outs) if outs else np.zeros((0, 1))


def accuracy_by_domain(predict, ds):
    """Per-domain accuracy plus the pooled (total correct / total n) score."""
    per = {}
    correct = total = 0
    for env in ds.environments:
        if env.labels.shape[0] == 0:
            per[env.domain_id] = 0.0
            continue
        pred = _predict_chunked(predict, env.images).argmax(axis=1)
        hits = int((pred == env.labels).sum())
        per[env.domain_id] = hits / env.labels.shape[0]
        correct += hits
        total += env.labels.shape[0]
    pooled = correct / total if total else 0.0
    return per, pooled


# ---------------------------------------------------------------------------
# training


class _Batcher:
    """Per-environment sampling with replacement, one stream for the run."""

    def __init__(self, train, batch_size, rng):
        self.train = train
        self.batch_size = batch_size
        self.rng = rng

    def draw(self):
        xs, ys, doms = [], [], []
        for pos, env in enumerate(self.train.environments):
            idx = self.rng.integers(0, env.labels.shape[0], size=self.batch_size)
            xs.append(env.images[idx])
            ys.append(env.labels[idx])
            doms.append(np.full(self.batch_size, pos, dtype=np.int64))
        return np.concatenate(xs), np.concatenate(ys), np.concatenate(doms)


def _build_model(algorithm, image_channels, classes, hp, model_seed):
    feat = T.Featurizer(image_channels, channels=hp.channels, blocks=hp.blocks,
                        rng=np.random.default_rng(model_seed))
    clf = T.LinearClassifier(hp.channels, classes, rng=np.random.default_rng(model_seed + 1))
    model = T.ModelParts(feat, clf)
    extras = {}
    if algorithm == "protodrop":
        class_of = np.repeat(np.arange(classes), hp.per_class)
        layer = proto.PrototypeLayer(hp.channels, class_of, seed=model_seed + 2)
        pclf = proto.init_prototype_classifier(classes, class_of, w_neg=hp.w_neg)
        extras = {"layer": layer, "pclf": pclf, "class_of": class_of}
    if algorithm == "dtransformer":
        extras = {"dt": xattn.DTransformer(feat, classes, d_k=hp.d_k, d_v=hp.d_v, seed=model_seed + 3)}
    return model, extras


def _parameters_for(algorithm, model, extras):
    params = dict(model.featurizer.parameters())
    if algorithm == "protodrop":
        params.update(extras["layer"].parameters())
        params.update(extras["pclf"].parameters())
    elif algorithm == "dtransformer":
        params.update({k: v for k, v in extras["dt"].parameters().items() if k.startswith("attn.")})
    else:
        params.update(model.classifier.parameters())
    return params


def _tap_logits(model, z, lam):
    return model.classifier.logits_from_pooled(align.tap_pool(z, lam))


def _make_predictor(algorithm, model, extras, hp, train_ds=None, support_seed=0):
    """Graph-free-ish forward for evaluation (no masking at eval time)."""
    if algorithm == "protodrop":
        layer, pclf = extras["layer"], extras["pclf"]

        def predict(images):
            z, _ = model.featurizer.forward(T.Node(images))
            scores, _ = layer.similarity(z)
            return pclf.logits_values(scores.value)

        return predict
    if algorithm == "dtransformer":
        dt = extras["dt"]
        support = xattn.sample_support(train_ds, hp.n_support, seed=support_seed)
        sup_images = {
            key: train_ds.environments[key[0]].images[idx] for key, idx in support.indices.items()
        }

        def predict(images):
            return dt.episode_logits(sup_images, images).value

        return predict
    if algorithm == "divcam+tap":

        def predict(images):
            z, _ = model.featurizer.forward(T.Node(images))
            return _tap_logits(model, z, hp.tap_threshold).value

        return predict
    return model.predict_values


def _mmd_addend(z_masked, domains, weight):
    pooled = T.global_avg_pool(z_masked)
    positions = np.unique(domains)
    total = None
    for i, a in enumerate(positions):
        for b in positions[i + 1 :]:
            ia = np.flatnonzero(domains == a)
            ib = np.flatnonzero(domains == b)
            term = align.mmd_mixture(
                T.slice_rows(pooled, ia[0], ia[-1] + 1), T.slice_rows(pooled, ib[0], ib[-1] + 1)
            )
            total = term if total is None else T.add(total, term)
    return T.mul(total, weight)


def train(algorithm, train_ds, val_ds, hp, test_train=None, test_val=None, trace=None):
    """Train one model; returns checkpoints at every evaluation step.

    ``test_train``/``test_val`` are the held-out domain's splits; their
    accuracies ride along in the metric records for selection later.
    A non-finite loss aborts with the checkpoints collected so far.
    """
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}; pick one of {ALGORITHMS}")
    if algorithm in ("divcam+mmd", "divcam+cdann") and len(train_ds.environments) < 2:
        raise ValueError(f"{algorithm} needs at least 2 training environments")
    classes = train_ds.class_count
    top_m = hp.top_m if hp.top_m else classes - 1
    ss = np.random.SeedSequence(hp.seed)
    data_rng, mask_rng, disc_rng, model_seed_rng = [np.random.default_rng(s) for s in ss.spawn(4)]
    model_seed = int(model_seed_rng.integers(2**31))
    model, extras = _build_model(algorithm, train_ds.image_shape[0], classes, hp, model_seed)
    params = _parameters_for(algorithm, model, extras)
    opt = make_optimizer(hp.optimizer, hp.lr, hp.weight_decay)

    disc = disc_opt = None  # cdann head, sized lazily from the first feature map
    batcher = _Batcher(train_ds, hp.batch_size, data_rng)
    cfg = challenge.ChallengeConfig(
        feature_drop=hp.feature_drop, batch_drop=hp.batch_drop, score_rule=hp.score_rule,
        per_domain=hp.per_domain, schedule=hp.schedule, rsc_mode=hp.rsc_mode,
    )

    checkpoints, metrics = [], []
    last_loss, last_addends = 0.0, {}
    aborted = False

    def evaluate(step):
        predict = _make_predictor(algorithm, model, extras, hp, train_ds, support_seed=hp.seed)
        val_per, val_pooled = accuracy_by_domain(predict, val_ds)
        record = {"step": step, "loss": float(last_loss)}
        for k in sorted(last_addends):
            record[k] = float(last_addends[k])
        record["val_acc"] = {str(k): float(v) for k, v in sorted(val_per.items())}
        record["val_acc_pooled"] = float(val_pooled)
        if test_val is not None:
            _, record["test_val_acc"] = accuracy_by_domain(predict, test_val)
        if test_train is not None:
            _, record["test_acc"] = accuracy_by_domain(predict, test_train)
        metrics.append(record)
        checkpoints.append(Checkpoint(step, {k: p.value.copy() for k, p in params.items()}, record))

    for step in range(1, hp.total_steps + 1):
        x, labels, domains = batcher.draw()
        onehot = T.onehot_encode(labels, classes)
        addends = {}
        disc_update_only = False
        if hp.lr_decay:
            opt.lr_scale = 0.1 if step > 0.8 * hp.total_steps else 1.0

        if algorithm == "dtransformer":
            support = xattn.sample_support(train_ds, hp.n_support, seed=hp.seed * 100003 + step)
            sup_images, q_x, q_y = {}, [], []
            for key, idx in support.indices.items():
                sup_images[key] = train_ds.environments[key[0]].images[idx]
            for pos, env in enumerate(train_ds.environments):
                pool = support.query_pool(pos, env.labels.shape[0])
                if pool.size == 0:
                    raise ValueError(
                        f"environment {env.domain_id} has no query samples left after "
                        f"support sampling; lower n_support={hp.n_support}"
                    )
                take = data_rng.integers(0, pool.size, size=min(hp.batch_size, pool.size))
                q_x.append(env.images[pool[take]])
                q_y.append(env.labels[pool[take]])
            q_x, q_y = np.concatenate(q_x), np.concatenate(q_y)
            logits = extras["dt"].episode_logits(sup_images, q_x)
            loss = T.softmax_cross_entropy(logits, T.onehot_encode(q_y, classes))
        elif algorithm == "protodrop":
            layer, pclf = extras["layer"], extras["pclf"]
            z, _ = model.featurizer.forward(T.Node(x))
            scores, _ = layer.similarity(z)
            masked, _, _ = proto.prodrop_step(scores, labels, pclf, extras["class_of"], cfg,
                                              trace=trace, step=step)
            loss = T.softmax_cross_entropy(pclf.logits_from_scores(masked), onehot)
            l_clst, l_sep = proto.cluster_sep_losses(z, labels, layer)
            addends["clst"] = hp.clst_weight * l_clst.value
            addends["sep"] = hp.sep_weight * l_sep.value
            loss = T.add(loss, T.add(T.mul(l_clst, hp.clst_weight), T.mul(l_sep, hp.sep_weight)))
            if hp.intra_weight:
                spread = proto.intra_loss(layer)
                addends["intra"] = -hp.intra_weight * spread.value
                loss = T.sub(loss, T.mul(spread, hp.intra_weight))
        else:
            logits_full, z, z_prev = model.forward(x)
            if algorithm == "erm":
                loss = T.softmax_cross_entropy(logits_full, onehot)
            else:
                if algorithm == "rsc":
                    res = challenge.rsc_step(z, model.classifier, onehot, cfg, z_prev=z_prev,
                                             rng=mask_rng, trace=trace, step=step)
                else:
                    res = challenge.divcam_step(z, model.classifier, onehot, cfg, step=step,
                                                total=hp.total_steps, domains=domains,
                                                rng=mask_rng, trace=trace)
                if algorithm == "divcam+tap":
                    logits = _tap_logits(model, res.features, hp.tap_threshold)
                else:
                    logits = model.classifier.logits_from_features(res.features)
                loss = T.softmax_cross_entropy(logits, onehot)
                if algorithm == "divcam+hnc":
                    addend = align.hnc_approx_loss_from_features(z, model.classifier, onehot,
                                                                 top_m, hp.hnc_weight)
                    addends["hnc"] = addend.value
                    loss = T.add(loss, addend)
                elif algorithm == "divcam+mmd":
                    addend = _mmd_addend(res.features, domains, hp.mmd_weight)
                    addends["mmd"] = addend.value
                    loss = T.add(loss, addend)
                elif algorithm == "divcam+cdann":
                    imp = challenge.pool_gradient(
                        challenge.target_gradient(z, model.classifier, onehot), "channel")
                    maps = T.relu(T.sum_(T.mul(z, T.Node(imp[:, :, None, None])), axis=1))
                    B = maps.value.shape[0]
                    flat_maps = T.reshape(maps, (B, -1))
                    if disc is None:
                        disc = align.DomainDiscriminator(
                            flat_maps.value.shape[1], len(train_ds.environments),
                            width=hp.disc_width, depth=hp.disc_depth,
                            dropout=hp.disc_dropout, seed=model_seed + 7)
                        disc_opt = make_optimizer(hp.optimizer, hp.lr, hp.weight_decay)
                    gen_addend, disc_loss = align.cdann_losses(
                        flat_maps, domains, labels, disc, hp.adv_weight, hp.grad_penalty,
                        rng=disc_rng, class_count=classes)
                    if step % (hp.disc_steps + 1) != 0:
                        if not np.isfinite(disc_loss.value):
                            aborted = True
                            break
                        T.zero_grad(disc.parameters().values())
                        T.backward(disc_loss)
                        disc_opt.step(disc.parameters())
                        last_addends = dict(addends, disc=float(disc_loss.value))
                        disc_update_only = True
                    else:
                        addends["adv"] = gen_addend.value
                        loss = T.add(loss, gen_addend)

        if not disc_update_only:
            if not np.isfinite(loss.value):
                aborted = True
                break
            last_loss, last_addends = float(loss.value), addends
            step_params = params
            if algorithm == "protodrop" and step <= hp.warmup_steps:
                step_params = extras["layer"].adapter_parameters()
            T.zero_grad(params.values())
            T.backward(loss)
            opt.step(step_params)

        if step % hp.eval_every == 0 or step == hp.total_steps:
            evaluate(step)

    if not checkpoints:
        evaluate(0)
    return TrainResult(checkpoints, metrics, aborted, model, algorithm)


def load_checkpoint_into(result_or_params, model_params):
    """Copy a checkpoint's arrays back into live parameter nodes."""
    params = result_or_params.params if isinstance(result_or_params, Checkpoint) else result_or_params
    for name, node in model_params.items():
        node.value[...] = params[name]


# ---------------------------------------------------------------------------
# model selection


def select_model(strategy, checkpoints):
    """training_domain: argmax pooled source validation accuracy (earliest on
    ties). oracle: always the final checkpoint."""
    if not checkpoints:
        raise ValueError("need at least one checkpoint")
    if strategy == "oracle":
        return checkpoints[-1]
    if strategy == "training_domain":
        best = checkpoints[0]
        for ck in checkpoints[1:]:
            if ck.record["val_acc_pooled"] > best.record["val_acc_pooled"]:
                best = ck
        return best
    raise ValueError(f"strategy must be training_domain|oracle, got {strategy!r}")


# ---------------------------------------------------------------------------
# hyperparameter sampling


def sample_hyperparams(table, rng, **overrides):
    """Random-search draw from a named distribution table."""
    if table == "batching_study":
        hp = HyperParams(
            lr=10 ** rng.uniform(-5, -1),
            batch_size=int(2 ** rng.uniform(3, 9)),
            weight_decay=10 ** rng.uniform(-6, -2),
            feature_drop=1.0 / 3.0,
            batch_drop=rng.uniform(0, 1),
            lr_decay=True,
        )
    elif table == "mask_study":
        hp = HyperParams(
            lr=10 ** rng.uniform(-5, -3.5),
            batch_size=int(2 ** rng.uniform(3, 5.5)),
            weight_decay=10 ** rng.uniform(-6, -2),
            feature_drop=rng.uniform(0.2, 0.5),
            batch_drop=rng.uniform(0, 1),
            hnc_weight=10 ** rng.uniform(-3, -1),
            tap_threshold=rng.uniform(0, 1),
            adv_weight=10 ** rng.uniform(-2, 2),
            disc_steps=int(2 ** rng.uniform(0, 3)),
            grad_penalty=10 ** rng.uniform(-2, 1),
            mmd_weight=10 ** rng.uniform(-1, 1),
            lr_decay=False,
        )
    else:
        raise ValueError(f"unknown table {table!r}")
    return replace(hp, **overrides)


# ---------------------------------------------------------------------------
# sweeps


def _run_trial(args):
    trial, split_seed, hp, source, test_env, algorithm, val_fraction = args
    start = time.perf_counter()
    test = MultiDomainDataset([source.environments[test_env]], source.class_count)
    rest = MultiDomainDataset(
        [e for i, e in enumerate(source.environments) if i != test_env], source.class_count
    )
    train_split, val_split = split_domains(rest, SplitSpec(val_fraction, seed=split_seed))
    test_train, test_val = split_domains(test, SplitSpec(val_fraction, seed=split_seed))
    try:
        result = train(algorithm, train_split, val_split, replace(hp, seed=split_seed),
                       test_train=test_train, test_val=test_val)
        td = select_model("training_domain", result.checkpoints)
        orc = select_model("oracle", result.checkpoints)
        return TrialResult(
            trial, split_seed, hp,
            val_acc_training_domain=td.record["val_acc_pooled"],
            test_acc_training_domain=td.record["test_acc"],
            oracle_val_acc=orc.record["test_val_acc"],
            test_acc_oracle=orc.record["test_acc"],
            wall_clock=time.perf_counter() - start,
        )
    except (ValueError, FloatingPointError) as exc:
        return TrialResult(trial, split_seed, hp, 0.0, 0.0, 0.0, 0.0,
                           wall_clock=time.perf_counter() - start, error=str(exc))


def population_std(values):
    """Population std that is exactly 0.0 for identical values (np.std
    leaks ~1e-16 there because the mean is inexact)."""
    if len(set(values)) <= 1:
        return 0.0
    return float(np.std(values))


@dataclass
class SweepReport:
    rows: list
    mean_training_domain: float
    std_training_domain: float
    mean_oracle: float
    std_oracle: float


def run_sweep(n_trials, split_seeds, config, out_dir=None, workers=1):
    """Random search: n_trials draws x split_seeds runs.

    Per seed, the best trial is chosen by each selection strategy's
    validation score; the report is the mean and population std over seeds
    of that trial's held-out accuracy. Trial results are cached as JSON in
    ``out_dir`` so an interrupted sweep resumes.
    """
    source = config["source"]
    algorithm = config.get("algorithm", "divcam")
    table = config.get("table", "mask_study")
    test_env = config.get("test_env", len(source.environments) - 1)
    val_fraction = config.get("val_fraction", 0.2)
    overrides = config.get("hp_overrides", {})
    base_seed = config.get("seed", 0)

    jobs = []
    for trial in range(n_trials):
        rng = np.random.default_rng(np.random.SeedSequence([base_seed, trial]))
        hp = sample_hyperparams(table, rng, **overrides)
        for seed in range(split_seeds):
            jobs.append((trial, seed, hp, source, test_env, algorithm, val_fraction))

    rows = []
    pending = []
    for job in jobs:
        cached = _load_cached_trial(out_dir, job[0], job[1])
        if cached is not None:
            rows.append(cached)
        else:
            pending.append(job)
    if workers > 1 and pending:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            for res in pool.map(_run_trial, pending):
                rows.append(res)
                _cache_trial(out_dir, res)
    else:
        for job in pending:
            res = _run_trial(job)
            rows.append(res)
            _cache_trial(out_dir, res)
    rows.sort(key=lambda r: (r.trial, r.split_seed))

    td_accs, orc_accs = [], []
    for seed in range(split_seeds):
        seed_rows = [r for r in rows if r.split_seed == seed and not r.error]
        if not seed_rows:
            continue
        best_td = max(seed_rows, key=lambda r: (r.val_acc_training_domain, -r.trial))
        best_orc = max(seed_rows, key=lambda r: (r.oracle_val_acc, -r.trial))
        td_accs.append(best_td.test_acc_training_domain)
        orc_accs.append(best_orc.test_acc_oracle)
    return SweepReport(
        rows,
        mean_training_domain=float(np.mean(td_accs)) if td_accs else 0.0,
        std_training_domain=population_std(td_accs) if td_accs else 0.0,
        mean_oracle=float(np.mean(orc_accs)) if orc_accs else 0.0,
        std_oracle=population_std(orc_accs) if orc_accs else 0.0,
    )


def _trial_cache_path(out_dir, trial, seed):
    return os.path.join(out_dir, f"trial{trial:03d}_seed{seed}.json") if out_dir else None


def _cache_trial(out_dir, res):
    # wall_clock stays off disk so rerun outputs are byte-identical
    path = _trial_cache_path(out_dir, res.trial, res.split_seed)
    if path is None:
        return
    payload = {k: getattr(res, k) for k in (
        "trial", "split_seed", "val_acc_training_domain", "test_acc_training_domain",
        "oracle_val_acc", "test_acc_oracle", "error")}
    payload["hp"] = vars(res.hp)
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True)


def _load_cached_trial(out_dir, trial, seed):
    path = _trial_cache_path(out_dir, trial, seed)
    if path is None or not os.path.exists(path):
        return None
    with open(path) as f:
        payload = json.load(f)
    hp = HyperParams(**payload.pop("hp"))
    return TrialResult(hp=hp, wall_clock=0.0, **payload)


SWEEP_CSV_FIELDS = [
    "row", "trial", "split_seed", "lr", "batch_size", "weight_decay", "feature_drop",
    "batch_drop", "val_acc_training_domain", "test_acc_training_domain",
    "oracle_val_acc", "test_acc_oracle", "error",
    "mean_training_domain", "std_training_domain", "mean_oracle", "std_oracle",
]


def write_sweep_csv(path, report):
    """Trial rows plus one summary row; the summary's mean/std columns
    recompute exactly from the trial rows above them. No timing fields, so
    reruns are byte-stable."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SWEEP_CSV_FIELDS)
        for r in report.rows:
            w.writerow([
                "trial", r.trial, r.split_seed, repr(r.hp.lr), r.hp.batch_size,
                repr(r.hp.weight_decay), repr(r.hp.feature_drop), repr(r.hp.batch_drop),
                repr(r.val_acc_training_domain), repr(r.test_acc_training_domain),
                repr(r.oracle_val_acc), repr(r.test_acc_oracle), r.error,
                "", "", "", "",
            ])
        w.writerow([
            "summary", "", "", "", "", "", "", "", "", "", "", "", "",
            repr(report.mean_training_domain), repr(report.std_training_domain),
            repr(report.mean_oracle), repr(report.std_oracle),
        ])
